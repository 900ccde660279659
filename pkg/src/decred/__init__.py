"""Encoder-decoder speech recognition with auxiliary decoder classifiers.

The package is self-contained on numpy: a small reverse-mode autodiff core
(:mod:`decred.tensor`), a transformer encoder-decoder with a CTC head and
per-layer classifiers (:mod:`decred.model`), the training objective, joint
CTC/attention search, decoding-time calibration of the classifier mix,
zero-attention language-model perplexity, WER scoring and a synthetic
multi-domain corpus.
"""

__version__ = "0.1.0"
