"""Zero-attention internal language model perplexity.

The decoder is run with every cross-attention context vector set to zero,
so the final classifier predicts the next token from the token history
alone. EOS is scored, BOS is not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import BOS, EOS, CharTokenizer, Manifest, prepare_transcript
from .errors import ContractError
from .model import Model
from .teacher import frozen


def ilm_token_logprobs(model: Model, tokens: Sequence[int]) -> np.ndarray:
    """``log p(y_n | y_<n)`` for each token of ``tokens`` followed by EOS.

    A leading BOS or trailing EOS in ``tokens`` is tolerated and not doubled.
    """
    body = list(tokens)
    if body and body[0] == BOS:
        body = body[1:]
    if body and body[-1] == EOS:
        body = body[:-1]
    dec_in = np.array([[BOS] + body], dtype=np.int64)
    targets = np.array(body + [EOS], dtype=np.int64)
    D = model.config.D
    with frozen(model):
        out = model.decode_forward(None, dec_in, layers=[D], zero_attention=True)
    logits = out.logits_by_classifier[D].data[0].astype(np.float64)
    m = logits.max(axis=-1, keepdims=True)
    lsm = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return lsm[np.arange(len(targets)), targets]


@dataclass
class PerplexityResult:
    perplexity: float
    total_logprob: float
    tokens: int
    utterances: int


def ilm_perplexity_tokens(model: Model, sequences: Iterable[Sequence[int]]) -> PerplexityResult:
    total, count, n = 0.0, 0, 0
    for seq in sequences:
        lp = ilm_token_logprobs(model, seq)
        total += float(lp.sum())
        count += len(lp)
        n += 1
    if n == 0:
        raise ContractError("ILM perplexity of an empty corpus")
    return PerplexityResult(math.exp(-total / count), total, count, n)


def ilm_perplexity(model: Model, manifest: Manifest, tokenizer: CharTokenizer, normalize: bool = True) -> PerplexityResult:
    """Corpus perplexity over manifest transcripts (MASK words removed)."""
    seqs = [tokenizer.tokenize(prepare_transcript(e.raw_transcript, normalize).ctc_text) for e in manifest]
    return ilm_perplexity_tokens(model, seqs)


def format_ilm_report(rows: Mapping[str, Mapping[str, float]]) -> str:
    """Table with one row per model and one column per dataset."""
    datasets = sorted({d for r in rows.values() for d in r})
    width = max([len("model")] + [len(m) for m in rows]) + 2
    head = "model".ljust(width) + "".join(d.rjust(12) for d in datasets)
    lines = [head]
    for model_name, r in rows.items():
        lines.append(model_name.ljust(width) + "".join(
            (f"{r[d]:.2f}" if d in r else "-").rjust(12) for d in datasets))
    return "\n".join(lines) + "\n"
