"""Batching of manifest utterances into teacher-forced model inputs."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import BOS, EOS, PAD, CharTokenizer, Manifest, build_loss_mask, prepare_transcript
from .model import Model


@dataclass
class Example:
    utterance_id: str
    features: np.ndarray
    dec_input: list[int]  # BOS + tokens
    targets: list[int]  # tokens + EOS
    loss_mask: np.ndarray
    ctc_target: list[int]


def make_example(utt_id: str, raw: str, features: np.ndarray, tokenizer: CharTokenizer,
                 normalize: bool = True, mask_special: bool = True) -> Example:
    prepared = prepare_transcript(raw, normalize=normalize)
    tokens = tokenizer.tokenize(prepared.attention_text)
    targets = tokens + [EOS]
    mask = build_loss_mask(targets, raw) if mask_special else np.ones(len(targets), dtype=bool)
    return Example(utt_id, features, [BOS] + tokens, targets, mask, tokenizer.tokenize(prepared.ctc_text))


def make_examples(manifest: Manifest, store: Mapping[str, np.ndarray], tokenizer: CharTokenizer,
                  normalize: bool = True, mask_special: bool = True) -> list[Example]:
    return [make_example(e.utterance_id, e.raw_transcript, store[e.utterance_id], tokenizer, normalize, mask_special)
            for e in manifest]


@dataclass
class Batch:
    features: np.ndarray  # (B, T, F)
    lengths: np.ndarray
    dec_input: np.ndarray  # (B, N)
    targets: np.ndarray  # (B, N)
    loss_mask: np.ndarray  # (B, N)
    ctc_targets: list[list[int]]
    ids: list[str]


def collate(examples: Sequence[Example], features: Sequence[np.ndarray] | None = None) -> Batch:
    """Pad a list of examples; ``features`` overrides (e.g. augmented) inputs."""
    feats = [ex.features for ex in examples] if features is None else list(features)
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    B, T, F = len(feats), int(lengths.max()), feats[0].shape[1]
    x = np.zeros((B, T, F), dtype=np.float32)
    for b, f in enumerate(feats):
        x[b, : f.shape[0]] = f
    N = max(len(ex.targets) for ex in examples)
    dec_in = np.full((B, N), PAD, dtype=np.int64)
    tgt = np.full((B, N), PAD, dtype=np.int64)
    mask = np.zeros((B, N), dtype=bool)
    for b, ex in enumerate(examples):
        n = len(ex.targets)
        dec_in[b, :n] = ex.dec_input
        tgt[b, :n] = ex.targets
        mask[b, :n] = ex.loss_mask
    return Batch(x, lengths, dec_in, tgt, mask, [ex.ctc_target for ex in examples],
                 [ex.utterance_id for ex in examples])


def batches(examples: Sequence[Example], size: int):
    for i in range(0, len(examples), size):
        yield examples[i:i + size]


@contextlib.contextmanager
def frozen(model: Model):
    """Run forward passes without building gradient graphs."""
    flags = {k: p.requires_grad for k, p in model.params.items()}
    model.freeze()
    try:
        yield model
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]
