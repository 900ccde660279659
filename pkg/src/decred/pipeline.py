"""Decoding a manifest and scoring the result; shared by the CLI and experiments."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import CharTokenizer, Manifest, reference_text
from .decoding import MixingWeights, beam_search, greedy_decode, greedy_decode_batch
from .errors import ConfigurationError, ContractError
from .evaluation import DatasetScore, bootstrap_ci, wer
from .model import Model
from .teacher import frozen

SEARCHES = ("greedy", "beam")


@dataclass
class DecodeSettings:
    lam: float = 0.3
    width: int = 10
    search: str = "greedy"
    weights: MixingWeights = field(default_factory=MixingWeights.vanilla)
    length_penalty: float = 0.0
    max_len: int | None = None
    min_len: int = 0

    def __post_init__(self):
        if self.search not in SEARCHES:
            raise ConfigurationError(f"search must be one of {SEARCHES}, got {self.search!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda={self.lam} outside [0, 1]")

    def describe(self) -> str:
        parts = [f"search={self.search}", f"lambda={self.lam}", f"mode={self.weights.mode}"]
        if self.search == "beam":
            parts.insert(1, f"width={self.width}")
        return " ".join(parts)


@dataclass
class DecodeRun:
    hypotheses: dict[str, str]  # utterance id -> text, manifest order
    seconds: dict[str, float]
    total_seconds: float


def decode_manifest(model: Model, manifest: Manifest, store: Mapping[str, np.ndarray], tokenizer: CharTokenizer,
                    settings: DecodeSettings, batch_size: int = 0) -> DecodeRun:
    """Decode every utterance; ``batch_size > 0`` uses batched greedy search (no per-utterance timing)."""
    settings.weights.check(model.config.classifier_layers, model.config.V)
    hyps: dict[str, str] = {}
    secs: dict[str, float] = {}
    start = time.perf_counter()
    with frozen(model):
        if batch_size and settings.search == "greedy" and not settings.min_len:
            entries = list(manifest)
            for i in range(0, len(entries), batch_size):
                chunk = entries[i:i + batch_size]
                t0 = time.perf_counter()
                outs = greedy_decode_batch(model, [store[e.utterance_id] for e in chunk], settings.weights,
                                           settings.lam, settings.max_len)
                share = (time.perf_counter() - t0) / len(chunk)
                for e, toks in zip(chunk, outs):
                    hyps[e.utterance_id] = tokenizer.detokenize(toks)
                    secs[e.utterance_id] = share
        else:
            for e in manifest:
                feats = store[e.utterance_id]
                t0 = time.perf_counter()
                if settings.search == "greedy":
                    toks = greedy_decode(model, feats, settings.weights, settings.lam, settings.max_len,
                                         min_len=settings.min_len).output_tokens
                else:
                    toks = beam_search(model, feats, settings.weights, settings.lam, settings.width,
                                       settings.max_len, settings.length_penalty,
                                       min_len=settings.min_len)[0].output_tokens
                secs[e.utterance_id] = time.perf_counter() - t0
                hyps[e.utterance_id] = tokenizer.detokenize(toks)
    return DecodeRun(hyps, secs, time.perf_counter() - start)


def score(name: str, manifest: Manifest, hypotheses: Mapping[str, str], normalize: bool = True,
          B: int = 1000, seed: int = 0) -> DatasetScore:
    """WER of ``hypotheses`` against the manifest transcripts, with a bootstrap CI."""
    missing = [e.utterance_id for e in manifest if e.utterance_id not in hypotheses]
    if missing:
        raise ContractError(f"{len(missing)} utterances have no hypothesis, e.g. {missing[0]!r}")
    refs = [reference_text(e.raw_transcript, normalize) for e in manifest]
    hyps = [reference_text(hypotheses[e.utterance_id], normalize) for e in manifest]
    result = wer(refs, hyps)
    return DatasetScore(name, result, bootstrap_ci(result.per_utterance, B=B, seed=seed))


def per_utterance_errors(manifest: Manifest, score_: DatasetScore) -> dict[str, tuple[int, int]]:
    return {e.utterance_id: pu for e, pu in zip(manifest, score_.result.per_utterance)}
