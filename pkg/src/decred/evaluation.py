"""Word error rates, macro averages and bootstrap statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditCounts") -> "EditCounts":
        return EditCounts(self.substitutions + other.substitutions, self.deletions + other.deletions,
                          self.insertions + other.insertions, self.ref_words + other.ref_words)


def align(ref: Sequence[str], hyp: Sequence[str]) -> EditCounts:
    """Minimum-edit alignment; ties resolved as substitution, then insertion, then deletion."""
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i, j - 1] + 1, dist[i - 1, j] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return EditCounts(int(s), d, ins, n)


@dataclass(frozen=True)
class WerResult:
    wer: float
    counts: EditCounts
    per_utterance: tuple[tuple[int, int], ...]  # (errors, reference words)


def wer(refs: Sequence[str], hyps: Sequence[str]) -> WerResult:
    """Corpus WER over aligned reference/hypothesis lists."""
    if len(refs) != len(hyps):
        raise ContractError(f"wer: {len(refs)} references but {len(hyps)} hypotheses")
    total = EditCounts()
    per = []
    for r, h in zip(refs, hyps):
        c = align(r.split(), h.split())
        total = total + c
        per.append((c.errors, c.ref_words))
    if total.ref_words == 0:
        raise ContractError("wer: the reference corpus has no words")
    return WerResult(total.errors / total.ref_words, total, tuple(per))


def macro_wer(per_dataset: Mapping[str, float] | Sequence[float]) -> float:
    values = list(per_dataset.values()) if isinstance(per_dataset, Mapping) else list(per_dataset)
    if not values:
        raise ContractError("macro_wer needs at least one dataset")
    return math.fsum(values) / len(values)  # exact sum, so dataset order cannot change the result


def _resample_wers(errs: np.ndarray, refs: np.ndarray, B: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, len(errs), size=(B, len(errs)))
    r = refs[idx].sum(axis=1)
    return np.where(r > 0, errs[idx].sum(axis=1) / np.maximum(r, 1), 0.0)


def bootstrap_ci(per_utterance: Sequence[tuple[int, int]], alpha: float = 0.05, B: int = 1000,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval of corpus WER over ``B`` utterance-level resamples."""
    if B < 1:
        raise ContractError("bootstrap needs B >= 1")
    if not per_utterance:
        raise ContractError("bootstrap_ci of an empty corpus")
    arr = np.asarray(per_utterance, dtype=np.float64)
    stats = _resample_wers(arr[:, 0], arr[:, 1], B, np.random.default_rng(seed))
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def bootstrap_compare(system_a: Mapping[str, tuple[int, int]], system_b: Mapping[str, tuple[int, int]],
                      B: int = 1000, seed: int = 0) -> float:
    """Share of paired resamples in which system A does not beat system B.

    Ties count one half, so identical systems give 0.5.
    """
    if set(system_a) != set(system_b):
        raise ContractError("bootstrap_compare: systems are not paired by utterance id")
    if B < 1:
        raise ContractError("bootstrap needs B >= 1")
    ids = sorted(system_a)
    a = np.array([system_a[u] for u in ids], dtype=np.float64)
    b = np.array([system_b[u] for u in ids], dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(ids), size=(B, len(ids)))
    ra = a[idx, 1].sum(axis=1)
    wa = np.where(ra > 0, a[idx, 0].sum(axis=1) / np.maximum(ra, 1), 0.0)
    rb = b[idx, 1].sum(axis=1)
    wb = np.where(rb > 0, b[idx, 0].sum(axis=1) / np.maximum(rb, 1), 0.0)
    return float(((wa > wb).sum() + 0.5 * (wa == wb).sum()) / B)


# -- reports ---------------------------------------------------------------------


@dataclass
class DatasetScore:
    name: str
    result: WerResult
    ci: tuple[float, float]


def format_report(scores: Sequence[DatasetScore], p_values: Mapping[str, float] | None = None,
                  header: Mapping[str, object] | None = None) -> str:
    """Human-readable table followed by a ``key=value`` block."""
    lines = []
    for k, v in (header or {}).items():
        lines.append(f"# {k}: {v}")
    lines.append(f"{'dataset':<16}{'utts':>6}{'words':>7}{'sub':>6}{'del':>6}{'ins':>6}"
                 f"{'WER%':>8}{'CI low':>8}{'CI high':>8}")
    for s in scores:
        c = s.result.counts
        lines.append(f"{s.name:<16}{len(s.result.per_utterance):>6}{c.ref_words:>7}{c.substitutions:>6}"
                     f"{c.deletions:>6}{c.insertions:>6}{100 * s.result.wer:>8.2f}"
                     f"{100 * s.ci[0]:>8.2f}{100 * s.ci[1]:>8.2f}")
    macro = macro_wer([s.result.wer for s in scores]) if scores else float("nan")
    lines.append(f"{'macro':<16}{'':>38}{100 * macro:>8.2f}")
    lines.append("")
    lines.append("[metrics]")
    for s in scores:
        lines.append(f"wer.{s.name}={100 * s.result.wer:.4f}")
        lines.append(f"ci_low.{s.name}={100 * s.ci[0]:.4f}")
        lines.append(f"ci_high.{s.name}={100 * s.ci[1]:.4f}")
    lines.append(f"macro_wer={100 * macro:.4f}")
    for k, v in (p_values or {}).items():
        lines.append(f"p_value.{k}={v:.4f}")
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> dict[str, float]:
    """Read the ``[metrics]`` block of a report back into a dict."""
    out, on = {}, False
    for line in text.splitlines():
        if line.strip() == "[metrics]":
            on = True
            continue
        if on and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out
