"""Training losses: CTC, label-smoothed cross-entropy and their weighted mix."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .data import BLANK
from .errors import ConfigurationError, ContractError
from .model import DecoderForwardOutput
from .tensor import Tensor

log = logging.getLogger(__name__)


CTC_REDUCTIONS = ("utterances", "tokens")


@dataclass
class ObjectiveConfig:
    alpha: float = 0.3
    betas: dict[int, float] = field(default_factory=dict)
    label_smoothing_eps: float = 0.1
    mask_special_tokens: bool = True
    ctc_reduction: str = "tokens"  # or "utterances"

    def validate(self, classifier_layers: Sequence[int] | None = None) -> None:
        problems = []
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"alpha={self.alpha} outside [0, 1]")
        if not self.betas:
            problems.append("betas is empty")
        if any(b < 0 for b in self.betas.values()):
            problems.append(f"betas {self.betas} contain a negative weight")
        if abs(sum(self.betas.values()) - 1.0) > 1e-9:
            problems.append(f"betas {self.betas} do not sum to 1")
        if classifier_layers is not None:
            extra = sorted(set(self.betas) - set(classifier_layers))
            if extra:
                problems.append(f"betas name layers {extra} that have no classifier")
        if not 0.0 <= self.label_smoothing_eps < 1.0:
            problems.append("label_smoothing_eps must lie in [0, 1)")
        if self.ctc_reduction not in CTC_REDUCTIONS:
            problems.append(f"ctc_reduction must be one of {CTC_REDUCTIONS}")
        if problems:
            raise ConfigurationError("invalid objective config: " + "; ".join(problems))


# -- CTC ------------------------------------------------------------------------------


def min_alignment_length(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe))


def _shift(x: np.ndarray, k: int, fill) -> np.ndarray:
    """Shift the last axis by ``k`` (right if positive, left if negative), padding with ``fill``."""
    out = np.full_like(x, fill)
    S = x.shape[-1]
    if abs(k) < S:
        if k > 0:
            out[..., k:] = x[..., :S - k]
        else:
            out[..., :S + k] = x[..., -k:]
    return out


def _ctc_forward_backward(lp: np.ndarray, targets: Sequence[Sequence[int]], lengths: np.ndarray):
    """Log-space alpha/beta recursions for a padded batch.

    Returns per-utterance log-likelihoods and the gradient of their negation
    with respect to ``lp``.
    """
    B, T, V = lp.shape
    S = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.full((B, S), BLANK, dtype=np.int64)
    s_len = np.zeros(B, dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
        s_len[b] = 2 * len(tgt) + 1
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    valid_s = np.arange(S)[None, :] < s_len[:, None]
    emit = np.where(valid_s[:, None, :], emit, -np.inf)

    alpha = np.full((B, T, S), -np.inf)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a1 = _shift(prev, 1, -np.inf)
        a2 = np.where(skip, _shift(prev, 2, -np.inf), -np.inf)
        alpha[:, t] = _logsumexp3(prev, a1, a2) + emit[:, t]

    beta = np.full((B, T, S), -np.inf)
    idx = np.arange(B)
    for t in range(T - 1, -1, -1):
        starts = lengths - 1 == t
        if np.any(starts):
            b = idx[starts]
            beta[b, t, s_len[b] - 1] = emit[b, t, s_len[b] - 1]
            has_label = s_len[b] > 1
            beta[b[has_label], t, s_len[b[has_label]] - 2] = emit[b[has_label], t, s_len[b[has_label]] - 2]
        inner = lengths - 1 > t
        if np.any(inner) and t + 1 < T:
            nxt = beta[:, t + 1]
            b1 = _shift(nxt, -1, -np.inf)
            b2 = np.where(_shift(skip, -2, False), _shift(nxt, -2, -np.inf), -np.inf)
            rec = _logsumexp3(nxt, b1, b2) + emit[:, t]
            beta[inner, t] = rec[inner]

    end = lengths - 1
    last = alpha[idx, end, s_len - 1]
    penult = np.where(s_len > 1, alpha[idx, end, np.maximum(s_len - 2, 0)], -np.inf)
    with np.errstate(invalid="ignore"):
        logp = np.logaddexp(last, penult)

    grad = np.zeros_like(lp)
    ok = np.isfinite(logp)
    if np.any(ok):
        with np.errstate(invalid="ignore"):
            occ = alpha + beta - emit - logp[:, None, None]
        occ = np.where(np.isfinite(occ) & ok[:, None, None], np.exp(occ), 0.0)
        onehot = np.zeros((B, S, V))
        np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
        onehot *= valid_s[:, :, None]
        grad = -np.matmul(occ, onehot)
        grad *= (np.arange(T)[None, :] < lengths[:, None])[:, :, None]
    return logp, grad


def ctc_loss_per_utterance(frame_log_probs: Tensor, targets: Sequence[Sequence[int]],
                           input_lengths=None) -> Tensor:
    """``-log P(target | x)`` for each utterance of a ``(B, T', V)`` batch.

    Unalignable utterances (too few frames) get ``inf`` and a zero gradient.
    """
    lp = frame_log_probs
    if lp.ndim != 3:
        raise ContractError(f"ctc_loss: expected (B, T, V) log-probs, got {lp.shape}")
    B, T, V = lp.shape
    if len(targets) != B:
        raise ContractError(f"ctc_loss: {len(targets)} targets for a batch of {B}")
    lengths = np.full(B, T, dtype=np.int64) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > T):
        raise ContractError(f"ctc_loss: input lengths {lengths.tolist()} invalid for T={T}")
    for tgt in targets:
        if any(t == BLANK or not 0 <= t < V for t in tgt):
            raise ContractError("ctc_loss: targets must be non-blank ids inside the vocabulary")
    logp, grad = _ctc_forward_backward(lp.data.astype(np.float64), [list(t) for t in targets], lengths)
    loss = -logp
    dtype = lp.data.dtype

    def bw(g):
        return ((g[:, None, None] * grad).astype(dtype),)

    return Tensor.from_op(loss.astype(dtype), (lp,), bw, "ctc_loss")


def ctc_loss(frame_log_probs: Tensor, target: Sequence[int], T: int | None = None, N: int | None = None) -> Tensor:
    """Single-utterance CTC loss on ``(T', V)`` log-probs; ``inf`` if unalignable."""
    lp = frame_log_probs
    if lp.ndim != 2:
        raise ContractError(f"ctc_loss: expected (T', V) log-probs, got {lp.shape}")
    T = lp.shape[0] if T is None else T
    target = list(target) if N is None else list(target)[:N]
    batched = tc.reshape(lp, (1,) + lp.shape)
    return tc.reshape(ctc_loss_per_utterance(batched, [target], [T]), ())


def batch_ctc_loss(frame_log_probs: Tensor, targets: Sequence[Sequence[int]], input_lengths,
                   reduction: str = "utterances") -> tuple[Tensor, np.ndarray]:
    """Batch CTC loss over alignable utterances, plus the mask of those kept.

    ``reduction="utterances"`` averages the per-utterance losses;
    ``"tokens"`` divides their sum by the number of target tokens plus one
    per utterance, the same count the attention cross-entropy averages over
    (tokens + EOS), which keeps the two losses on one scale. Unalignable
    utterances are skipped with a warning; if none are left the loss is a
    constant zero.
    """
    if reduction not in CTC_REDUCTIONS:
        raise ContractError(f"reduction must be one of {CTC_REDUCTIONS}, got {reduction!r}")
    lengths = np.asarray(input_lengths, dtype=np.int64)
    keep = np.array([min_alignment_length(t) <= n for t, n in zip(targets, lengths)], dtype=bool)
    if not np.all(keep):
        log.warning("skipping %d unalignable utterance(s) in the CTC loss", int((~keep).sum()))
    if not np.any(keep):
        return Tensor(np.zeros((), dtype=frame_log_probs.dtype)), keep
    per = ctc_loss_per_utterance(frame_log_probs, targets, lengths)
    if not np.all(keep):
        per = tc.masked_select(per, keep)
    if reduction == "utterances":
        return tc.reduce_mean(per), keep
    count = sum(len(t) + 1 for t, k in zip(targets, keep) if k)
    return tc.reduce_sum(per) * (1.0 / count), keep


# -- cross-entropy ----------------------------------------------------------------------


def label_smoothed_ce(logits: Tensor, targets, loss_mask, eps: float) -> Tensor:
    """Mean over unmasked positions of ``-sum_v q_v log p_v``, ``q = (1-eps) onehot + eps/V``."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ContractError(f"label_smoothed_ce: logits {logits.shape}, targets {targets.shape}, mask {mask.shape} disagree")
    if not np.any(mask):
        raise ContractError("label_smoothed_ce: every position is masked")
    V = logits.shape[-1]
    lsm = tc.log_softmax(logits, axis=-1)
    nll = tc.neg(tc.pick(lsm, targets))
    if eps:
        smooth = tc.neg(tc.reduce_sum(lsm, axis=-1)) * (1.0 / V)
        per_pos = nll * (1.0 - eps) + smooth * eps
    else:
        per_pos = nll
    return tc.reduce_mean(tc.masked_select(per_pos, mask))


def decred_loss(outputs: DecoderForwardOutput, targets, loss_mask, betas: Mapping[int, float],
                eps: float = 0.1) -> Tensor:
    """``sum_d beta_d * CE_d``; layers with zero weight are skipped."""
    missing = sorted(d for d in betas if d not in outputs.logits_by_classifier and betas[d] != 0)
    if missing:
        raise ConfigurationError(f"betas name layer(s) {missing} without classifier logits")
    total = None
    for d in sorted(betas):
        b = float(betas[d])
        if b == 0.0:
            continue
        term = label_smoothed_ce(outputs.logits_by_classifier[d], targets, loss_mask, eps) * b
        total = term if total is None else total + term
    if total is None:
        raise ConfigurationError("all betas are zero")
    return total


def total_loss(ctc, decred, alpha: float):
    """``alpha * ctc + (1 - alpha) * decred``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha={alpha} outside [0, 1]")
    if alpha == 0.0:
        return decred
    if alpha == 1.0:
        return ctc
    return ctc * alpha + decred * (1.0 - alpha)
