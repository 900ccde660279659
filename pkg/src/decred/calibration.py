"""Fitting decoding-time mixing weights on held-out data with the model frozen.

Only the mixing parameters move (``D`` scalars or ``D`` vectors of length
``V``). Teacher-forced classifier logits are computed once; the fit is
full-batch gradient descent with a backtracking line search and early
stopping on a holdout split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as tc
from .data import CharTokenizer, Manifest
from .decoding import MixingWeights, mix_logits
from .errors import ContractError, DivergenceError
from .model import Model
from .teacher import batches, collate, frozen, make_examples
from .tensor import Tensor

log = logging.getLogger(__name__)


def split_dev(manifest: Manifest, ratio: float = 0.7, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Deterministic utterance-level split into (fit, holdout)."""
    n = len(manifest)
    if n < 2:
        raise ContractError(f"split_dev needs at least 2 utterances, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_fit = min(max(int(round(ratio * n)), 1), n - 1)
    fit_ids = {manifest.entries[i].utterance_id for i in order[:n_fit]}
    fit = Manifest([e for e in manifest if e.utterance_id in fit_ids], manifest.root)
    hold = Manifest([e for e in manifest if e.utterance_id not in fit_ids], manifest.root)
    return fit, hold


@dataclass
class TeacherForcedLogits:
    """Per-classifier logits at every scored target position."""

    logits: dict[int, np.ndarray]  # d -> (N_tokens, V)
    targets: np.ndarray  # (N_tokens,)

    def __len__(self) -> int:
        return len(self.targets)


def collect_logits(model: Model, manifest: Manifest, store: Mapping[str, np.ndarray], tokenizer: CharTokenizer,
                   normalize: bool = True, batch_size: int = 32) -> TeacherForcedLogits:
    examples = make_examples(manifest, store, tokenizer, normalize)
    per_layer: dict[int, list[np.ndarray]] = {d: [] for d in model.config.classifier_layers}
    targets = []
    with frozen(model):
        for chunk in batches(examples, batch_size):
            b = collate(chunk)
            enc = model.encode(b.features, b.lengths)
            out = model.decode_forward(enc, b.dec_input)
            for d, t in out.logits_by_classifier.items():
                per_layer[d].append(t.data[b.loss_mask].astype(np.float64))
            targets.append(b.targets[b.loss_mask])
    if not targets or sum(len(t) for t in targets) == 0:
        raise ContractError("no scored target positions in the calibration set")
    return TeacherForcedLogits({d: np.concatenate(v) for d, v in per_layer.items()}, np.concatenate(targets))


def _nll(weights_tensor: Tensor, data: TeacherForcedLogits, layers: tuple[int, ...]) -> Tensor:
    total = None
    for i, d in enumerate(layers):
        term = weights_tensor[i] * Tensor(data.logits[d], dtype=np.float64)
        total = term if total is None else total + term
    lsm = tc.log_softmax(total, axis=-1)
    return tc.neg(tc.reduce_mean(tc.pick(lsm, data.targets)))


def _to_weights(mode: str, layers, values: np.ndarray) -> MixingWeights:
    if mode == "scalar":
        return MixingWeights("scalar", scalars={d: float(values[i]) for i, d in enumerate(layers)})
    return MixingWeights("vector", vectors={d: values[i].copy() for i, d in enumerate(layers)})


def _initial_values(mode: str, layers, V: int) -> np.ndarray:
    init = MixingWeights.scalar_init(layers) if mode == "scalar" else MixingWeights.vector_init(layers, V)
    if mode == "scalar":
        return np.array([init.scalars[d] for d in layers])
    return np.stack([init.vectors[d] for d in layers])


@dataclass
class CalibrationReport:
    nll: float
    accuracy: float
    tokens: int


def evaluate_calibration(weights: MixingWeights, data: TeacherForcedLogits) -> CalibrationReport:
    """Teacher-forced NLL and top-1 accuracy of the mixed next-token distribution."""
    mixed = mix_logits(data.logits, weights)
    m = mixed.max(axis=-1, keepdims=True)
    lsm = mixed - m - np.log(np.exp(mixed - m).sum(axis=-1, keepdims=True))
    nll = -float(np.mean(lsm[np.arange(len(data)), data.targets]))
    acc = float(np.mean(mixed.argmax(axis=-1) == data.targets))
    return CalibrationReport(nll, acc, len(data))


@dataclass
class FitResult:
    weights: MixingWeights
    fit_nll: list[float] = field(default_factory=list)
    holdout_nll: list[float] = field(default_factory=list)
    best_step: int = 0


def fit_mixing_weights(
    fit_data: TeacherForcedLogits,
    mode: str,
    epochs: int = 100,
    lr: float = 1.0,
    holdout_data: TeacherForcedLogits | None = None,
    patience: int = 3,
    armijo: float = 1e-4,
) -> FitResult:
    """Minimise teacher-forced NLL over the mixing weights, starting from the vanilla point.

    Each step is a gradient step whose size is halved from ``lr`` until the
    Armijo condition holds, so the fit-set NLL never increases. With holdout
    data, the iterate with the best holdout NLL is returned and the fit stops
    after ``patience`` steps without holdout improvement.
    """
    if mode not in ("scalar", "vector"):
        raise ContractError(f"mode must be 'scalar' or 'vector', got {mode!r}")
    layers = tuple(sorted(fit_data.logits))
    V = next(iter(fit_data.logits.values())).shape[1]
    values = _initial_values(mode, layers, V)

    with tc.default_dtype(np.float64):
        def value_and_grad(x):
            w = Tensor(x, requires_grad=True)
            loss = _nll(w, fit_data, layers)
            tc.backward(loss)
            return loss.item(), w.grad

        def value(x):
            return _nll(Tensor(x), fit_data, layers).item()

        f0, g = value_and_grad(values)
        result = FitResult(_to_weights(mode, layers, values), [f0])
        best_hold = None
        if holdout_data is not None:
            best_hold = evaluate_calibration(result.weights, holdout_data).nll
            result.holdout_nll.append(best_hold)
        f, stale = f0, 0
        for step in range(1, epochs + 1):
            gg = float((g * g).sum())
            if gg == 0.0:
                break
            t = lr
            for _ in range(40):
                cand = values - t * g
                fc = value(cand)
                if fc <= f - armijo * t * gg:
                    break
                t *= 0.5
            else:
                log.info("line search found no descent after %d steps; stopping", step - 1)
                break
            if not np.isfinite(fc) or fc > 10 * f0:
                raise DivergenceError(f"calibration diverged at step {step}: nll {fc} vs initial {f0}")
            values = cand
            f, g = value_and_grad(values)
            result.fit_nll.append(f)
            if holdout_data is None:
                result.weights, result.best_step = _to_weights(mode, layers, values), step
                continue
            h = evaluate_calibration(_to_weights(mode, layers, values), holdout_data).nll
            result.holdout_nll.append(h)
            if h < best_hold:
                best_hold, stale = h, 0
                result.weights, result.best_step = _to_weights(mode, layers, values), step
            else:
                stale += 1
                if stale >= patience:
                    break
    return result
