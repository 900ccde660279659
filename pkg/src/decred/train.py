"""Teacher-forced training with dev-WER checkpoint selection."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .data import CharTokenizer, Manifest, length_filter, reference_text, spec_augment, speed_perturb
from .decoding import MixingWeights, greedy_decode_batch
from .errors import NumericError
from .evaluation import wer
from .model import Model, build_model, load_checkpoint, save_checkpoint
from .objective import ObjectiveConfig, batch_ctc_loss, decred_loss, total_loss
from .teacher import Batch, Example, batches, collate, frozen, make_examples
from .tensor import Tensor

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay; parameters without a gradient are left alone."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** t)
            vhat = self.v[k] / (1 - self.b2 ** t)
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
            out[f"t.{k}"] = np.array(self.t[k])
        return out

    def load(self, state: Mapping[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])
            self.t[k] = int(state[f"t.{k}"])


def learning_rate(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``peak`` then linear decay to zero at ``total``."""
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    return peak * max(0.0, (total - step) / (total - warmup))


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


@dataclass
class StepLosses:
    step: int
    total: float
    ctc: float
    attn: dict[int, float]
    lr: float


def compute_loss(model: Model, batch: Batch, objective: ObjectiveConfig, training: bool = False,
                 rng: np.random.Generator | None = None, record: dict | None = None):
    """Total objective on one batch; per-component values go into ``record``."""
    enc = model.encode(batch.features, batch.lengths, training=training, rng=rng)
    ctc = None
    if objective.alpha > 0:
        lp = tc.log_softmax(model.ctc_logits(enc), axis=-1)
        ctc, _ = batch_ctc_loss(lp, batch.ctc_targets, enc.lengths, objective.ctc_reduction)
    decred = None
    if objective.alpha < 1 and batch.loss_mask.any():
        layers = [d for d, b in objective.betas.items() if b != 0]
        out = model.decode_forward(enc, batch.dec_input, layers=layers, training=training, rng=rng)
        decred = decred_loss(out, batch.targets, batch.loss_mask, objective.betas, objective.label_smoothing_eps)
        if record is not None:
            from .objective import label_smoothed_ce

            for d in layers:
                record[f"attn.{d}"] = label_smoothed_ce(out.logits_by_classifier[d].detach(), batch.targets,
                                                        batch.loss_mask, objective.label_smoothing_eps).item()
    if record is not None:
        record["ctc"] = ctc.item() if ctc is not None else 0.0
    if ctc is None:
        return decred
    if decred is None:
        return ctc
    return total_loss(ctc, decred, objective.alpha)


def dev_wer(model: Model, examples: Sequence[Example], raw: Mapping[str, str], tokenizer: CharTokenizer,
            lam: float, normalize: bool = True, weights: MixingWeights | None = None, batch_size: int = 32) -> float:
    refs, hyps = [], []
    with frozen(model):
        for chunk in batches(examples, batch_size):
            outs = greedy_decode_batch(model, [ex.features for ex in chunk], weights, lam)
            for ex, toks in zip(chunk, outs):
                refs.append(reference_text(raw[ex.utterance_id], normalize))
                hyps.append(reference_text(tokenizer.detokenize(toks), normalize))
    return wer(refs, hyps).wer


@dataclass
class TrainResult:
    model: Model
    history: list[StepLosses] = field(default_factory=list)
    dev_wers: list[tuple[int, float]] = field(default_factory=list)
    best_dev_wer: float = float("inf")
    best_step: int = 0
    seconds: float = 0.0


def _augment(ex: Example, step: int, rng: np.random.Generator, spec_after: int, data_cfg) -> np.ndarray:
    feats = ex.features
    if data_cfg.speed_perturb:
        feats = speed_perturb(feats, rng)
    if data_cfg.spec_augment and step >= spec_after:
        feats = spec_augment(feats, rng)
    return feats


def train(
    cfg,
    train_manifest: Manifest,
    train_store: Mapping[str, np.ndarray],
    dev_manifest: Manifest | None = None,
    dev_store: Mapping[str, np.ndarray] | None = None,
    tokenizer: CharTokenizer | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Train from ``cfg`` (a :class:`~decred.config.RunConfig`).

    The returned model holds the parameters with the best dev WER (or the
    final ones without a dev set). With ``out_dir``, ``best.ckpt`` and
    ``last.ckpt`` (+ optimiser state) are written there.
    """
    started = time.perf_counter()
    tokenizer = tokenizer or CharTokenizer()
    cfg.validate()
    cfg.model.validate(tokenizer)
    tcfg, dcfg = cfg.train, cfg.data
    rng = np.random.default_rng(tcfg.seed)
    model = build_model(cfg.model, seed=tcfg.seed, tokenizer=tokenizer)
    train_manifest = length_filter(train_manifest, train_store, dcfg.max_frames)
    examples = make_examples(train_manifest, train_store, tokenizer, dcfg.normalize, cfg.objective.mask_special_tokens)
    dev_examples, dev_raw = [], {}
    if dev_manifest is not None and len(dev_manifest):
        dev_entries = dev_manifest.entries[: tcfg.dev_max_utts] if tcfg.dev_max_utts else dev_manifest.entries
        dev_sub = Manifest(dev_entries, dev_manifest.root)
        dev_examples = make_examples(dev_sub, dev_store, tokenizer, dcfg.normalize)
        dev_raw = {e.utterance_id: e.raw_transcript for e in dev_sub}
    steps_per_epoch = math.ceil(len(examples) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    opt = AdamW(model.params, tcfg.lr, tcfg.weight_decay)
    step, start_epoch = 0, 0
    result = TrainResult(model)
    if resume is not None:
        step, start_epoch = _restore(resume, model, opt, rng)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    best_state, stale = model.state_dict(), 0
    probe = collate(dev_examples[: tcfg.batch_size]) if dev_examples else collate(examples[: tcfg.batch_size])

    for epoch in range(start_epoch, tcfg.epochs):
        order = rng.permutation(len(examples))
        for i in range(steps_per_epoch):
            chunk = [examples[j] for j in order[i * tcfg.batch_size:(i + 1) * tcfg.batch_size]]
            step += 1
            feats = [_augment(ex, step, rng, tcfg.spec_augment_after, dcfg) for ex in chunk]
            batch = collate(chunk, feats)
            record: dict = {}
            model.zero_grad()
            loss = compute_loss(model, batch, cfg.objective, training=True, rng=rng, record=record)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}; last good checkpoint kept")
            tc.backward(loss)
            clip_gradients(model.parameters(), tcfg.clip_norm)
            lr = learning_rate(step, tcfg.lr, tcfg.warmup_steps, total_steps)
            opt.step(lr)
            attn = {int(k.split(".")[1]): v for k, v in record.items() if k.startswith("attn.")}
            result.history.append(StepLosses(step, value, record.get("ctc", 0.0), attn, lr))
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f ctc %.4f attn %s lr %.2e", step, value, record.get("ctc", 0.0),
                         {d: round(v, 4) for d, v in attn.items()}, lr)
        last_epoch = epoch + 1 == tcfg.epochs
        if dev_examples and ((epoch + 1) % tcfg.eval_every == 0 or last_epoch):
            w = dev_wer(model, dev_examples, dev_raw, tokenizer, tcfg.dev_lambda, dcfg.normalize)
            result.dev_wers.append((step, w))
            log.info("epoch %d step %d dev WER %.2f%%", epoch + 1, step, 100 * w)
            if w < result.best_dev_wer:
                result.best_dev_wer, result.best_step, stale = w, step, 0
                best_state = model.state_dict()
                if out:
                    _save(out / "best.ckpt", model, tokenizer, cfg, step, probe, opt, rng, epoch + 1)
            else:
                stale += 1
        if out:
            _save(out / "last.ckpt", model, tokenizer, cfg, step, probe, opt, rng, epoch + 1)
        if dev_examples and stale >= tcfg.patience:
            log.info("early stopping after %d evaluations without improvement", stale)
            break
    if dev_examples:
        model.load_state_dict(best_state)
    else:
        result.best_step = step
    result.seconds = time.perf_counter() - started
    return result


def probe_loss(model: Model, batch: Batch, objective: ObjectiveConfig) -> float:
    """Eval-mode objective on a fixed batch (recorded in checkpoints for resume checks)."""
    with frozen(model):
        return compute_loss(model, batch, objective).item()


def _save(path: Path, model, tokenizer, cfg, step, probe, opt, rng, epoch) -> None:
    meta = {"step": step, "epoch": epoch, "probe_loss": repr(probe_loss(model, probe, cfg.objective)),
            "seed": cfg.train.seed}
    save_checkpoint(path, model, tokenizer, meta)
    state = opt.state()
    state["rng"] = np.frombuffer(json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8)
    state["step"] = np.array(step)
    state["epoch"] = np.array(epoch)
    with open(path.with_suffix(".state.npz"), "wb") as fh:
        np.savez(fh, **state)


def _restore(path, model: Model, opt: AdamW, rng: np.random.Generator) -> tuple[int, int]:
    loaded, _, _ = load_checkpoint(path)
    model.load_state_dict(loaded.state_dict())
    with np.load(Path(path).with_suffix(".state.npz")) as state:
        opt.load(state)
        rng.bit_generator.state = json.loads(bytes(state["rng"]).decode())
        return int(state["step"]), int(state["epoch"])
