"""Greedy and beam search with joint CTC/attention scoring.

The attention-side distribution is built from the decoder classifiers in one
of three ways (see :class:`MixingWeights`):

``vanilla``  softmax of the last layer's logits
``scalar``   softmax of ``sum_d beta_d * logits_d``
``vector``   softmax of ``sum_d v_d * logits_d`` (elementwise ``v_d`` in R^V)

A hypothesis is scored as ``lam * log p_ctc(prefix) + (1 - lam) * sum log p_attn``,
where the CTC term is the prefix probability (or the complete-sequence
probability once EOS is emitted).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .data import BLANK, BOS, EOS, MASK, PAD
from .errors import ConfigurationError, ContractError
from .model import DecoderForwardOutput, EncoderOutput, Model, subsampled_length

log = logging.getLogger(__name__)

MODES = ("vanilla", "scalar", "vector")
# ids that are never proposed as the next output token
NEVER_EMIT = (BLANK, PAD, BOS, MASK)


# -- mixing weights ----------------------------------------------------------------------


@dataclass
class MixingWeights:
    mode: str = "vanilla"
    scalars: dict[int, float] = field(default_factory=dict)
    vectors: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mixing mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "vanilla" and (self.scalars or self.vectors):
            raise ConfigurationError("vanilla mixing carries no parameters")
        if self.mode == "scalar" and (not self.scalars or self.vectors):
            raise ConfigurationError("scalar mixing needs per-layer scalars only")
        if self.mode == "vector" and (not self.vectors or self.scalars):
            raise ConfigurationError("vector mixing needs per-layer vectors only")
        self.vectors = {int(d): np.asarray(v, dtype=np.float64) for d, v in self.vectors.items()}
        self.scalars = {int(d): float(b) for d, b in self.scalars.items()}

    @classmethod
    def vanilla(cls) -> "MixingWeights":
        return cls("vanilla")

    @classmethod
    def scalar_init(cls, layers: Sequence[int]) -> "MixingWeights":
        """One-hot on the last layer: reproduces vanilla decoding."""
        top = max(layers)
        return cls("scalar", scalars={d: 1.0 if d == top else 0.0 for d in layers})

    @classmethod
    def vector_init(cls, layers: Sequence[int], V: int) -> "MixingWeights":
        """All-ones on the last layer, zeros elsewhere: reproduces vanilla decoding."""
        top = max(layers)
        return cls("vector", vectors={d: np.full(V, 1.0 if d == top else 0.0) for d in layers})

    @property
    def layers(self) -> tuple[int, ...]:
        src = self.scalars if self.mode == "scalar" else self.vectors
        return tuple(sorted(src))

    def check(self, classifier_layers: Sequence[int], V: int | None = None) -> None:
        if self.mode == "vanilla":
            return
        if set(self.layers) != set(classifier_layers):
            raise ConfigurationError(
                f"{self.mode} weights are keyed by layers {self.layers}, model has classifiers {tuple(classifier_layers)}")
        if self.mode == "vector" and V is not None:
            bad = [d for d, v in self.vectors.items() if v.shape != (V,)]
            if bad:
                raise ConfigurationError(f"vector weights for layers {bad} do not have length V={V}")


def mix_logits(logits_by_layer: Mapping[int, np.ndarray], weights: MixingWeights) -> np.ndarray:
    """Combined logits (numpy, float64) for the given mixing mode."""
    if weights.mode == "vanilla":
        top = max(logits_by_layer)
        return np.asarray(logits_by_layer[top], dtype=np.float64)
    missing = [d for d in weights.layers if d not in logits_by_layer]
    if missing:
        raise ConfigurationError(f"logits missing for layer(s) {missing}")
    total = None
    for d in weights.layers:
        L = np.asarray(logits_by_layer[d], dtype=np.float64)
        term = weights.scalars[d] * L if weights.mode == "scalar" else weights.vectors[d] * L
        total = term if total is None else total + term
    return total


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def p_decred(outputs: DecoderForwardOutput | Mapping[int, np.ndarray], weights: MixingWeights,
             position: int = -1) -> np.ndarray:
    """Next-token distribution at ``position`` (default: the last one)."""
    if isinstance(outputs, DecoderForwardOutput):
        logits = {d: t.data[..., position, :] for d, t in outputs.logits_by_classifier.items()}
    else:
        logits = dict(outputs)
    if weights.mode == "vanilla" and logits and max(logits) not in logits:
        raise ConfigurationError("vanilla decoding needs the last classifier's logits")
    return np.exp(_log_softmax_np(mix_logits(logits, weights)))


def attention_logprobs(outputs: DecoderForwardOutput, weights: MixingWeights, position: int = -1) -> np.ndarray:
    logits = {d: t.data[..., position, :] for d, t in outputs.logits_by_classifier.items()}
    return _log_softmax_np(mix_logits(logits, weights))


def required_layers(model: Model, weights: MixingWeights) -> tuple[int, ...]:
    cfg = model.config
    if weights.mode == "vanilla":
        return (cfg.D,)
    weights.check(cfg.classifier_layers, cfg.V)
    return weights.layers


# -- CTC prefix scoring -------------------------------------------------------------------------


@dataclass
class CtcState:
    """Prefix-scorer recursion state for one prefix.

    ``r_nonblank[t]`` / ``r_blank[t]`` are log-probabilities of the prefix
    having been emitted by frame ``t`` and ending in a label / a blank.
    """

    r_nonblank: np.ndarray
    r_blank: np.ndarray
    score: float  # log prefix probability
    last: int | None
    finished: bool = False


class CtcPrefixScorer:
    """Prefix probabilities under a CTC posterior ``(T', V)`` in log space."""

    def __init__(self, frame_log_probs: np.ndarray):
        lp = np.asarray(frame_log_probs, dtype=np.float64)
        if lp.ndim != 2 or lp.shape[0] == 0:
            raise ContractError(f"prefix scorer needs (T', V) log-probs, got {lp.shape}")
        self.lp = lp
        self.T, self.V = lp.shape

    def init(self) -> CtcState:
        r_blank = np.cumsum(self.lp[:, BLANK])
        return CtcState(np.full(self.T, -np.inf), r_blank, 0.0, None)

    def candidate_scores(self, state: CtcState, tokens: Sequence[int]):
        """Absolute prefix scores of ``prefix + c`` for every ``c`` in ``tokens``.

        EOS gets the complete-sequence score. Returns ``(scores, r_nonblank, r_blank)``
        with shapes ``(C,)``, ``(C, T)``, ``(C, T)``.
        """
        if state.finished:
            raise ContractError("cannot extend a finished CTC prefix")
        toks = np.asarray(tokens, dtype=np.int64)
        C, T = len(toks), self.T
        emit = self.lp[:, toks].T  # (C, T)
        r_n = np.full((C, T), -np.inf)
        r_b = np.full((C, T), -np.inf)
        total = np.logaddexp(state.r_nonblank, state.r_blank)
        phi = np.broadcast_to(total, (C, T)).copy()
        if state.last is not None:
            same = toks == state.last
            phi[same] = state.r_blank
        if state.last is None:
            r_n[:, 0] = emit[:, 0]
        scores = r_n[:, 0].copy()
        blank = self.lp[:, BLANK]
        for t in range(1, T):
            r_n[:, t] = np.logaddexp(r_n[:, t - 1], phi[:, t - 1]) + emit[:, t]
            r_b[:, t] = np.logaddexp(r_n[:, t - 1], r_b[:, t - 1]) + blank[t]
            scores = np.logaddexp(scores, phi[:, t - 1] + emit[:, t])
        eos = toks == EOS
        if np.any(eos):
            scores[eos] = total[-1]
        return scores, r_n, r_b

    def step(self, state: CtcState, token: int) -> tuple[float, CtcState]:
        """Extend by one token; returns the log-probability increment and the new state."""
        scores, r_n, r_b = self.candidate_scores(state, [token])
        new = CtcState(r_n[0], r_b[0], float(scores[0]), int(token), finished=token == EOS)
        if new.score == -np.inf:  # an unreachable prefix stays unreachable; avoids -inf - -inf
            return -np.inf, new
        return new.score - state.score, new

    def sequence_score(self, tokens: Sequence[int]) -> float:
        """Complete-sequence log-probability via telescoping steps."""
        state = self.init()
        total = 0.0
        for tok in list(tokens) + [EOS]:
            inc, state = self.step(state, tok)
            total += inc
        return total


def ctc_prefix_score_init(frame_log_probs: np.ndarray) -> tuple[CtcPrefixScorer, CtcState]:
    scorer = CtcPrefixScorer(frame_log_probs)
    return scorer, scorer.init()


def ctc_prefix_score_step(scorer: CtcPrefixScorer, state: CtcState, next_token: int) -> tuple[float, CtcState]:
    return scorer.step(state, next_token)


def joint_step_logprob(p_attn: np.ndarray, ctc_increments: np.ndarray | None, lam: float) -> np.ndarray:
    """``lam * ctc_increments + (1 - lam) * log p_attn``; a zero weight drops its term entirely."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda={lam} outside [0, 1]")
    out = 0.0
    if lam < 1.0:
        with np.errstate(divide="ignore"):
            out = (1.0 - lam) * np.log(np.asarray(p_attn, dtype=np.float64))
    if lam > 0.0:
        if ctc_increments is None:
            raise ContractError("lambda > 0 needs CTC increments")
        out = out + lam * np.asarray(ctc_increments, dtype=np.float64)
    return np.asarray(out)


def _combine(lam: float, ctc: np.ndarray | float, attn: np.ndarray | float):
    if lam == 0.0:
        return np.asarray(attn, dtype=np.float64)
    if lam == 1.0:
        return np.asarray(ctc, dtype=np.float64)
    return lam * np.asarray(ctc) + (1.0 - lam) * np.asarray(attn)


# -- hypotheses & search ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: list[int]  # starts with BOS
    attn_logp: float = 0.0
    ctc_logp: float = 0.0
    ctc_state: CtcState | None = None
    joint_score: float = 0.0
    finished: bool = False
    final_score: float = 0.0

    @property
    def output_tokens(self) -> list[int]:
        body = self.tokens[1:]
        return body[:-1] if body and body[-1] == EOS else body


def _valid_mask(V: int) -> np.ndarray:
    mask = np.ones(V, dtype=bool)
    mask[list(t for t in NEVER_EMIT if t < V)] = False
    return mask


def _final(hyp: Hypothesis, length_penalty: float) -> float:
    if not length_penalty:
        return hyp.joint_score
    return hyp.joint_score / (max(len(hyp.tokens) - 1, 1) ** length_penalty)


def _encode_for_search(model: Model, features, length=None):
    enc = model.encode(features, None if length is None else [length])
    lp = tc.log_softmax(model.ctc_logits(enc), axis=-1).data[0, : int(enc.lengths[0])]
    return enc, lp


def _expand(model: Model, enc: EncoderOutput, scorer: CtcPrefixScorer | None, hyps: list[Hypothesis],
            weights: MixingWeights, lam: float, eos_only: bool, no_eos: bool = False):
    """Joint scores ``(H, V)`` of every one-token extension of ``hyps``."""
    layers = required_layers(model, weights)
    V = model.config.V
    toks = np.array([h.tokens for h in hyps], dtype=np.int64)
    H = len(hyps)
    states = tc.Tensor(np.repeat(enc.states.data, H, axis=0), dtype=enc.states.dtype)
    batch_enc = EncoderOutput(states, np.repeat(enc.lengths, H))
    out = model.decode_forward(batch_enc, toks, layers=layers)
    attn = attention_logprobs(out, weights)  # (H, V)
    allowed = _valid_mask(V)
    if eos_only:
        allowed[:] = False
        allowed[EOS] = True
    elif no_eos:
        allowed[EOS] = False
    cand = np.flatnonzero(allowed)
    attn_new = np.array([h.attn_logp for h in hyps])[:, None] + attn[:, cand]
    if lam > 0.0:
        ctc_new = np.empty((H, len(cand)))
        r_ns, r_bs = [], []
        for i, h in enumerate(hyps):
            s, r_n, r_b = scorer.candidate_scores(h.ctc_state, cand)
            ctc_new[i] = s
            r_ns.append(r_n)
            r_bs.append(r_b)
    else:
        ctc_new = np.zeros((H, len(cand)))
        r_ns = r_bs = None
    joint = _combine(lam, ctc_new, attn_new)
    return cand, joint, attn_new, ctc_new, r_ns, r_bs


def _extend(h: Hypothesis, tok: int, k: int, i: int, attn_new, ctc_new, joint, r_ns, r_bs, lam) -> Hypothesis:
    state = None
    if lam > 0.0:
        state = CtcState(r_ns[i][k], r_bs[i][k], float(ctc_new[i, k]), tok, finished=tok == EOS)
    return Hypothesis(
        tokens=h.tokens + [tok],
        attn_logp=float(attn_new[i, k]),
        ctc_logp=float(ctc_new[i, k]) if lam > 0.0 else 0.0,
        ctc_state=state,
        joint_score=float(joint[i, k]),
        finished=tok == EOS,
    )


def default_max_len(model: Model, n_frames: int) -> int:
    return int(subsampled_length(n_frames)) + 1


def beam_search(model: Model, features, weights: MixingWeights | None = None, lam: float = 0.3,
                width: int = 10, max_len: int | None = None, length_penalty: float = 0.0,
                length: int | None = None, min_len: int = 0) -> list[Hypothesis]:
    """N-best list (best first) for one ``(T, F)`` utterance.

    At step ``max_len`` only EOS may be emitted, so every returned hypothesis
    is finished; EOS is withheld for the first ``min_len`` steps (used to fix
    the emission count when timing). Ties are broken by lower token id, then
    by earlier hypothesis.
    """
    weights = weights or MixingWeights.vanilla()
    if width < 1:
        raise ContractError(f"beam width must be >= 1, got {width}")
    n_valid = int(_valid_mask(model.config.V).sum())
    if width > n_valid:
        log.warning("beam width %d exceeds the %d emittable tokens; clamping", width, n_valid)
        width = n_valid
    feats = np.asarray(features)
    max_len = default_max_len(model, feats.shape[0] if length is None else length) if max_len is None else max_len
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    enc, lp = _encode_for_search(model, feats, length)
    scorer = CtcPrefixScorer(lp) if lam > 0.0 else None
    live = [Hypothesis([BOS], ctc_state=scorer.init() if scorer else None)]
    ended: list[Hypothesis] = []
    for n in range(1, max_len + 1):
        cand, joint, attn_new, ctc_new, r_ns, r_bs = _expand(model, enc, scorer, live, weights, lam, n == max_len,
                                                             n <= min_len)
        H, C = joint.shape
        flat = joint.reshape(-1)
        hyp_idx = np.repeat(np.arange(H), C)
        tok = np.tile(cand, H)
        order = np.lexsort((hyp_idx, tok, -flat))
        order = [j for j in order if np.isfinite(flat[j])][:width]
        nxt = []
        for j in order:
            i, k = divmod(int(j), C)
            h = _extend(live[i], int(cand[k]), k, i, attn_new, ctc_new, joint, r_ns, r_bs, lam)
            (ended if h.finished else nxt).append(h)
        live = nxt
        if not live:
            break
        if len(ended) >= width and not length_penalty:
            if max(h.joint_score for h in ended) >= max(h.joint_score for h in live):
                break
    for h in ended:
        h.final_score = _final(h, length_penalty)
    ended.sort(key=lambda h: (-h.final_score, h.tokens))
    return ended


def greedy_decode(model: Model, features, weights: MixingWeights | None = None, lam: float = 0.3,
                  max_len: int | None = None, length: int | None = None, min_len: int = 0) -> Hypothesis:
    """Arg-max decoding of one ``(T, F)`` utterance; identical to a width-1 beam."""
    weights = weights or MixingWeights.vanilla()
    feats = np.asarray(features)
    max_len = default_max_len(model, feats.shape[0] if length is None else length) if max_len is None else max_len
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    enc, lp = _encode_for_search(model, feats, length)
    scorer = CtcPrefixScorer(lp) if lam > 0.0 else None
    hyp = Hypothesis([BOS], ctc_state=scorer.init() if scorer else None)
    for n in range(1, max_len + 1):
        cand, joint, attn_new, ctc_new, r_ns, r_bs = _expand(model, enc, scorer, [hyp], weights, lam, n == max_len,
                                                             n <= min_len)
        k = int(np.argmax(joint[0]))
        if not np.isfinite(joint[0, k]):
            break
        hyp = _extend(hyp, int(cand[k]), k, 0, attn_new, ctc_new, joint, r_ns, r_bs, lam)
        if hyp.finished:
            break
    hyp.final_score = hyp.joint_score
    return hyp


def greedy_decode_batch(model: Model, features: Sequence[np.ndarray], weights: MixingWeights | None = None,
                        lam: float = 0.3, max_len: int | None = None) -> list[list[int]]:
    """Synchronous greedy decoding of many utterances in one padded batch.

    Faster than :func:`greedy_decode` per utterance; results agree up to
    floating-point ties.
    """
    weights = weights or MixingWeights.vanilla()
    layers = required_layers(model, weights)
    B = len(features)
    if B == 0:
        return []
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    T, F = int(lengths.max()), features[0].shape[1]
    batch = np.zeros((B, T, F), dtype=np.float32)
    for b, f in enumerate(features):
        batch[b, : f.shape[0]] = f
    enc = model.encode(batch, lengths)
    caps = np.array([default_max_len(model, int(n)) for n in lengths]) if max_len is None else np.full(B, max_len)
    scorers, states = [None] * B, [None] * B
    if lam > 0.0:
        lp = tc.log_softmax(model.ctc_logits(enc), axis=-1).data
        for b in range(B):
            scorers[b] = CtcPrefixScorer(lp[b, : int(enc.lengths[b])])
            states[b] = scorers[b].init()
    allowed = _valid_mask(model.config.V)
    cand_all = np.flatnonzero(allowed)
    tokens = np.full((B, 1), BOS, dtype=np.int64)
    attn_tot = np.zeros(B)
    done = np.zeros(B, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(B)]
    for n in range(1, int(caps.max()) + 1):
        out = model.decode_forward(enc, tokens, layers=layers)
        attn = attention_logprobs(out, weights)
        step_tok = np.full(B, EOS, dtype=np.int64)
        for b in range(B):
            if done[b]:
                continue
            cand = np.array([EOS]) if n == caps[b] else cand_all
            attn_new = attn_tot[b] + attn[b, cand]
            if lam > 0.0:
                ctc_new, r_n, r_b = scorers[b].candidate_scores(states[b], cand)
            else:
                ctc_new = np.zeros(len(cand))
            joint = _combine(lam, ctc_new, attn_new)
            k = int(np.argmax(joint))
            tok = int(cand[k])
            step_tok[b] = tok
            attn_tot[b] = attn_new[k]
            if lam > 0.0:
                states[b] = CtcState(r_n[k], r_b[k], float(ctc_new[k]), tok, finished=tok == EOS)
            if tok == EOS or not np.isfinite(joint[k]):
                done[b] = True
            else:
                outputs[b].append(tok)
        if done.all():
            break
        tokens = np.concatenate([tokens, step_tok[:, None]], axis=1)
    return outputs


# -- file formats -------------------------------------------------------------------------------------


def write_hypotheses(path: str | Path, rows: Iterable[tuple[str, str]]) -> None:
    """One line per utterance: ``utterance_id<TAB>hypothesis``."""
    lines = [f"{utt}\t{text}" for utt, text in rows]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_hypotheses(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt, _, text = line.partition("\t")
        out[utt] = text
    return out


WEIGHTS_MAGIC = "DECRED-MIXING-WEIGHTS"


def save_weights(path: str | Path, weights: MixingWeights) -> None:
    """Text header (mode, layers, vector length) then little-endian float64 values."""
    if weights.mode == "vanilla":
        header = f"{WEIGHTS_MAGIC} 1\nmode vanilla\nlayers\nlength 0\nend\n"
        Path(path).write_bytes(header.encode("ascii"))
        return
    layers = weights.layers
    if weights.mode == "scalar":
        values = np.array([weights.scalars[d] for d in layers], dtype="<f8")
        length = 1
    else:
        values = np.concatenate([weights.vectors[d] for d in layers]).astype("<f8")
        length = len(weights.vectors[layers[0]])
    header = (f"{WEIGHTS_MAGIC} 1\nmode {weights.mode}\nlayers {' '.join(map(str, layers))}\n"
              f"length {length}\nend\n")
    Path(path).write_bytes(header.encode("ascii") + values.tobytes())


def load_weights(path: str | Path) -> MixingWeights:
    blob = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = blob.find(marker)
    if cut < 0 or not blob.startswith(WEIGHTS_MAGIC.encode()):
        raise ConfigurationError(f"{path}: not a mixing-weights file")
    head = blob[:cut].decode("ascii").splitlines()
    fields = dict(line.split(" ", 1) if " " in line else (line, "") for line in head[1:])
    mode = fields.get("mode", "")
    layers = [int(x) for x in fields.get("layers", "").split()]
    length = int(fields.get("length", "0"))
    values = np.frombuffer(blob[cut + len(marker):], dtype="<f8")
    if values.size != len(layers) * length:
        raise ConfigurationError(f"{path}: expected {len(layers) * length} values, found {values.size}")
    if mode == "vanilla":
        return MixingWeights.vanilla()
    if mode == "scalar":
        return MixingWeights("scalar", scalars={d: float(v) for d, v in zip(layers, values)})
    if mode == "vector":
        return MixingWeights("vector", vectors={d: values[i * length:(i + 1) * length].copy()
                                                for i, d in enumerate(layers)})
    raise ConfigurationError(f"{path}: unknown mode {mode!r}")
