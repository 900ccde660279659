"""Transformer encoder-decoder with a CTC head and per-layer decoder classifiers.

The network is written functionally over a flat, name-ordered parameter
dictionary so that checkpoints, optimisers and gradient checks can walk the
parameters without any module hierarchy.

Layout
------
front end   two stride-2 1-D convolutions over time (kernel 3) + linear
encoder     ``E`` pre-norm transformer blocks, sinusoidal positions, final norm
ctc head    linear ``d_model -> V``; blank is id 0
decoder     ``D`` pre-norm blocks (causal self-attention, cross-attention, ff)
classifier  for each layer ``d`` in ``classifier_layers``: the shared final
            decoder norm followed by an untied linear ``W_d`` (+ bias)
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as tc
from .data import BOS, SPECIAL_SYMBOLS, CharTokenizer
from .errors import ConfigurationError, ContractError
from .tensor import Tensor

NEG_INF_LOGIT = -1e9


@dataclass(frozen=True)
class ModelConfig:
    E: int = 2
    D: int = 4
    d_model: int = 32
    V: int = 40
    n_heads: int = 4
    d_ff_enc: int | None = None  # defaults to 4 * d_model
    d_ff_dec: int = 128
    dropout_p: float = 0.1
    classifier_layers: tuple[int, ...] | None = None  # defaults to (D,)
    conv_subsample_channels: int = 32
    num_features: int = 16
    classifier_bias: bool = True

    def __post_init__(self):
        if self.d_ff_enc is None:
            object.__setattr__(self, "d_ff_enc", 4 * self.d_model)
        layers = (self.D,) if self.classifier_layers is None else self.classifier_layers
        object.__setattr__(self, "classifier_layers", tuple(sorted(set(int(d) for d in layers))))

    def problems(self) -> list[str]:
        out = []
        for name in ("E", "D", "d_model", "V", "n_heads", "d_ff_enc", "d_ff_dec",
                     "conv_subsample_channels", "num_features"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.d_model % max(self.n_heads, 1):
            out.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.D not in self.classifier_layers:
            out.append(f"classifier_layers {self.classifier_layers} must contain D={self.D}")
        if any(not 1 <= d <= self.D for d in self.classifier_layers):
            out.append(f"classifier_layers {self.classifier_layers} must lie in [1, {self.D}]")
        if self.V < len(SPECIAL_SYMBOLS):
            out.append(f"V={self.V} is smaller than the {len(SPECIAL_SYMBOLS)} special tokens")
        if not 0.0 <= self.dropout_p < 1.0:
            out.append("dropout_p must lie in [0, 1)")
        return out

    def validate(self, tokenizer: CharTokenizer | None = None) -> None:
        problems = self.problems()
        if tokenizer is not None and self.V < tokenizer.vocab_size:
            problems.append(f"V={self.V} is smaller than the tokenizer's {tokenizer.vocab_size} symbols")
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"model.{f.name}={v}")
        return "\n".join(lines)

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in kv.items():
            name = key[len("model."):] if key.startswith("model.") else key
            if name not in types:
                raise ConfigurationError(f"unknown model setting {key!r}")
            kwargs[name] = _parse_field(name, str(raw))
        return cls(**kwargs)


def _parse_field(name: str, raw: str):
    raw = raw.strip()
    try:
        if name == "classifier_layers":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if name == "classifier_bias":
            return raw.lower() in ("1", "true", "yes")
        if name == "dropout_p":
            return float(raw)
        if name == "d_ff_enc" and raw in ("", "None"):
            return None
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"model.{name}: cannot parse {raw!r}") from None


@dataclass
class DecoderForwardOutput:
    hidden_by_layer: dict[int, Tensor]  # d -> (B, N, d_model), after the shared output norm
    logits_by_classifier: dict[int, Tensor]  # d -> (B, N, V), raw


@dataclass
class EncoderOutput:
    states: Tensor  # (B, T', d_model)
    lengths: np.ndarray  # valid frames per utterance


def subsampled_length(n: int | np.ndarray) -> int | np.ndarray:
    """Frames left after the two stride-2 stages: ``ceil(ceil(n / 2) / 2)``."""
    return -(-(-(-n // 2)) // 2)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, C = cfg.d_model, cfg.conv_subsample_channels
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.conv1.weight": (3 * cfg.num_features, C),
        "frontend.conv1.bias": (C,),
        "frontend.conv2.weight": (3 * C, C),
        "frontend.conv2.bias": (C,),
        "frontend.proj.weight": (C, d),
        "frontend.proj.bias": (d,),
        "encoder.norm.gain": (d,),
        "encoder.norm.bias": (d,),
        "ctc.weight": (d, cfg.V),
        "ctc.bias": (cfg.V,),
        "decoder.embed": (cfg.V, d),
        "decoder.norm.gain": (d,),
        "decoder.norm.bias": (d,),
    }

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.{m}.weight"] = (d, d)
            shapes[f"{prefix}.{m}.bias"] = (d,)

    def ff(prefix, width):
        shapes[f"{prefix}.w1"] = (d, width)
        shapes[f"{prefix}.b1"] = (width,)
        shapes[f"{prefix}.w2"] = (width, d)
        shapes[f"{prefix}.b2"] = (d,)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    for i in range(1, cfg.E + 1):
        p = f"encoder.{i}"
        norm(f"{p}.norm1"), attn(f"{p}.attn"), norm(f"{p}.norm2"), ff(f"{p}.ff", cfg.d_ff_enc)
    for i in range(1, cfg.D + 1):
        p = f"decoder.{i}"
        norm(f"{p}.norm1"), attn(f"{p}.self_attn"), norm(f"{p}.norm2"), attn(f"{p}.cross_attn")
        norm(f"{p}.norm3"), ff(f"{p}.ff", cfg.d_ff_dec)
    for layer in cfg.classifier_layers:
        shapes[f"classifier.{layer}.weight"] = (d, cfg.V)
        if cfg.classifier_bias:
            shapes[f"classifier.{layer}.bias"] = (cfg.V,)
    return dict(sorted(shapes.items()))


def _init_value(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    # one stream per parameter name: adding a classifier head leaves every other tensor unchanged
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if leaf.startswith("b") and len(shape) == 1:
        return np.zeros(shape)
    if name == "decoder.embed":
        return rng.normal(0.0, 1.0, size=shape)
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


class Model:
    """Parameters plus the forward computations; holds no per-call state."""

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]):
        self.config = config
        self.params: dict[str, Tensor] = dict(sorted(params.items()))
        expected = _param_shapes(config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigurationError(f"parameter set mismatch; missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    # -- bookkeeping ---------------------------------------------------------------

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Model":
        """Copy with every parameter cast to ``dtype`` (used for 64-bit checks)."""
        return Model(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, dtype=dtype)
                                   for k, v in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = np.array(v, dtype=self.params[k].data.dtype)

    # -- building blocks ----------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return x @ self._p(f"{prefix}.weight") + self._p(f"{prefix}.bias")

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return tc.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _attention(self, xq: Tensor, xkv: Tensor, prefix: str, blocked: np.ndarray,
                   zero_context: bool = False) -> Tensor:
        """Multi-head attention; ``blocked`` broadcasts to (B, H, Nq, Nk), True = no attend."""
        B, Nq, d = xq.shape
        H = self.config.n_heads
        dh = d // H
        if zero_context:
            ctx = Tensor(np.zeros((B, Nq, d), dtype=xq.dtype))
            return self._linear(ctx, f"{prefix}.o")
        Nk = xkv.shape[1]
        q = tc.transpose(tc.reshape(self._linear(xq, f"{prefix}.q"), (B, Nq, H, dh)), (0, 2, 1, 3))
        k = tc.transpose(tc.reshape(self._linear(xkv, f"{prefix}.k"), (B, Nk, H, dh)), (0, 2, 3, 1))
        v = tc.transpose(tc.reshape(self._linear(xkv, f"{prefix}.v"), (B, Nk, H, dh)), (0, 2, 1, 3))
        scores = tc.masked_fill((q @ k) * (1.0 / math.sqrt(dh)), blocked, NEG_INF_LOGIT)
        ctx = tc.softmax(scores, axis=-1) @ v
        ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (B, Nq, d))
        return self._linear(ctx, f"{prefix}.o")

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        h = tc.relu(x @ self._p(f"{prefix}.w1") + self._p(f"{prefix}.b1"))
        return h @ self._p(f"{prefix}.w2") + self._p(f"{prefix}.b2")

    def _drop(self, x: Tensor, training: bool, rng) -> Tensor:
        return tc.dropout(x, self.config.dropout_p, training, rng)

    def _conv_stage(self, x: Tensor, valid_in: np.ndarray, prefix: str) -> tuple[Tensor, np.ndarray]:
        """Kernel-3 stride-2 convolution over time with zero padding of one frame."""
        B, T, C = x.shape
        t_out = -(-T // 2)
        zeros = Tensor(np.zeros((B, 1, C), dtype=x.dtype))
        tail = Tensor(np.zeros((B, 2 * t_out + 1 - T - 1, C), dtype=x.dtype)) if 2 * t_out + 1 - T - 1 > 0 else None
        parts = [zeros, x] + ([tail] if tail is not None else [])
        padded = tc.concat(parts, axis=1)
        taps = [padded[:, k:k + 2 * t_out - 1:2, :] for k in range(3)]
        out = tc.relu(self._linear(tc.concat(taps, axis=2), prefix))
        valid_out = -(-valid_in // 2)
        invalid = np.arange(t_out)[None, :] >= valid_out[:, None]
        return tc.masked_fill(out, invalid[:, :, None], 0.0), valid_out

    # -- public forward passes ---------------------------------------------------------

    def encode(self, features, lengths=None, training: bool = False,
               rng: np.random.Generator | None = None) -> EncoderOutput:
        """Encode a ``(B, T, F)`` batch (or one ``(T, F)`` utterance, batched as B=1)."""
        feats = np.asarray(features)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[1] == 0 or feats.shape[0] == 0:
            raise ContractError(f"encode: expected non-empty (B, T, F) features, got shape {np.shape(features)}")
        B, T, F = feats.shape
        if F != self.config.num_features:
            raise ContractError(f"encode: got {F} feature channels, model expects {self.config.num_features}")
        lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        if lengths.shape != (B,) or np.any(lengths > T) or np.any(lengths < 1):
            raise ContractError(f"encode: lengths {lengths.tolist()} invalid for T={T}")
        dtype = self.params["ctc.weight"].data.dtype
        feats = np.where(np.arange(T)[None, :, None] < lengths[:, None, None], feats, 0.0).astype(dtype)
        x = Tensor(feats, dtype=dtype)
        x, valid = self._conv_stage(x, lengths, "frontend.conv1")
        x, valid = self._conv_stage(x, valid, "frontend.conv2")
        x = self._linear(x, "frontend.proj")
        t_sub = x.shape[1]
        x = x + Tensor(sinusoidal_positions(t_sub, self.config.d_model), dtype=dtype)
        x = self._drop(x, training, rng)
        blocked = (np.arange(t_sub)[None, :] >= valid[:, None])[:, None, None, :]
        for i in range(1, self.config.E + 1):
            p = f"encoder.{i}"
            h = self._norm(x, f"{p}.norm1")
            x = x + self._drop(self._attention(h, h, f"{p}.attn", blocked), training, rng)
            h = self._norm(x, f"{p}.norm2")
            x = x + self._drop(self._ff(h, f"{p}.ff"), training, rng)
        return EncoderOutput(self._norm(x, "encoder.norm"), valid)

    def ctc_logits(self, encoder_states: Tensor | EncoderOutput) -> Tensor:
        states = encoder_states.states if isinstance(encoder_states, EncoderOutput) else encoder_states
        return self._linear(states, "ctc")

    def decode_forward(
        self,
        encoder: EncoderOutput | None,
        tokens,
        layers: Iterable[int] | None = None,
        zero_attention: bool = False,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> DecoderForwardOutput:
        """Run the decoder on ``(B, N)`` token prefixes that start with BOS.

        ``layers`` restricts which classifier logits are computed (default:
        every classifier). With ``zero_attention`` every cross-attention context
        vector is replaced by zeros and ``encoder`` may be ``None``.
        """
        cfg = self.config
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.ndim == 1:
            toks = toks[None]
        if toks.ndim != 2 or toks.shape[1] == 0:
            raise ContractError(f"decode_forward: expected (B, N) token prefixes, got shape {np.shape(tokens)}")
        if toks.min() < 0 or toks.max() >= cfg.V:
            raise ContractError(f"decode_forward: token ids outside [0, {cfg.V})")
        if np.any(toks[:, 0] != BOS):
            raise ContractError("decode_forward: every prefix must start with BOS")
        wanted = cfg.classifier_layers if layers is None else tuple(sorted(set(layers)))
        missing = [d for d in wanted if d not in cfg.classifier_layers]
        if missing:
            raise ConfigurationError(f"no classifier attached to decoder layer(s) {missing}")
        if encoder is None and not zero_attention:
            raise ContractError("decode_forward needs encoder states unless zero_attention is set")
        B, N = toks.shape
        dtype = self.params["ctc.weight"].data.dtype
        x = tc.embedding(self._p("decoder.embed"), toks)
        x = x + Tensor(sinusoidal_positions(N, cfg.d_model), dtype=dtype)
        x = self._drop(x, training, rng)
        causal = np.triu(np.ones((N, N), dtype=bool), k=1)[None, None]
        if encoder is not None:
            mem = encoder.states
            if mem.ndim == 2:
                mem = tc.reshape(mem, (1,) + mem.shape)
            if mem.shape[0] != B:
                raise ContractError(f"decode_forward: {mem.shape[0]} encoder states for {B} prefixes")
            cross_blocked = (np.arange(mem.shape[1])[None, :] >= encoder.lengths[:, None])[:, None, None, :]
        else:
            mem, cross_blocked = None, None
        hidden, logits = {}, {}
        last = max(wanted)
        for i in range(1, last + 1):
            p = f"decoder.{i}"
            h = self._norm(x, f"{p}.norm1")
            x = x + self._drop(self._attention(h, h, f"{p}.self_attn", causal), training, rng)
            h = self._norm(x, f"{p}.norm2")
            x = x + self._drop(self._attention(h, mem, f"{p}.cross_attn", cross_blocked,
                                               zero_context=zero_attention), training, rng)
            h = self._norm(x, f"{p}.norm3")
            x = x + self._drop(self._ff(h, f"{p}.ff"), training, rng)
            rep = self._norm(x, "decoder.norm")
            hidden[i] = rep
            if i in wanted:
                w = rep @ self._p(f"classifier.{i}.weight")
                if cfg.classifier_bias:
                    w = w + self._p(f"classifier.{i}.bias")
                logits[i] = w
        return DecoderForwardOutput(hidden, logits)


def build_model(config: ModelConfig, seed: int = 0, tokenizer: CharTokenizer | None = None) -> Model:
    """Initialise a model deterministically from ``seed``."""
    config.validate(tokenizer)
    dtype = tc.get_default_dtype()
    params = {
        name: Tensor(_init_value(name, shape, seed), requires_grad=True, dtype=dtype)
        for name, shape in _param_shapes(config).items()
    }
    return Model(config, params)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of the architecture above."""
    return int(sum(int(np.prod(s)) for s in _param_shapes(config).values()))


# -- checkpoints ----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DCRDCKPT"
CHECKPOINT_VERSION = 1


def _write_block(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_block(fh) -> bytes:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n)


def save_checkpoint(path: str | Path, model: Model, tokenizer: CharTokenizer,
                    meta: Mapping[str, object] | None = None) -> None:
    """Header (magic, version, config text, tokenizer table) then named float32 tensors."""
    header = model.config.to_text()
    if meta:
        header += "\n" + "\n".join(f"meta.{k}={v}" for k, v in sorted(meta.items()))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_block(buf, header.encode("utf-8"))
    _write_block(buf, tokenizer.table().encode("utf-8"))
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = np.asarray(model.params[name].data, dtype="<f4")
        enc = name.encode("utf-8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Model, CharTokenizer, dict[str, str]]:
    blob = Path(path).read_bytes()
    fh = io.BytesIO(blob)
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    kv = {}
    for line in _read_block(fh).decode("utf-8").splitlines():
        if line:
            k, v = line.split("=", 1)
            kv[k] = v
    tokenizer = CharTokenizer.from_table(_read_block(fh).decode("utf-8"))
    config = ModelConfig.from_mapping({k: v for k, v in kv.items() if k.startswith("model.")})
    (count,) = struct.unpack("<I", fh.read(4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True, dtype=np.float32)
    meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}
    return Model(config, params), tokenizer, meta
