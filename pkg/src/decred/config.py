"""Flat ``section.key=value`` run configuration.

Example::

    model.E=2
    model.D=4
    model.classifier_layers=2,4
    objective.betas=2:0.4,4:0.6
    data.train_manifest=data/train.tsv
    train.epochs=40
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .errors import ConfigurationError
from .model import ModelConfig
from .objective import ObjectiveConfig

SECTIONS = ("model", "objective", "data", "train", "decode")


@dataclass
class DataConfig:
    train_manifest: str = ""
    dev_manifest: str = ""
    normalize: bool = True
    max_frames: int = 2000
    speed_perturb: bool = True
    spec_augment: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 40
    batch_size: int = 16
    lr: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-6
    clip_norm: float = 5.0
    spec_augment_after: int = 200
    eval_every: int = 1
    patience: int = 10
    dev_lambda: float = 0.3
    dev_max_utts: int = 0  # 0 = whole dev set


@dataclass
class DecodeConfig:
    lam: float = 0.3
    width: int = 10
    search: str = "greedy"
    mode: str = "vanilla"
    weights_file: str = ""
    length_penalty: float = 0.0
    max_len: int = 0  # 0 = derived from the input length


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=lambda: ObjectiveConfig(betas={4: 1.0}))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    base_dir: Path = Path(".")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        self.model.validate()
        self.objective.validate(self.model.classifier_layers)

    def to_text(self) -> str:
        lines = [self.model.to_text()]
        o = self.objective
        lines.append(f"objective.alpha={o.alpha}")
        lines.append("objective.betas=" + ",".join(f"{d}:{b}" for d, b in sorted(o.betas.items())))
        lines.append(f"objective.label_smoothing_eps={o.label_smoothing_eps}")
        lines.append(f"objective.mask_special_tokens={o.mask_special_tokens}")
        lines.append(f"objective.ctc_reduction={o.ctc_reduction}")
        for section in ("data", "train", "decode"):
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{section}.{f.name}={getattr(obj, f.name)}")
        return "\n".join(lines) + "\n"


def _coerce(value: str, example):
    if isinstance(example, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    if isinstance(example, int):
        return int(value)
    if isinstance(example, float):
        return float(value)
    return value.strip()


def parse_betas(text: str) -> dict[int, float]:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        d, _, b = part.partition(":")
        try:
            out[int(d)] = float(b)
        except ValueError:
            raise ConfigurationError(f"cannot parse beta entry {part!r}; expected layer:weight") from None
    return out


def parse_config_text(text: str, base_dir: Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    kv: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    kv.update(overrides or {})
    return config_from_mapping(kv, base_dir)


def config_from_mapping(kv: Mapping[str, str], base_dir: Path | None = None) -> RunConfig:
    model_kv, sections = {}, {s: {} for s in ("objective", "data", "train", "decode")}
    for key, value in kv.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(f"unknown config key {key!r}; keys need a section prefix from {SECTIONS}")
        if section == "model":
            model_kv[key] = value
        else:
            sections[section][name] = value
    model = ModelConfig.from_mapping(model_kv)
    obj_kv = sections["objective"]
    objective = ObjectiveConfig(betas={model.D: 1.0})
    for name, value in obj_kv.items():
        try:
            if name == "betas":
                objective.betas = parse_betas(value)
            elif name == "alpha":
                objective.alpha = float(value)
            elif name == "label_smoothing_eps":
                objective.label_smoothing_eps = float(value)
            elif name == "mask_special_tokens":
                objective.mask_special_tokens = _coerce(value, True)
            elif name == "ctc_reduction":
                objective.ctc_reduction = value.strip()
            else:
                raise ConfigurationError(f"unknown config key objective.{name}")
        except ValueError:
            raise ConfigurationError(f"objective.{name}: cannot parse {value!r}") from None
    built = {}
    for section, cls in (("data", DataConfig), ("train", TrainConfig), ("decode", DecodeConfig)):
        obj = cls()
        known = {f.name for f in fields(cls)}
        for name, value in sections[section].items():
            if name not in known:
                raise ConfigurationError(f"unknown config key {section}.{name}")
            try:
                setattr(obj, name, _coerce(value, getattr(obj, name)))
            except ValueError:
                raise ConfigurationError(f"{section}.{name}: cannot parse {value!r}") from None
        built[section] = obj
    cfg = RunConfig(model, objective, built["data"], built["train"], built["decode"], base_dir or Path("."))
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"), path.parent, overrides)


def micro_config(**overrides) -> RunConfig:
    """Desk-scale default: (E, D, d_model, V) = (2, 4, 32, 40), classifiers {2, 4}, beta {2: 0.4, 4: 0.6}."""
    cfg = RunConfig(
        model=ModelConfig(E=2, D=4, d_model=32, V=40, classifier_layers=(2, 4)),
        objective=ObjectiveConfig(betas={2: 0.4, 4: 0.6}),
    )
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if section == "model":
            cfg.model = replace(cfg.model, **{name: value})
        else:
            setattr(getattr(cfg, section), name, value)
    cfg.validate()
    return cfg
