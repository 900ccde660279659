"""Pinned synthetic benchmark: in-domain training, out-of-domain evaluation.

Two in-domain sets (read, talk) are used for training and dev selection; the
held-out domain (meeting) supplies the out-of-domain test utterances and the
held-out text for internal language model perplexity. Everything is fixed by
:class:`BenchmarkSpec`, so a run is reproducible from the spec alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import RunConfig, micro_config
from .data import DOMAINS, IN_DOMAIN, OUT_OF_DOMAIN, CharTokenizer, FeatureStore, Manifest, generate_corpus
from .evaluation import macro_wer
from .ilm import ilm_perplexity
from .model import Model
from .pipeline import DecodeSettings, decode_manifest, score
from .train import train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkSpec:
    train_per_domain: int = 300
    dev_per_domain: int = 20
    test_per_domain: int = 100
    train_seed: int = 1
    dev_seed: int = 2
    test_seed: int = 3
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 40
    lam: float = 0.0  # attention-only greedy search isolates the decoder


@dataclass
class Corpora:
    train: Manifest
    dev: Manifest
    tests: dict[str, Manifest]
    store: FeatureStore

    @property
    def ood_names(self) -> list[str]:
        return [n for n in self.tests if n in OUT_OF_DOMAIN]


def build_corpora(spec: BenchmarkSpec) -> Corpora:
    ind = [DOMAINS[n] for n in IN_DOMAIN]
    train_m, store = generate_corpus(ind, [spec.train_per_domain] * len(ind), spec.train_seed, prefix="train-")
    dev_m, dev_s = generate_corpus(ind, [spec.dev_per_domain] * len(ind), spec.dev_seed, prefix="dev-")
    store.update(dev_s)
    tests = {}
    for name in IN_DOMAIN + OUT_OF_DOMAIN:
        m, s = generate_corpus([DOMAINS[name]], [spec.test_per_domain], spec.test_seed, prefix="test-")
        store.update(s)
        tests[name] = m
    return Corpora(train_m, dev_m, tests, store)


def system_config(spec: BenchmarkSpec, seed: int, betas: Mapping[int, float]) -> RunConfig:
    """Micro config with the given training betas; classifiers exist exactly where betas do."""
    layers = tuple(sorted(betas))
    cfg = micro_config(train__epochs=spec.epochs, train__seed=seed, train__eval_every=5)
    cfg.model = replace(cfg.model, classifier_layers=layers)
    cfg.objective.betas = dict(betas)
    cfg.validate()
    return cfg


def ed_betas(D: int) -> dict[int, float]:
    return {D: 1.0}


def decred_betas(D: int, position: int | None = None, weight: float = 0.4) -> dict[int, float]:
    d = D - 2 if position is None else position
    return {d: round(weight, 10), D: round(1.0 - weight, 10)}


@dataclass
class SystemResult:
    system: str
    seed: int
    test_wer: dict[str, float]
    ilm_ppl: float
    dev_wer: float

    @property
    def ood_wer(self) -> float:
        return macro_wer([w for n, w in self.test_wer.items() if n in OUT_OF_DOMAIN])

    @property
    def macro(self) -> float:
        return macro_wer(self.test_wer)


def evaluate_system(name: str, seed: int, model: Model, corpora: Corpora, tokenizer: CharTokenizer,
                    lam: float, dev_wer: float) -> SystemResult:
    settings = DecodeSettings(lam=lam, search="greedy")
    wers = {}
    for test_name, manifest in corpora.tests.items():
        run = decode_manifest(model, manifest, corpora.store, tokenizer, settings, batch_size=50)
        wers[test_name] = score(test_name, manifest, run.hypotheses, B=1).result.wer
    ood_text = Manifest([e for n in corpora.ood_names for e in corpora.tests[n]])
    ppl = ilm_perplexity(model, ood_text, tokenizer).perplexity
    return SystemResult(name, seed, wers, ppl, dev_wer)


class RunCache:
    """Trained models keyed by the full config text, so shared grid cells train once."""

    def __init__(self, corpora: Corpora):
        self.corpora = corpora
        self.results: dict[str, SystemResult] = {}

    def run(self, name: str, cfg: RunConfig, lam: float) -> SystemResult:
        key = f"{cfg.to_text()}lam={lam}\n"
        if key not in self.results:
            tok = CharTokenizer()
            c = self.corpora
            trained = train(cfg, c.train, c.store, c.dev, c.store, tokenizer=tok)
            res = evaluate_system(name, cfg.train.seed, trained.model, c, tok, lam, trained.best_dev_wer)
            log.info("%s seed %d: test %s ilm ppl %.3f", name, cfg.train.seed,
                     {k: round(v, 4) for k, v in res.test_wer.items()}, res.ilm_ppl)
            self.results[key] = res
        return replace(self.results[key], system=name)


@dataclass
class DirectionalReport:
    rows: list[SystemResult]
    D: int

    def by(self, system: str) -> list[SystemResult]:
        return [r for r in self.rows if r.system == system]

    def mean(self, system: str, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.by(system)]))

    def violations(self) -> list[str]:
        out = []
        ed = {r.seed: r for r in self.by("ed")}
        for r in self.by("decred"):
            base = ed.get(r.seed)
            if base is None:
                continue
            if r.ood_wer > base.ood_wer:
                out.append(f"seed {r.seed}: decred ood WER {r.ood_wer:.4f} > ed {base.ood_wer:.4f}")
            if r.ilm_ppl > base.ilm_ppl:
                out.append(f"seed {r.seed}: decred ILM ppl {r.ilm_ppl:.3f} > ed {base.ilm_ppl:.3f}")
        return out

    @property
    def wer_holds(self) -> bool:
        return self.mean("decred", "ood_wer") <= self.mean("ed", "ood_wer")

    @property
    def ppl_holds(self) -> bool:
        return self.mean("decred", "ilm_ppl") <= self.mean("ed", "ilm_ppl")

    def format(self) -> str:
        names = list(self.rows[0].test_wer) if self.rows else []
        head = f"{'system':<8}{'seed':>5}" + "".join(f"{n:>10}" for n in names) + f"{'ILM ppl':>10}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r.system:<8}{r.seed:>5}" + "".join(f"{100 * r.test_wer[n]:>10.2f}" for n in names)
                         + f"{r.ilm_ppl:>10.3f}")
        lines.append("")
        lines.append("[metrics]")
        for system in ("ed", "decred"):
            lines.append(f"ood_wer.{system}={100 * self.mean(system, 'ood_wer'):.4f}")
            lines.append(f"ilm_ppl.{system}={self.mean(system, 'ilm_ppl'):.4f}")
        return "\n".join(lines) + "\n"


def directional_benchmark(spec: BenchmarkSpec = BenchmarkSpec(), cache: RunCache | None = None) -> DirectionalReport:
    """ED versus DeCRED (beta_{D-2} = 0.4) on every seed of ``spec``."""
    cache = cache or RunCache(build_corpora(spec))
    D = micro_config().model.D
    rows = []
    for seed in spec.seeds:
        rows.append(cache.run("ed", system_config(spec, seed, ed_betas(D)), spec.lam))
        rows.append(cache.run("decred", system_config(spec, seed, decred_betas(D)), spec.lam))
    return DirectionalReport(rows, D)


# -- ablation grid ------------------------------------------------------------------------------


@dataclass
class AblationCell:
    position: int
    weight: float
    wers: list[float] = field(default_factory=list)  # one per seed

    @property
    def mean(self) -> float:
        return float(np.mean(self.wers))

    @property
    def std(self) -> float:
        return float(np.std(self.wers, ddof=1)) if len(self.wers) > 1 else 0.0


@dataclass
class AblationReport:
    cells: list[AblationCell]
    seeds: tuple[int, ...]
    metric: str

    def cell(self, position: int, weight: float) -> AblationCell:
        for c in self.cells:
            if c.position == position and math.isclose(c.weight, weight):
                return c
        raise KeyError((position, weight))

    def best(self) -> AblationCell:
        return min(self.cells, key=lambda c: (c.mean, c.position, c.weight))

    def within_one_sigma(self, position: int, weight: float) -> bool:
        c, b = self.cell(position, weight), self.best()
        return c.mean - b.mean <= max(c.std, b.std)

    def format(self) -> str:
        positions = sorted({c.position for c in self.cells})
        weights = sorted({c.weight for c in self.cells})
        lines = [f"# metric: {self.metric}; seeds: {','.join(map(str, self.seeds))}",
                 "position" + "".join(f"{'beta=' + format(w, 'g'):>20}" for w in weights)]
        for p in positions:
            row = f"{p:<8}"
            for w in weights:
                c = self.cell(p, w)
                row += f"{f'{100 * c.mean:.2f} [s={100 * c.std:.2f}]':>20}"
            lines.append(row)
        lines.append("")
        lines.append("[metrics]")
        for c in self.cells:
            lines.append(f"wer.d{c.position}.b{c.weight:g}={100 * c.mean:.4f}")
            lines.append(f"std.d{c.position}.b{c.weight:g}={100 * c.std:.4f}")
        b = self.best()
        lines.append(f"best.position={b.position}")
        lines.append(f"best.weight={b.weight:g}")
        return "\n".join(lines) + "\n"


def ablation_grid(
    base: RunConfig,
    positions: Sequence[int],
    weights: Sequence[float],
    seeds: Sequence[int],
    trainer: Callable[[RunConfig], float],
    metric: str = "macro WER",
) -> AblationReport:
    """Train every (position, weight) cell on every seed; ``trainer`` returns the cell metric.

    A cell puts ``weight`` on classifier ``position`` and ``1 - weight`` on
    the final layer.
    """
    D = base.model.D
    cells = []
    for p in positions:
        for w in weights:
            cell = AblationCell(int(p), float(w))
            for seed in seeds:
                cfg = RunConfig(replace(base.model, classifier_layers=tuple(sorted({int(p), D}))),
                                replace(base.objective, betas=decred_betas(D, int(p), float(w))),
                                replace(base.data), replace(base.train, seed=int(seed)), replace(base.decode),
                                base.base_dir)
                cfg.validate()
                cell.wers.append(trainer(cfg))
            log.info("cell d=%d beta=%g: mean %.4f std %.4f", cell.position, cell.weight, cell.mean, cell.std)
            cells.append(cell)
    return AblationReport(cells, tuple(int(s) for s in seeds), metric)


def benchmark_ablation(spec: BenchmarkSpec, positions: Sequence[int], weights: Sequence[float],
                       seeds: Sequence[int], cache: RunCache | None = None) -> AblationReport:
    cache = cache or RunCache(build_corpora(spec))
    base = system_config(spec, seeds[0], decred_betas(micro_config().model.D))
    return ablation_grid(base, positions, weights, seeds,
                         lambda cfg: cache.run("cell", cfg, spec.lam).macro, metric="macro test WER")
