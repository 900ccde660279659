"""Command line entry point: ``decred <command> ...``.

Commands: gen-data, train, decode, calibrate, eval, ilm-ppl, ablate, benchmark.
Exit status is 0 on success, 1 on a contract error (bad inputs to an
operation) and 2 on a configuration error (bad flags, config or files).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .calibration import collect_logits, evaluate_calibration, fit_mixing_weights, split_dev
from .config import RunConfig, load_config
from .data import (IN_DOMAIN, OUT_OF_DOMAIN, CharTokenizer, FeatureStore, Manifest, generate_corpus, get_domain,
                   read_manifest, save_corpus)
from .decoding import MixingWeights, load_weights, read_hypotheses, save_weights, write_hypotheses
from .errors import ConfigurationError, ContractError, DivergenceError, NumericError
from .evaluation import bootstrap_compare, format_report
from .experiments import ablation_grid
from .ilm import format_ilm_report, ilm_perplexity
from .model import load_checkpoint
from .pipeline import DecodeSettings, decode_manifest, per_utterance_errors, score
from .train import train

log = logging.getLogger("decred")


# -- helpers ---------------------------------------------------------------------------------


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{what} {p} does not exist")
    return p


def _manifest(path: str | Path) -> tuple[Manifest, FeatureStore]:
    m = read_manifest(_existing(path, "manifest"))
    return m, FeatureStore(m)


def _checkpoint(path: str | Path):
    return load_checkpoint(_existing(path, "checkpoint"))


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _weights(mode: str, weights_file: str | None) -> MixingWeights:
    if mode == "vanilla":
        if weights_file:
            w = load_weights(_existing(weights_file, "weights file"))
            return w
        return MixingWeights.vanilla()
    if not weights_file:
        raise ConfigurationError(f"mode {mode!r} needs --weights")
    w = load_weights(_existing(weights_file, "weights file"))
    if w.mode != mode:
        raise ConfigurationError(f"weights file {weights_file} holds {w.mode!r} weights, --mode is {mode!r}")
    return w


def _figure_path(report: Path | None, figure: str | None, default_name: str) -> Path | None:
    if figure == "none":
        return None
    if figure:
        return Path(figure)
    if report is not None:
        return report.with_suffix(".png")
    return Path(default_name)


def _emit(text: str, report: str | None) -> Path | None:
    sys.stdout.write(text)
    if report:
        p = Path(report)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        return p
    return None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from None


# -- commands ------------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    ind = [get_domain(n) for n in args.train_domains.split(",")]
    ood = [get_domain(n) for n in args.test_domains.split(",")]
    m, s = generate_corpus(ind, [args.train_per_domain] * len(ind), args.seed, prefix="train-")
    paths = [save_corpus(m, s, out, "train")]
    m, s = generate_corpus(ind, [args.dev_per_domain] * len(ind), args.seed + 1, prefix="dev-")
    paths.append(save_corpus(m, s, out, "dev"))
    for d in ind + ood:
        m, s = generate_corpus([d], [args.test_per_domain], args.seed + 2, prefix="test-")
        paths.append(save_corpus(m, s, out, f"test_{d.name}"))
    for p in paths:
        print(p)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    if not cfg.data.train_manifest:
        raise ConfigurationError("data.train_manifest is not set")
    train_m, train_s = _manifest(cfg.resolve(cfg.data.train_manifest))
    dev_m = dev_s = None
    if cfg.data.dev_manifest:
        dev_m, dev_s = _manifest(cfg.resolve(cfg.data.dev_manifest))
    out = Path(args.out)
    result = train(cfg, train_m, train_s, dev_m, dev_s, out_dir=out, resume=args.resume, log_every=args.log_every)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    lines = ["step\ttotal\tctc\t" + "\t".join(f"attn.{d}" for d in sorted(cfg.objective.betas)) + "\tlr"]
    for h in result.history:
        attn = "\t".join(f"{h.attn.get(d, float('nan')):.6f}" for d in sorted(cfg.objective.betas))
        lines.append(f"{h.step}\t{h.total:.6f}\t{h.ctc:.6f}\t{attn}\t{h.lr:.6g}")
    (out / "train_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not result.dev_wers:
        shutil.copyfile(out / "last.ckpt", out / "best.ckpt")
    if args.figure != "none" and result.history:
        from .plotting import loss_curves

        series = {"total": [h.total for h in result.history], "ctc": [h.ctc for h in result.history]}
        for d in sorted(cfg.objective.betas):
            if cfg.objective.betas[d] > 0:
                series[f"attn.{d}"] = [h.attn.get(d, np.nan) for h in result.history]
        loss_curves([h.step for h in result.history], series, args.figure or out / "losses.png")
    print(f"best_step={result.best_step}")
    if result.dev_wers:
        print(f"best_dev_wer={100 * result.best_dev_wer:.4f}")
    print(f"checkpoint={out / 'best.ckpt'}")
    return 0


def _settings_from_args(args, model) -> DecodeSettings:
    weights = _weights(args.mode, args.weights)
    weights.check(model.config.classifier_layers, model.config.V)
    return DecodeSettings(lam=args.lam, width=args.width, search=args.search, weights=weights,
                          length_penalty=args.length_penalty, max_len=args.max_len or None)


def cmd_decode(args) -> int:
    model, tok, _ = _checkpoint(args.checkpoint)
    manifest, store = _manifest(args.manifest)
    settings = _settings_from_args(args, model)
    run = decode_manifest(model, manifest, store, tok, settings)
    write_hypotheses(args.out, [(u, h) for u, h in run.hypotheses.items()])
    print(f"# lambda={settings.lam} width={settings.width if settings.search == 'beam' else 1} "
          f"search={settings.search} mode={settings.weights.mode}")
    if args.timing:
        for u, s in run.seconds.items():
            print(f"time\t{u}\t{s:.6f}")
    n = max(len(run.seconds), 1)
    print(f"utterances={len(run.seconds)} total_seconds={run.total_seconds:.4f} "
          f"mean_seconds={sum(run.seconds.values()) / n:.6f}")
    print(f"hypotheses={args.out}")
    return 0


def cmd_calibrate(args) -> int:
    model, tok, _ = _checkpoint(args.checkpoint)
    manifest, store = _manifest(args.manifest)
    fit_m, hold_m = split_dev(manifest, args.ratio, args.seed)
    before = model.state_dict()
    fit = collect_logits(model, fit_m, store, tok)
    hold = collect_logits(model, hold_m, store, tok)
    res = fit_mixing_weights(fit, args.mode, epochs=args.epochs, lr=args.lr, holdout_data=hold,
                             patience=args.patience)
    after = model.state_dict()
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise ContractError("model parameters changed during calibration")
    save_weights(args.out, res.weights)
    init = MixingWeights.vanilla()
    for name, data in (("fit", fit), ("holdout", hold)):
        a, b = evaluate_calibration(init, data), evaluate_calibration(res.weights, data)
        print(f"{name}: tokens={a.tokens} nll {a.nll:.6f} -> {b.nll:.6f} accuracy {a.accuracy:.4f} -> {b.accuracy:.4f}")
    if res.weights.mode == "scalar":
        print("scalars " + " ".join(f"{d}:{v:.4f}" for d, v in sorted(res.weights.scalars.items())))
    print(f"best_step={res.best_step} weights={args.out}")
    return 0


def cmd_eval(args) -> int:
    scores, p_values = [], {}
    for spec in args.dataset:
        if len(spec) not in (3, 4):
            raise ConfigurationError("--dataset takes NAME MANIFEST HYP [BASELINE_HYP]")
        name, mpath = spec[0], spec[1]
        manifest = read_manifest(_existing(mpath, "manifest"))
        hyps = read_hypotheses(_existing(spec[2], "hypothesis file"))
        s = score(name, manifest, hyps, normalize=not args.raw, B=args.bootstrap, seed=args.seed)
        scores.append(s)
        if len(spec) == 4:
            base = score(name, manifest, read_hypotheses(_existing(spec[3], "hypothesis file")),
                         normalize=not args.raw, B=args.bootstrap, seed=args.seed)
            p_values[name] = bootstrap_compare(per_utterance_errors(manifest, s), per_utterance_errors(manifest, base),
                                               B=args.bootstrap, seed=args.seed)
    header = {"normalization": "raw" if args.raw else "normalized", "bootstrap": f"B={args.bootstrap} alpha=0.05 seed={args.seed}"}
    report = _emit(format_report(scores, p_values, header), args.report)
    fig = _figure_path(report, args.figure, "eval.png")
    if fig is not None:
        from .plotting import wer_bars

        wer_bars(scores, fig)
    return 0


def cmd_ilm_ppl(args) -> int:
    rows: dict[str, dict[str, float]] = {}
    sets = []
    for spec in args.manifest:
        name, _, path = spec.partition("=")
        if not path:
            raise ConfigurationError(f"--manifest expects NAME=PATH, got {spec!r}")
        sets.append((name, read_manifest(_existing(path, "manifest"))))
    for spec in args.checkpoint:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).stem, spec
        model, tok, _ = _checkpoint(path)
        rows[name] = {ds: ilm_perplexity(model, m, tok, normalize=not args.raw).perplexity for ds, m in sets}
    text = format_ilm_report(rows)
    text += "\n[metrics]\n" + "".join(f"ilm_ppl.{m}.{d}={v:.4f}\n" for m, r in rows.items() for d, v in r.items())
    report = _emit(text, args.report)
    fig = _figure_path(report, args.figure, "ilm_ppl.png")
    if fig is not None:
        from .plotting import grouped_bars

        grouped_bars(rows, fig, "zero-attention ILM perplexity")
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config, _overrides(args.set))
    train_m, train_s = _manifest(base.resolve(base.data.train_manifest))
    dev_m = dev_s = None
    if base.data.dev_manifest:
        dev_m, dev_s = _manifest(base.resolve(base.data.dev_manifest))
    tests = []
    for spec in args.test:
        name, _, path = spec.partition("=")
        if not path:
            raise ConfigurationError(f"--test expects NAME=PATH, got {spec!r}")
        tests.append((name,) + _manifest(path))
    if not tests:
        raise ConfigurationError("ablate needs at least one --test NAME=PATH manifest")
    positions, weights, seeds = _ints(args.positions), _floats(args.weights), _ints(args.seeds)
    settings = DecodeSettings(lam=base.decode.lam, search="greedy")
    tok = CharTokenizer()

    def run_cell(cfg: RunConfig) -> float:
        res = train(cfg, train_m, train_s, dev_m, dev_s, tokenizer=tok)
        wers = []
        for name, m, s in tests:
            hyp = decode_manifest(res.model, m, s, tok, settings, batch_size=50)
            wers.append(score(name, m, hyp.hypotheses, normalize=base.data.normalize, B=1).result.wer)
        return float(np.mean(wers))

    report = ablation_grid(base, positions, weights, seeds, run_cell,
                           metric=f"macro WER over {','.join(t[0] for t in tests)} (greedy, lambda={base.decode.lam})")
    path = _emit(report.format(), args.report)
    fig = _figure_path(path, args.figure, "ablation.png")
    if fig is not None:
        from .plotting import ablation_heatmap

        ablation_heatmap(report, fig)
    return 0


def _parse_decode_spec(spec: list[str]) -> tuple[str, dict[str, str]]:
    name, body = spec[0], spec[1] if len(spec) > 1 else ""
    kv = {}
    for part in body.split(","):
        if part.strip():
            if "=" not in part:
                raise ConfigurationError(f"decode spec {name!r}: expected key=value, got {part!r}")
            k, v = part.split("=", 1)
            kv[k.strip()] = v.strip()
    unknown = set(kv) - {"search", "lam", "width", "mode", "weights"}
    if unknown:
        raise ConfigurationError(f"decode spec {name!r}: unknown keys {sorted(unknown)}")
    return name, kv


def cmd_benchmark(args) -> int:
    model, tok, _ = _checkpoint(args.checkpoint)
    manifest, store = _manifest(args.manifest)
    if args.limit:
        manifest = Manifest(manifest.entries[: args.limit], manifest.root)
    specs = [_parse_decode_spec(s) for s in args.decode] if args.decode else [
        ("greedy", {"search": "greedy"}), ("beam10", {"search": "beam", "width": "10"})]
    rows = []
    for name, kv in specs:
        try:
            lam = float(kv.get("lam", args.lam))
            width = int(kv.get("width", 10))
        except ValueError:
            raise ConfigurationError(f"decode spec {name!r}: bad number") from None
        weights = _weights(kv.get("mode", "vanilla"), kv.get("weights"))
        weights.check(model.config.classifier_layers, model.config.V)
        fixed = DecodeSettings(lam=lam, width=width, search=kv.get("search", "greedy"), weights=weights,
                               max_len=args.tokens, min_len=args.tokens - 1)
        timed = decode_manifest(model, manifest, store, tok, fixed)
        free = DecodeSettings(lam=lam, width=width, search=fixed.search, weights=weights)
        hyps = decode_manifest(model, manifest, store, tok, free)
        w = score(name, manifest, hyps.hypotheses, B=1).result.wer
        rows.append((name, fixed.describe(), float(np.mean(list(timed.seconds.values()))), w))
    fastest = min(r[2] for r in rows)
    lines = [f"# fixed emissions per utterance: {args.tokens}; utterances: {len(manifest)}",
             f"{'config':<16}{'ms/utt':>10}{'slowdown':>10}{'WER%':>8}  settings"]
    for name, desc, sec, w in rows:
        lines.append(f"{name:<16}{1000 * sec:>10.2f}{sec / fastest:>10.2f}{100 * w:>8.2f}  {desc}")
    lines += ["", "[metrics]"]
    for name, _, sec, w in rows:
        lines.append(f"seconds.{name}={sec:.6f}")
        lines.append(f"slowdown.{name}={sec / fastest:.4f}")
        lines.append(f"wer.{name}={100 * w:.4f}")
    path = _emit("\n".join(lines) + "\n", args.report)
    fig = _figure_path(path, args.figure, "benchmark.png")
    if fig is not None:
        from .plotting import speed_tradeoff

        speed_tradeoff([r[0] for r in rows], [r[2] for r in rows], [r[3] for r in rows], fig)
    return 0


# -- parser --------------------------------------------------------------------------------------


def _add_decode_flags(p):
    p.add_argument("--lam", type=float, default=0.3, help="CTC weight in the joint score")
    p.add_argument("--width", type=int, default=10, help="beam width (beam search only)")
    p.add_argument("--search", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--mode", choices=("vanilla", "scalar", "vector"), default="vanilla")
    p.add_argument("--weights", help="mixing-weights file (required for scalar/vector mode)")
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument("--max-len", type=int, default=0, help="0 derives the cap from the input length")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="decred", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-domain corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--train-domains", default=",".join(IN_DOMAIN))
    p.add_argument("--test-domains", default=",".join(OUT_OF_DOMAIN))
    p.add_argument("--train-per-domain", type=int, default=300)
    p.add_argument("--dev-per-domain", type=int, default=20)
    p.add_argument("--test-per-domain", type=int, default=100)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--resume", help="checkpoint to resume from (its .state.npz must sit next to it)")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--figure", help="loss-curve figure path ('none' to skip)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a manifest into a hypothesis file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="print per-utterance timing")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("calibrate", help="fit mixing weights on held-out data, model frozen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("scalar", "vector"), default="vector")
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--patience", type=int, default=3)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="score hypothesis files")
    p.add_argument("--dataset", nargs="+", action="append", required=True,
                   metavar="ARG", help="NAME MANIFEST HYP [BASELINE_HYP]")
    p.add_argument("--raw", action="store_true", help="score without text normalisation")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ilm-ppl", help="zero-attention ILM perplexity")
    p.add_argument("--checkpoint", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--manifest", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--raw", action="store_true")
    p.add_argument("--report")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_ilm_ppl)

    p = sub.add_parser("ablate", help="grid over auxiliary position and weight")
    p.add_argument("--config", required=True)
    p.add_argument("--positions", required=True, help="e.g. 1,2,3")
    p.add_argument("--weights", required=True, help="e.g. 0.2,0.4,0.6")
    p.add_argument("--seeds", default="0")
    p.add_argument("--test", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--report")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("benchmark", help="decoding time versus WER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--decode", nargs="+", action="append", metavar="ARG",
                   help="NAME [search=..,lam=..,width=..,mode=..,weights=..]")
    p.add_argument("--tokens", type=int, default=20, help="fixed emissions per utterance for timing")
    p.add_argument("--lam", type=float, default=0.3)
    p.add_argument("--limit", type=int, default=0, help="use only the first N utterances")
    p.add_argument("--report")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_benchmark)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:  # argparse usage errors are configuration errors
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (ContractError, NumericError, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
