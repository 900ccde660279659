import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from decred import tensor as tc
from decred.data import CharTokenizer
from decred.model import ModelConfig, build_model

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def f64():
    with tc.default_dtype(np.float64):
        yield


@pytest.fixture
def tok():
    return CharTokenizer()


def tiny_config(**kw):
    base = dict(E=1, D=2, d_model=8, V=40, n_heads=2, d_ff_dec=16, dropout_p=0.0, conv_subsample_channels=8,
                classifier_layers=(1, 2))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=0)


def write_config(path, train, dev=None, **extra):
    lines = ["model.E=1", "model.D=2", "model.d_model=16", "model.n_heads=2", "model.d_ff_dec=32",
             "model.conv_subsample_channels=16", "model.classifier_layers=1,2", "objective.betas=1:0.4,2:0.6",
             "train.epochs=2", "train.batch_size=8", "train.warmup_steps=5", f"data.train_manifest={train}"]
    if dev:
        lines.append(f"data.dev_manifest={dev}")
    lines += [f"{k}={v}" for k, v in extra.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    from decred.cli import main

    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(out), "--seed", "4", "--train-per-domain", "16",
                 "--dev-per-domain", "4", "--test-per-domain", "6"]) == 0
    return out


@pytest.fixture(scope="session")
def trained_dir(corpus_dir, tmp_path_factory):
    from decred.cli import main

    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "run.cfg", corpus_dir / "train.tsv", corpus_dir / "dev.tsv")
    assert main(["train", "--config", str(cfg), "--out", str(out / "model"), "--figure", "none"]) == 0
    return out


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
