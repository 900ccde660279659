import numpy as np
import pytest

from decred.calibration import (TeacherForcedLogits, collect_logits, evaluate_calibration, fit_mixing_weights,
                                split_dev)
from decred.data import DOMAINS, Manifest, ManifestEntry, generate_corpus
from decred.decoding import MixingWeights
from decred.errors import ContractError
from decred.model import build_model
from decred.pipeline import DecodeSettings, decode_manifest

from conftest import tiny_config


def manifest(n):
    return Manifest([ManifestEntry(f"u{i:02d}", "synthetic", "ab") for i in range(n)])


def test_split_sizes_and_partition():
    m = manifest(10)
    fit, hold = split_dev(m, 0.7, seed=0)
    assert (len(fit), len(hold)) == (7, 3)
    assert set(fit.ids()) | set(hold.ids()) == set(m.ids()) and not set(fit.ids()) & set(hold.ids())
    assert split_dev(m, 0.7, seed=0)[0].ids() == fit.ids()
    assert split_dev(m, 0.7, seed=1)[0].ids() != fit.ids()
    with pytest.raises(ContractError):
        split_dev(manifest(1))


def synthetic_logits(seed, n=400, V=8, layers=(2, 4)):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, V, n)
    logits = {}
    for i, d in enumerate(layers):
        noise = rng.normal(scale=1.5, size=(n, V))
        noise[np.arange(n), targets] += 1.0 + i  # each layer informative, the last more so
        logits[d] = noise
    return TeacherForcedLogits(logits, targets)


def test_vanilla_report_equals_direct_nll():
    data = synthetic_logits(0)
    rep = evaluate_calibration(MixingWeights.vanilla(), data)
    top = data.logits[4]
    lsm = top - np.logaddexp.reduce(top, axis=1, keepdims=True)
    assert rep.nll == pytest.approx(-lsm[np.arange(len(data)), data.targets].mean(), rel=1e-12)
    assert rep.accuracy == pytest.approx(np.mean(top.argmax(1) == data.targets))
    assert evaluate_calibration(MixingWeights.vanilla(), data) == rep


def test_zero_steps_returns_vanilla_point():
    data = synthetic_logits(1)
    for mode, init in (("scalar", MixingWeights.scalar_init((2, 4))),
                       ("vector", MixingWeights.vector_init((2, 4), 8))):
        res = fit_mixing_weights(data, mode, epochs=0)
        assert res.weights.scalars == init.scalars
        assert all(np.array_equal(res.weights.vectors[d], init.vectors[d]) for d in init.vectors)


@pytest.mark.parametrize("mode", ["scalar", "vector"])
@pytest.mark.parametrize("seed", range(5))
def test_fit_nll_never_increases(mode, seed):
    data, hold = synthetic_logits(seed), synthetic_logits(seed + 100)
    res = fit_mixing_weights(data, mode, epochs=30, holdout_data=hold)
    assert all(b <= a for a, b in zip(res.fit_nll, res.fit_nll[1:]))
    assert evaluate_calibration(res.weights, data).nll <= res.fit_nll[0]


def test_vector_mode_can_represent_scalar_optimum():
    data = synthetic_logits(3)
    scalar = fit_mixing_weights(data, "scalar", epochs=200).weights
    as_vector = MixingWeights("vector", vectors={d: np.full(8, b) for d, b in scalar.scalars.items()})
    assert evaluate_calibration(as_vector, data).nll == pytest.approx(evaluate_calibration(scalar, data).nll)
    vector = fit_mixing_weights(data, "vector", epochs=200).weights
    assert evaluate_calibration(vector, data).nll <= evaluate_calibration(scalar, data).nll + 1e-9


def test_scalar_fit_puts_weight_on_both_informative_layers():
    res = fit_mixing_weights(synthetic_logits(4, n=2000), "scalar", epochs=300)
    assert res.weights.scalars[2] > 0.1 and res.weights.scalars[4] > 0.5


def test_bad_mode():
    with pytest.raises(ContractError):
        fit_mixing_weights(synthetic_logits(0), "vanilla")


def test_model_frozen_and_init_decoding_equals_vanilla(tok):
    model = build_model(tiny_config(), seed=0)
    m, store = generate_corpus([DOMAINS["meeting"]], [8], seed=5)
    before = model.state_dict()
    data = collect_logits(model, m, store, tok)
    fit_mixing_weights(data, "vector", epochs=5)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in model.parameters())
    vanilla = decode_manifest(model, m, store, tok, DecodeSettings(lam=0.3)).hypotheses
    for w in (MixingWeights.scalar_init((1, 2)), MixingWeights.vector_init((1, 2), 40)):
        assert decode_manifest(model, m, store, tok, DecodeSettings(lam=0.3, weights=w)).hypotheses == vanilla
