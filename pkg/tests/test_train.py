import math
from dataclasses import replace

import numpy as np
import pytest

from decred.config import load_config, micro_config, parse_config_text
from decred.data import DOMAINS, CharTokenizer, generate_corpus
from decred.decoding import greedy_decode
from decred.errors import ConfigurationError, NumericError
from decred.model import load_checkpoint
from decred.teacher import collate, make_examples
from decred.tensor import Tensor
from decred.train import AdamW, clip_gradients, compute_loss, learning_rate, probe_loss, train


def test_learning_rate_schedule():
    assert learning_rate(0, 1.0, 10, 110) == 0.0
    assert learning_rate(5, 1.0, 10, 110) == 0.5
    assert learning_rate(10, 1.0, 10, 110) == 1.0
    assert learning_rate(60, 1.0, 10, 110) == pytest.approx(0.5)
    assert learning_rate(110, 1.0, 10, 110) == 0.0
    assert learning_rate(200, 1.0, 10, 110) == 0.0


def test_adamw_first_step_and_decay():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.5])
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)  # bias-corrected first step moves by lr * sign
    q = Tensor(np.array([2.0]), requires_grad=True)
    q.grad = None
    opt = AdamW({"q": q}, lr=0.1, weight_decay=0.5)
    opt.step(0.1)
    assert q.data[0] == 2.0 and opt.t["q"] == 0  # no gradient, no update


def test_adamw_state_round_trip():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1)
    p.grad = np.array([1.0, 2.0, 3.0])
    opt.step(0.1)
    other = AdamW({"p": p}, lr=0.1)
    other.load(opt.state())
    assert other.t == opt.t and np.array_equal(other.m["p"], opt.m["p"]) and np.array_equal(other.v["p"], opt.v["p"])


def test_gradient_clipping():
    a, b = Tensor(np.zeros(2), requires_grad=True), Tensor(np.zeros(1), requires_grad=True)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_gradients([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum())) == pytest.approx(1.0)
    assert clip_gradients([a, b], 10.0) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus([DOMAINS["read"]], [24], seed=0)


def quick(**kw):
    base = dict(train__epochs=2, train__batch_size=8, train__warmup_steps=4)
    base.update(kw)
    return micro_config(**base)


def test_training_is_deterministic(small_corpus):
    m, s = small_corpus
    a = train(quick(), m, s)
    b = train(quick(), m, s)
    assert [h.total for h in a.history] == [h.total for h in b.history]
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_history_records_each_component(small_corpus):
    m, s = small_corpus
    res = train(quick(), m, s)
    h = res.history[-1]
    assert set(h.attn) == {2, 4} and h.ctc > 0
    assert h.total == pytest.approx(0.3 * h.ctc + 0.7 * (0.4 * h.attn[2] + 0.6 * h.attn[4]), rel=1e-4)


def test_final_only_betas_equal_plain_ed(small_corpus):
    m, s = small_corpus
    ed = quick()
    ed.model = replace(ed.model, classifier_layers=(4,))
    ed.objective.betas = {4: 1.0}
    inert = quick()
    inert.objective.betas = {2: 0.0, 4: 1.0}
    a, b = train(ed, m, s), train(inert, m, s)
    for x, y in zip(a.history, b.history):
        assert abs(x.attn[4] - y.attn[4]) <= 1e-6 and abs(x.total - y.total) <= 1e-6


def test_resume_reproduces_saved_probe_loss(small_corpus, tmp_path):
    m, s = small_corpus
    cfg = quick()
    train(cfg, m, s, out_dir=tmp_path)
    model, tok, meta = load_checkpoint(tmp_path / "last.ckpt")
    batch = collate(make_examples(m, s, tok)[: cfg.train.batch_size])
    assert abs(probe_loss(model, batch, cfg.objective) - float(meta["probe_loss"])) <= 1e-5


def test_interrupted_run_resumes_on_the_same_trajectory(small_corpus, tmp_path, monkeypatch):
    import decred.train as tr

    m, s = small_corpus
    cfg = quick(train__epochs=3)
    straight = train(cfg, m, s)
    per_epoch = len(straight.history) // 3
    real = tr._augment

    def crash_in_epoch_three(ex, step, *a):
        if step > 2 * per_epoch:
            raise KeyboardInterrupt
        return real(ex, step, *a)

    monkeypatch.setattr(tr, "_augment", crash_in_epoch_three)
    with pytest.raises(KeyboardInterrupt):
        train(cfg, m, s, out_dir=tmp_path)
    monkeypatch.setattr(tr, "_augment", real)
    resumed = train(cfg, m, s, resume=tmp_path / "last.ckpt")
    assert [h.step for h in resumed.history] == [h.step for h in straight.history][2 * per_epoch:]
    np.testing.assert_allclose([h.total for h in resumed.history],
                               [h.total for h in straight.history][2 * per_epoch:], rtol=1e-5)


def test_nan_loss_aborts(small_corpus, tmp_path):
    m, s = small_corpus
    bad = {k: np.full_like(v, np.nan) for k, v in list(s.items())[:1]}
    s2 = dict(s)
    s2.update(bad)
    with pytest.raises(NumericError):
        train(quick(train__epochs=1, train__batch_size=64), m, s2, out_dir=tmp_path)


def test_memorises_a_single_utterance():
    m, s = generate_corpus([replace(DOMAINS["read"], noise_std=0.0)], [1], seed=9)
    cfg = micro_config(train__epochs=150, train__batch_size=1, train__warmup_steps=10, train__lr=3e-3)
    cfg.data.spec_augment = cfg.data.speed_perturb = False
    cfg.model = replace(cfg.model, dropout_p=0.0)
    res = train(cfg, m, s)
    utt = m.entries[0]
    hyp = greedy_decode(res.model, s[utt.utterance_id], lam=0.3)
    assert CharTokenizer().detokenize(hyp.output_tokens) == utt.raw_transcript


def test_dev_selection_restores_best(small_corpus):
    m, s = small_corpus
    dm, ds = generate_corpus([DOMAINS["read"]], [6], seed=1)
    res = train(quick(train__epochs=3), m, s, dm, ds)
    assert len(res.dev_wers) == 3
    assert res.best_dev_wer == min(w for _, w in res.dev_wers)
    assert res.best_step == [st for st, w in res.dev_wers if w == res.best_dev_wer][0]


def test_config_text_round_trip(tmp_path):
    cfg = micro_config(train__epochs=7)
    back = parse_config_text(cfg.to_text())
    assert back.to_text() == cfg.to_text()
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    over = load_config(tmp_path / "c.cfg", {"train.lr": "0.01", "objective.betas": "4:1"})
    assert over.train.lr == 0.01 and over.objective.betas == {4: 1.0}


@pytest.mark.parametrize("text", ["nonsense", "foo.bar=1", "train.nope=1", "train.epochs=many",
                                  "objective.betas=2:0.5,4:0.6", "model.D=4\nmodel.classifier_layers=5"])
def test_bad_configs(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.cfg")


def test_loss_is_finite_on_fresh_model(small_corpus):
    from decred.model import build_model

    m, s = small_corpus
    cfg = quick()
    model = build_model(cfg.model, seed=0)
    batch = collate(make_examples(m, s, CharTokenizer())[:4])
    assert np.isfinite(compute_loss(model, batch, cfg.objective).item())
