import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from decred import tensor as tc
from decred.data import BOS, EOS
from decred.decoding import (CtcPrefixScorer, MixingWeights, attention_logprobs, beam_search, ctc_prefix_score_init,
                             ctc_prefix_score_step, greedy_decode, greedy_decode_batch, joint_step_logprob,
                             load_weights, mix_logits, p_decred, read_hypotheses, save_weights, write_hypotheses)
from decred.errors import ConfigurationError, ContractError
from decred.model import build_model
from decred.objective import ctc_loss
from decred.tensor import Tensor

from conftest import tiny_config
from oracles import ctc_brute_force_logprob


def log_probs(T, V, seed):
    x = np.random.default_rng(seed).normal(size=(T, V))
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def feats(T=24, seed=0):
    return np.random.default_rng(seed).normal(size=(T, 16)).astype(np.float32)


# -- mixing ---------------------------------------------------------------------------------------


def random_logits(seed, layers=(2, 4, 6, 8), V=12):
    rng = np.random.default_rng(seed)
    return {d: rng.normal(scale=3, size=V) for d in layers}


@pytest.mark.parametrize("seed", range(100))
def test_reduction_chain(seed):
    logits = random_logits(seed)
    layers = tuple(logits)
    vanilla = p_decred(logits, MixingWeights.vanilla())
    scalar = p_decred(logits, MixingWeights.scalar_init(layers))
    vector = p_decred(logits, MixingWeights.vector_init(layers, 12))
    assert np.max(np.abs(vanilla - scalar)) <= 1e-12
    assert np.max(np.abs(vanilla - vector)) <= 1e-12
    assert abs(vanilla.sum() - 1) < 1e-6


def test_scalar_weighted_sum_matches_hand_computation():
    logits = random_logits(0, layers=(6, 8))
    got = p_decred(logits, MixingWeights("scalar", scalars={6: 0.4, 8: 0.6}))
    z = 0.4 * logits[6] + 0.6 * logits[8]
    expected = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    np.testing.assert_allclose(got, expected, atol=1e-7)


def test_vector_is_elementwise():
    logits = random_logits(1, layers=(6, 8))
    v = {6: np.linspace(0, 1, 12), 8: np.linspace(1, 0, 12)}
    np.testing.assert_allclose(mix_logits(logits, MixingWeights("vector", vectors=v)),
                               v[6] * logits[6] + v[8] * logits[8])


def test_mixing_weights_validation():
    with pytest.raises(ConfigurationError):
        MixingWeights("vanilla", scalars={2: 1.0})
    with pytest.raises(ConfigurationError):
        MixingWeights("scalar")
    with pytest.raises(ConfigurationError):
        MixingWeights("bogus")
    with pytest.raises(ConfigurationError):
        MixingWeights.scalar_init((2, 4)).check((4,))
    with pytest.raises(ConfigurationError):
        MixingWeights.vector_init((2, 4), 5).check((2, 4), V=6)
    with pytest.raises(ConfigurationError):
        p_decred({4: np.zeros(3)}, MixingWeights("scalar", scalars={2: 0.5, 4: 0.5}))


def test_decode_time_scalars_need_not_sum_to_one():
    w = MixingWeights("scalar", scalars={6: 0.50, 8: 0.47})
    assert abs(p_decred(random_logits(2, (6, 8)), w).sum() - 1) < 1e-9


def test_weights_file_round_trip(tmp_path):
    for w in (MixingWeights("scalar", scalars={2: 0.5, 4: 0.47}),
              MixingWeights("vector", vectors={2: np.arange(5.0) / 7, 4: np.ones(5)})):
        save_weights(tmp_path / "w.txt", w)
        back = load_weights(tmp_path / "w.txt")
        assert back.mode == w.mode and back.scalars == w.scalars
        for d in w.vectors:
            assert np.array_equal(back.vectors[d], w.vectors[d])


# -- CTC prefix scoring ---------------------------------------------------------------------------


def test_empty_prefix_scores_zero():
    _, state = ctc_prefix_score_init(log_probs(4, 3, 0))
    assert state.score == 0.0


def all_sequences(labels, max_len):
    for n in range(max_len + 1):
        yield from itertools.product(labels, repeat=n)


def test_complete_sequence_scores_form_a_distribution():
    lp = log_probs(3, 4, 3)  # blank, two labels, id 3 plays EOS in the scorer
    scorer = CtcPrefixScorer(lp)
    total = 0.0
    for seq in all_sequences([1, 2], 3):
        s = scorer.sequence_score(list(seq))
        total += math.exp(s) if np.isfinite(s) else 0.0
        assert abs(s - ctc_brute_force_logprob(lp[:, :3], list(seq))) < 1e-6 or not np.isfinite(s)
    # T'=3 over a 3-symbol CTC alphabet: all mass is on sequences of length <= 3
    assert abs(total - np.exp(np.logaddexp.reduce(lp[:, :3], axis=1)).prod()) < 1e-6


@given(st.lists(st.integers(1, 2), max_size=3), st.integers(0, 1000))
def test_telescoping_equals_complete_score(seq, seed):
    lp = log_probs(6, 4, seed)
    scorer, state = ctc_prefix_score_init(lp)
    total = 0.0
    for tok in list(seq) + [EOS]:
        inc, state = ctc_prefix_score_step(scorer, state, tok)
        total += inc
    expected = ctc_brute_force_logprob(lp[:, :3], seq)
    assert abs(total - expected) < 1e-6
    with tc.default_dtype(np.float64):
        assert abs(total + ctc_loss(Tensor(lp), seq).item()) < 1e-6


def test_unreachable_prefix_scores_minus_infinity():
    lp = log_probs(1, 4, 0)  # one frame cannot emit two labels
    scorer = CtcPrefixScorer(lp)
    assert scorer.sequence_score([2, 1]) == -np.inf
    state = scorer.init()
    for tok in (2, 1, EOS):
        inc, state = scorer.step(state, tok)
        assert inc == -np.inf or tok == 2


def test_stepping_a_finished_prefix_is_an_error():
    scorer, state = ctc_prefix_score_init(log_probs(4, 4, 0))
    _, state = scorer.step(state, EOS)
    with pytest.raises(ContractError):
        scorer.step(state, 1)


def test_joint_step_logprob():
    p = np.array([0.2, 0.3, 0.5])
    inc = np.array([-1.0, -2.0, -0.5])
    np.testing.assert_allclose(joint_step_logprob(p, inc, 0.0), np.log(p))
    np.testing.assert_allclose(joint_step_logprob(p, inc, 1.0), inc)
    np.testing.assert_allclose(joint_step_logprob(p, inc, 0.3), 0.3 * inc + 0.7 * np.log(p))
    with pytest.raises(ContractError):
        joint_step_logprob(p, inc, 1.3)


# -- search ---------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return build_model(tiny_config(V=12), seed=2)


@pytest.mark.parametrize("seed", range(50))
def test_width_one_beam_equals_greedy(model, seed):
    x = feats(12 + seed % 20, seed)
    for w in (MixingWeights.vanilla(), MixingWeights("scalar", scalars={1: 0.5, 2: 0.6})):
        g = greedy_decode(model, x, w, lam=0.3)
        b = beam_search(model, x, w, lam=0.3, width=1)[0]
        assert g.tokens == b.tokens and g.joint_score == b.joint_score


@pytest.mark.parametrize("lam", [0.0, 0.3, 1.0])
def test_joint_score_bookkeeping(model, lam):
    for seed in range(5):
        x = feats(20, seed)
        enc = model.encode(x)
        lp = tc.log_softmax(model.ctc_logits(enc), axis=-1).data[0]
        for h in beam_search(model, x, lam=lam, width=4) + [greedy_decode(model, x, lam=lam)]:
            assert h.tokens[-1] == EOS and h.finished
            out = model.decode_forward(enc, [h.tokens[:-1]])
            lps = attention_logprobs(out, MixingWeights.vanilla(), position=slice(None))[0]
            attn = float(sum(lps[i, t] for i, t in enumerate(h.tokens[1:])))
            ctc = CtcPrefixScorer(lp).sequence_score(h.output_tokens)
            expected = attn if lam == 0 else ctc if lam == 1 else lam * ctc + (1 - lam) * attn  # 0 * -inf drops out
            assert abs(h.joint_score - expected) < 1e-6
            assert abs(h.attn_logp - attn) < 1e-6


def exhaustive_best(model, x, lam, max_len):
    enc = model.encode(x)
    lp = tc.log_softmax(model.ctc_logits(enc), axis=-1).data[0]
    scorer = CtcPrefixScorer(lp)
    labels = [5] + list(range(6, model.config.V))
    best = -np.inf
    for seq in all_sequences(labels, max_len - 1):
        toks = [BOS] + list(seq)
        lps = attention_logprobs(model.decode_forward(enc, [toks]), MixingWeights.vanilla(), position=slice(None))[0]
        attn = float(sum(lps[i, t] for i, t in enumerate(list(seq) + [EOS])))
        best = max(best, lam * scorer.sequence_score(list(seq)) + (1 - lam) * attn)
    return best


@pytest.mark.parametrize("seed", range(10))
def test_beam_best_is_monotone_in_width_and_bounded(seed):
    m = build_model(tiny_config(V=8), seed=seed)
    x = feats(16, seed)
    best = [beam_search(m, x, lam=0.3, width=w, max_len=3)[0].joint_score for w in (1, 2, 3, 4)]
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(best, best[1:]))
    assert best[-1] <= exhaustive_best(m, x, 0.3, 3) + 1e-9


def test_beam_clamps_width(model, caplog):
    hyps = beam_search(model, feats(), width=500)
    assert "clamping" in caplog.text and hyps


def test_beam_is_deterministic(model):
    a = beam_search(model, feats(), width=5)
    b = beam_search(model, feats(), width=5)
    assert [(h.tokens, h.final_score) for h in a] == [(h.tokens, h.final_score) for h in b]
    assert [h.final_score for h in a] == sorted((h.final_score for h in a), reverse=True)


def test_vanilla_attention_greedy_ignores_ctc_head(model):
    x = feats(30, 4)
    before = greedy_decode(model, x, lam=0.0).tokens
    state = model.state_dict()
    model.params["ctc.weight"].data = np.random.default_rng(0).normal(size=model.params["ctc.weight"].shape) \
        .astype(np.float32)
    try:
        assert greedy_decode(model, x, lam=0.0).tokens == before
    finally:
        model.load_state_dict(state)


def test_early_exit_decoding_is_well_formed(model):
    w = MixingWeights("scalar", scalars={1: 1.0, 2: 0.0})
    hyp = greedy_decode(model, feats(), w)
    assert hyp.tokens[0] == BOS and all(6 <= t < 12 or t in (5, EOS) for t in hyp.tokens[1:])


def test_batched_greedy_matches_single(model):
    xs = [feats(10 + 3 * i, i) for i in range(6)]
    for lam in (0.0, 0.3):
        batched = greedy_decode_batch(model, xs, lam=lam)
        single = [greedy_decode(model, x, lam=lam).output_tokens for x in xs]
        assert batched == single


def test_min_len_withholds_eos(model):
    hyp = greedy_decode(model, feats(), lam=0.3, max_len=8, min_len=5)
    assert len(hyp.output_tokens) >= 5


def test_hypothesis_file_round_trip(tmp_path):
    rows = [("u2", "hello there"), ("u1", ""), ("u3", "x y")]
    write_hypotheses(tmp_path / "h.txt", rows)
    assert read_hypotheses(tmp_path / "h.txt") == dict(rows)
