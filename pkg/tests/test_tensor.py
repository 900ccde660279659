import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from decred import tensor as tc
from decred.errors import ContractError, DimensionError, NumericError
from decred.tensor import Tensor, grad_check

finite = st.floats(-3, 3, allow_nan=False, width=64)


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)


def test_softmax_of_zeros_is_uniform():
    out = tc.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)


def test_identity_matmul():
    a = Tensor(np.random.default_rng(1).normal(size=(2, 2)))
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_log_softmax_matches_log_of_softmax(x):
    with tc.default_dtype(np.float64):
        t = Tensor(x)
        np.testing.assert_allclose(tc.log_softmax(t).data, np.log(tc.softmax(t).data), atol=1e-6)


def test_sum_gradient_is_ones():
    x = rand(3, 4)
    tc.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient_is_two_x():
    x = rand(5)
    tc.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


def test_fan_out_gradients_add_up():
    x = rand(4)
    y = tc.exp(x)
    tc.backward((y * x + tc.tanh(x)).sum())
    expected = np.exp(x.data) * x.data + np.exp(x.data) + 1 - np.tanh(x.data) ** 2
    np.testing.assert_allclose(x.grad, expected, rtol=1e-5)


def test_leaf_gradients_accumulate_across_calls():
    x = rand(3)
    tc.backward(x.sum())
    tc.backward((x * 2.0).sum())
    np.testing.assert_allclose(x.grad, 3.0)


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        tc.backward(rand(2) * 1.0)


def test_every_reachable_tensor_gets_a_grad():
    x = rand(2, 3)
    h = tc.relu(x) + 1.0
    tc.backward(h.mean())
    assert x.grad is not None and x.grad.shape == x.shape
    assert h.grad is not None and h.grad.shape == h.shape


def test_shape_values_invariant():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert int(np.prod(t.shape)) == len(t.values)
    assert t.values == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_default_width_is_32_and_switchable():
    assert Tensor([1.0]).dtype == np.float32
    with tc.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.parametrize("a,b", [((2, 3), (3, 2)), ((2, 3), (2,)), ((4,), (2, 3))])
def test_only_leading_batch_broadcasting(a, b):
    with pytest.raises(DimensionError, match="add"):
        tc.add(Tensor(np.zeros(a)), Tensor(np.zeros(b)))


def test_leading_batch_broadcast_gradient():
    with tc.default_dtype(np.float64):
        x, b = rand(2, 3, 4), rand(4, seed=1)
        assert grad_check(lambda: (tc.tanh(x + b)).sum(), [x, b]).passed


def test_matmul_shape_error_names_op():
    with pytest.raises(DimensionError, match="matmul"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_dropout_is_inverted_and_off_at_eval():
    x = Tensor(np.ones((200, 50)))
    assert tc.dropout(x, 0.5, training=False) is x
    out = tc.dropout(x, 0.5, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


def test_dropout_needs_rng_when_training():
    with pytest.raises(ContractError):
        tc.dropout(Tensor(np.ones(3)), 0.1, training=True)


# -- finite-difference suite ------------------------------------------------------------------

# each entry: name -> (function of the listed inputs, input shapes)
OPS = {
    "add": (lambda a, b: (a + b) * (a + b), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: tc.tanh(a - b), [(3, 4), (4,)]),
    "neg": (lambda a: tc.tanh(-a), [(5,)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "scale": (lambda a: tc.tanh(a * 0.7), [(4,)]),
    "exp": (lambda a: tc.exp(a), [(6,)]),
    "log": (lambda a: tc.log(tc.exp(a) + 1.0), [(6,)]),
    "relu": (lambda a: tc.relu(a) * a, [(8,)]),
    "tanh": (lambda a: tc.tanh(a), [(6,)]),
    "matmul": (lambda a, b: tc.tanh(a @ b), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: tc.tanh(a @ b), [(2, 3, 4), (2, 4, 5)]),
    "matmul_shared": (lambda a, b: tc.tanh(a @ b), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a: tc.tanh(tc.transpose(a, (2, 0, 1))) * Tensor(np.arange(24.0).reshape(4, 2, 3)), [(2, 3, 4)]),
    "swapaxes": (lambda a: tc.swapaxes(a, 0, 1) * Tensor(np.arange(6.0).reshape(3, 2)), [(2, 3)]),
    "reshape": (lambda a: tc.reshape(a, (3, 4)) * Tensor(np.arange(12.0).reshape(3, 4)), [(2, 6)]),
    "softmax": (lambda a: tc.softmax(a) * Tensor(np.arange(15.0).reshape(3, 5)), [(3, 5)]),
    "softmax_axis0": (lambda a: tc.softmax(a, axis=0) * Tensor(np.arange(15.0).reshape(3, 5)), [(3, 5)]),
    "log_softmax": (lambda a: tc.log_softmax(a) * Tensor(np.arange(15.0).reshape(3, 5)), [(3, 5)]),
    "layer_norm": (lambda x, g, b: tc.layer_norm(x, g, b) * Tensor(np.arange(12.0).reshape(3, 4)), [(3, 4), (4,), (4,)]),
    "embedding": (lambda w: tc.embedding(w, [[0, 2, 2], [1, 0, 3]]) * Tensor(np.arange(18.0).reshape(2, 3, 3)), [(4, 3)]),
    "slice": (lambda a: tc.tanh(a[1:, ::2]), [(3, 5)]),
    "slice_advanced": (lambda a: tc.tanh(a[np.array([0, 2, 0])]), [(3, 4)]),
    "pick": (lambda a: tc.pick(tc.log_softmax(a), [1, 0, 3]), [(3, 4)]),
    "masked_select": (lambda a: tc.tanh(tc.masked_select(a, np.array([True, False, True]))), [(3, 2)]),
    "masked_fill": (lambda a: tc.softmax(tc.masked_fill(a, np.array([False, True, False, False]), -1e9)) * a, [(2, 4)]),
    "concat": (lambda a, b: tc.tanh(tc.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
    "stack": (lambda a, b: tc.stack([a, b], axis=0) * Tensor(np.arange(12.0).reshape(2, 2, 3)), [(2, 3), (2, 3)]),
    "reduce_sum_axis": (lambda a: tc.tanh(tc.reduce_sum(a, axis=1)), [(3, 4)]),
    "reduce_mean_axis": (lambda a: tc.tanh(tc.reduce_mean(a, axis=0, keepdims=True)), [(3, 4)]),
    "dropout_fixed_mask": (lambda a: tc.dropout(a, 0.3, True, np.random.default_rng(5)) * a, [(4, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("trial", range(20))
def test_primitive_gradients_match_finite_differences(name, trial):
    fn, shapes = OPS[name]
    with tc.default_dtype(np.float64):
        xs = [rand(*s, seed=1000 * trial + i) for i, s in enumerate(shapes)]
        report = grad_check(lambda: tc.reduce_sum(fn(*xs)), xs, step=1e-5, tol=1e-4)
    assert report.passed, f"{name}: {report.max_rel_error}"


def test_grad_check_softmax_and_layer_norm_examples():
    with tc.default_dtype(np.float64):
        x = rand(6)
        w = Tensor(np.arange(6.0))
        assert grad_check(lambda t: (tc.softmax(t) * w).sum(), x, tol=1e-4).passed
        g, b = Tensor(np.ones(6)), Tensor(np.zeros(6))
        assert grad_check(lambda t: (tc.layer_norm(t, g, b) * w).sum(), x, tol=1e-4).passed


def test_grad_check_catches_corrupted_backward_rule():
    def bad_square(a):
        return Tensor.from_op(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")  # should be 2a

    with tc.default_dtype(np.float64):
        report = grad_check(lambda t: bad_square(t).sum(), rand(5), tol=1e-4)
    assert not report.passed


def test_grad_check_rejects_non_finite():
    with tc.default_dtype(np.float64):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with pytest.raises(NumericError), np.errstate(invalid="ignore"):
            grad_check(lambda t: tc.log(t).sum(), x)


def test_grad_check_needs_64_bit():
    with pytest.raises(ContractError):
        grad_check(lambda t: t.sum(), rand(2).detach())


def test_forward_is_bit_deterministic():
    def run():
        x = Tensor(np.random.default_rng(3).normal(size=(4, 8)))
        w = Tensor(np.random.default_rng(4).normal(size=(8, 8)))
        return tc.softmax(tc.dropout(x @ w, 0.2, True, np.random.default_rng(9))).data

    assert np.array_equal(run(), run())


def test_integer_index_gives_a_scalar():
    x = rand(3)
    y = x[1]
    assert y.shape == ()
    tc.backward(y * 2.0)
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0])
