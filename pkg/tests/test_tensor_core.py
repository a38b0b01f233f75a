import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctxadapt import tensor_core as tc
from ctxadapt.tensor_core import GraphError, ShapeError, Tensor, grad_check


def param(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


class TestMatmul:
    def test_identity(self):
        out = tc.matmul(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_unit_selection(self):
        out = tc.matmul(np.array([[1.0, 0.0]]), np.array([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(tc.matmul(a, b).data, triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(tc.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)

    def test_two_way_hand_value(self):
        expected0 = math.exp(0.3) / (math.exp(0.3) + math.exp(0.2))
        out = tc.softmax(np.array([0.3, 0.2])).data
        assert out[0] == pytest.approx(expected0, abs=1e-15)
        np.testing.assert_allclose(out, [0.5250, 0.4750], atol=1e-4)

    def test_large_inputs_stay_finite(self):
        out = tc.softmax(np.array([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0)

    def test_empty_raises(self):
        with pytest.raises(ShapeError):
            tc.softmax(np.zeros(0))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, v, c):
        s = tc.softmax(v).data
        assert abs(s.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(tc.softmax(v + c).data, s, rtol=0, atol=1e-12)


class TestLogsumexp:
    def test_ln2(self):
        assert tc.logsumexp(np.array([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_absent_term(self):
        assert tc.logsumexp(np.array([-np.inf, 0.0])).item() == 0.0

    def test_naive_oracle(self):
        naive = math.log(math.exp(2.0) + math.exp(1.0) + math.exp(0.5))
        assert tc.logsumexp(np.array([2.0, 1.0, 0.5])).item() == pytest.approx(naive, abs=1e-14)

    def test_all_neg_inf(self):
        x = param([-np.inf, -np.inf])
        out = tc.logsumexp(x)
        assert out.item() == -np.inf

    def test_all_neg_inf_gradient_is_zero(self):
        x = param([-np.inf, -np.inf])
        y = param([1.0])
        z = tc.logsumexp(tc.stack([tc.logsumexp(x).reshape(1), y], axis=0), axis=0).sum()
        z.backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])
        assert y.grad[0] == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e3, 1e3)))
    def test_bounds(self, v):
        out = tc.logsumexp(v).item()
        assert out >= v.max() - 1e-12
        assert out <= v.max() + math.log(len(v)) + 1e-12


class TestBackward:
    def test_square(self):
        x = param(3.0)
        (x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_fan_out(self):
        x = param(1.5)
        (x + x).backward()
        assert x.grad == pytest.approx(2.0)

    def test_softmax_component_vs_finite_differences(self):
        x = param([0.1, -0.4, 0.7])
        assert grad_check(lambda: tc.softmax(x)[0], [x], eps=1e-5) < 1e-6

    def test_non_scalar_loss(self):
        x = param([1.0, 2.0])
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_detached_loss(self):
        with pytest.raises(GraphError):
            tc.backward(Tensor(1.0))

    def test_shared_subexpression_equals_expanded_tree(self):
        rng = np.random.default_rng(0)
        w = param(rng.normal(size=(3, 3)))
        v = rng.normal(size=(2, 3))
        shared = tc.tanh(tc.matmul(v, w))
        (shared * shared + shared).sum().backward()
        g_shared = w.grad.copy()
        w.grad = None
        a, b, c = (tc.tanh(tc.matmul(v, w)) for _ in range(3))
        (a * b + c).sum().backward()
        np.testing.assert_allclose(g_shared, w.grad, rtol=0, atol=1e-12)

    def test_no_grad_records_nothing(self):
        x = param([1.0])
        with tc.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestGradCheck:
    def test_linear_layer(self):
        rng = np.random.default_rng(1)
        w, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=3))
        x = rng.normal(size=(2, 4))
        assert grad_check(lambda: tc.tanh(x @ w + b).sum(), [w, b]) < 1e-6

    def test_constant_function(self):
        x = param([1.0, 2.0])
        assert grad_check(lambda: Tensor(4.0), [x]) == 0.0

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda: Tensor(0.0), [], eps=0.1)

    def test_non_finite_loss(self):
        x = param([0.0])
        with pytest.raises(FloatingPointError):
            grad_check(lambda: tc.log(x).sum(), [x])


def _unary_cases():
    return {
        "tanh": lambda x: tc.tanh(x),
        "sigmoid": lambda x: tc.sigmoid(x),
        "exp": lambda x: tc.exp(x * 0.3),
        "log": lambda x: tc.log(tc.exp(x) + 1.0),
        "softmax": lambda x: tc.softmax(x, axis=-1),
        "log_softmax": lambda x: tc.log_softmax(x, axis=0),
        "logsumexp": lambda x: tc.logsumexp(x, axis=1),
        "sum": lambda x: x.sum(axis=0),
        "mean": lambda x: x.mean(axis=1, keepdims=True),
        "slice": lambda x: x[1:, :2],
        "swapaxes": lambda x: x.T,
        "reshape": lambda x: x.reshape(-1),
        "gather": lambda x: x[np.array([0, 2, 0]), np.array([1, 1, 1])],
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=(3, 4)))
    probe = rng.normal(size=_unary_cases()[name](x).shape)
    f = lambda: (_unary_cases()[name](x) * probe).sum()
    assert grad_check(f, [x]) < 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_binary_and_structural_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng.normal(size=(2, 3))), param(rng.normal(size=(3, 4)))
    c, d = param(rng.normal(size=(2, 4))), param(rng.normal(size=(1, 4)))
    table = param(rng.normal(size=(5, 4)))

    def f():
        m = a @ b
        y = tc.concat([m * c, m + d], axis=0)
        z = tc.stack([y, y * 2.0], axis=0).sum(axis=0)
        e = tc.embedding(table, [[0, 3], [3, 4]]).sum(axis=1)
        return (z[:2] * e).sum() + (z * z).mean()

    assert grad_check(f, [a, b, c, d, table]) < 1e-4


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(5)
    a, b = param(rng.normal(size=(3, 2, 4))), param(rng.normal(size=(4, 5)))
    k = param(rng.normal(size=(1, 5, 4)))
    assert grad_check(lambda: ((a @ b) @ k).sum(), [a, b, k]) < 1e-4


def test_embedding_rejects_out_of_range():
    with pytest.raises(IndexError):
        tc.embedding(param(np.zeros((3, 2))), [3])
