import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import promptcl.tensor as T
from promptcl.errors import DimensionError, NonFiniteError
from promptcl.tensor import Tape, Tensor, finite_diff_check


def leaf(x):
    return Tensor(x, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[0], [0]]))
        np.testing.assert_array_equal(out.data, [[0], [0]])

    def test_closed_form(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_associativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = (Tensor(rng.normal(size=s)) for s in [(3, 4), (4, 5), (5, 2)])
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))

    def test_batched_weight_gradient(self):
        rng = np.random.default_rng(1)
        x = leaf(rng.normal(size=(3, 4, 5)))
        w = leaf(rng.normal(size=(5, 2)))
        assert finite_diff_check(lambda: T.tsum(T.square(T.matmul(x, w))), [x, w]) < 1e-7


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_large_values_stable(self):
        np.testing.assert_array_equal(T.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = T.softmax_rows(Tensor([[0.7071, 0.0]])).data
        np.testing.assert_allclose(out, [[0.6698, 0.3302]], atol=1e-4)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        y = T.softmax_rows(Tensor(x)).data
        assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
        y2 = T.softmax_rows(Tensor(x + c)).data
        assert np.max(np.abs(y - y2)) <= 1e-12


class TestLayerNorm:
    ones, zeros = Tensor([1.0, 1.0]), Tensor([0.0, 0.0])

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), self.ones, self.zeros, eps=0.0)
        np.testing.assert_array_equal(out.data, [1.0, -1.0])

    def test_zero_variance_collapses_to_beta(self):
        out = T.layer_norm(Tensor([5.0, 5.0]), self.ones, self.zeros, eps=1e-6)
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_affine(self):
        out = T.layer_norm(Tensor([0.0, 2.0]), Tensor([2.0, 2.0]), Tensor([1.0, 1.0]), eps=0.0)
        np.testing.assert_allclose(out.data, [-1.0, 3.0], atol=1e-15)

    @given(arrays(np.float64, (4, 6), elements=st.floats(-10, 10)))
    def test_moments(self, x):
        x = x[np.var(x, axis=1) >= 1e-6]
        if len(x) == 0:
            return
        y = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-300).data
        assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
        assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-8)


class TestGelu:
    def test_center(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(Tensor([20.0])).data[0] - 20.0) < 1e-12

    def test_at_one(self):
        assert abs(T.gelu(Tensor([1.0])).data[0] - 0.8413) < 1e-3


class TestConcatRows:
    def test_empty_prefix(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.concat_rows(Tensor(np.zeros((0, 2))), x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_order(self):
        out = T.concat_rows(Tensor([[1.0, 1.0]]), Tensor([[2.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1, 1], [2, 2]])

    def test_gradient_splits(self):
        a, b = leaf(np.zeros((2, 3))), leaf(np.zeros((1, 3)))
        with Tape() as tape:
            loss = T.tsum(T.concat_rows(a, b))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_rows(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 3))))


class TestBackward:
    def test_sum(self):
        w = leaf([1.0, 2.0, 3.0])
        with Tape() as tape:
            loss = T.tsum(w)
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_constant_loss(self):
        w = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = T.tsum(Tensor([3.0, 4.0]))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [0, 0])

    def test_quadratic(self):
        w = leaf([1.0, 2.0])
        with Tape() as tape:
            loss = T.tsum(T.mul(w, w))
        tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [2, 4])

    def test_accumulates(self):
        w = leaf([1.0, 2.0])
        for _ in range(2):
            with Tape() as tape:
                loss = T.tsum(T.mul(w, w))
            tape.backward(loss)
        np.testing.assert_array_equal(w.grad, [4, 8])
        w.zero_grad()
        np.testing.assert_array_equal(w.grad, [0, 0])

    def test_rejects_non_scalar(self):
        w = leaf([1.0, 2.0])
        with Tape() as tape:
            out = T.mul(w, w)
        with pytest.raises(ValueError):
            tape.backward(out)

    def test_rejects_foreign_loss(self):
        w = leaf([1.0, 2.0])
        loss = T.tsum(w)
        with Tape() as tape:
            pass
        with pytest.raises(ValueError):
            tape.backward(loss)

    def test_reset(self):
        w = leaf([1.0])
        with Tape() as tape:
            T.tsum(w)
        assert tape.nodes and tape.leaf_ids
        tape.reset()
        assert not tape.nodes and not tape.leaf_ids

    def test_topological_order(self):
        w = leaf(np.ones(3))
        with Tape() as tape:
            T.tsum(T.gelu(T.mul(w, 2.0)))
        seen = {id(w)}
        for node in tape.nodes:
            assert all(id(i) in seen or not i._needs for i in node.inputs)
            seen.add(id(node.out))


class TestFinite:
    def test_nonfinite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([math.inf])

    def test_overflow_reported(self):
        with pytest.raises(NonFiniteError):
            T.mul(Tensor([1e200]), Tensor([1e200]))


class TestFiniteDiff:
    def test_quadratic(self):
        w = leaf([0.3, -1.2, 2.0])
        assert finite_diff_check(lambda: T.tsum(T.square(w)), [w], 1e-5) < 1e-7

    def test_constant(self):
        w = leaf([0.3, -1.2])
        assert finite_diff_check(lambda: T.tsum(Tensor([1.0, 2.0])), [w], 1e-5) == 0.0

    def test_nondeterministic_detected(self):
        w = leaf([0.3])
        calls = iter(range(100))
        with pytest.raises(RuntimeError):
            finite_diff_check(lambda: T.scale(T.tsum(w), 1.0 + next(calls)), [w], 1e-5)

    def test_h_range(self):
        w = leaf([0.3])
        with pytest.raises(ValueError):
            finite_diff_check(lambda: T.tsum(w), [w], 1e-2)


OPS = {
    "softmax_rows": lambda x: T.tsum(T.mul(T.softmax_rows(x), Tensor(np.arange(12.0).reshape(3, 4)))),
    "layer_norm": lambda x: T.tsum(T.square(T.layer_norm(x, Tensor([1.0, 2.0, 0.5, -1.0]), Tensor([0.1, 0, 0, 0.2])))),
    "gelu": lambda x: T.tsum(T.gelu(x)),
    "l2_normalize": lambda x: T.tsum(T.mul(T.l2_normalize(x), Tensor(np.arange(12.0).reshape(3, 4)))),
    "cross_entropy": lambda x: T.cross_entropy(x, [0, 3, 1]),
    "swapaxes": lambda x: T.tsum(T.square(T.matmul(T.swapaxes(x, 0, 1), x))),
    "take": lambda x: T.tsum(T.square(T.take(x, [2, 0, 2], axis=0))),
    "index": lambda x: T.tsum(T.square(x[:, 1])),
    "broadcast": lambda x: T.tsum(T.square(T.broadcast_to(x, (2, 3, 4)))),
    "mean": lambda x: T.square(T.mean(T.square(x))),
    "log_softmax_rows": lambda x: T.tsum(T.mul(T.log_softmax_rows(x), Tensor(np.arange(12.0).reshape(3, 4)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gradients_match_finite_differences(name, seed):
    x = leaf(np.random.default_rng(seed).normal(size=(3, 4)))
    assert finite_diff_check(lambda: OPS[name](x), [x], 1e-5) < 1e-6


def test_determinism():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(5, 8)), rng.normal(size=(8, 8))

    def run():
        h = T.layer_norm(T.matmul(Tensor(x), Tensor(w)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        return T.softmax_rows(T.gelu(h)).data

    assert run().tobytes() == run().tobytes()
