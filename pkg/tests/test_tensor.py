import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ticketlab import tensor as T
from ticketlab.tensor import DimensionError, NonFiniteError, Tape, Tensor

from gradcheck import numeric_grad, rel_close


def grad_of(fn, *values):
    """Analytic gradients of scalar fn(*leaves) for each input array."""
    tape = Tape()
    leaves = [tape.watch(f"x{i}", v) for i, v in enumerate(values)]
    loss = fn(*leaves)
    g = T.backward(tape, loss)
    return [g[f"x{i}"] for i in range(len(values))]


def value_of(fn, *values):
    return fn(*[Tensor(v) for v in values]).item()


def check_grads(fn, *values, rtol=1e-4, atol=1e-8):
    analytic = grad_of(fn, *values)
    for i, v in enumerate(values):
        def f(x, i=i):
            args = list(values)
            args[i] = x
            return value_of(fn, *args)
        num = numeric_grad(f, v)
        assert rel_close(analytic[i], num, rtol, atol), (i, analytic[i], num)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_expansion(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_matches_finite_differences(self, rng):
        a, b = rng.uniform(-1, 1, (3, 3)), rng.uniform(-1, 1, (3, 3))
        (ga, gb) = grad_of(lambda x, y: T.sum(T.matmul(x, y)), a, b)
        na = numeric_grad(lambda x: (x @ b).sum(), a)
        np.testing.assert_allclose(ga, na, atol=1e-6)
        check_grads(lambda x, y: T.sum(T.matmul(x, y)), a, b)

    def test_batched_against_shared_weight(self, rng):
        a, w = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 5))
        c = rng.uniform(-1, 1, (2, 3, 5))
        check_grads(lambda x, y: T.sum(T.mul(T.matmul(x, y), Tensor(c))), a, w)

    def test_batched_both(self, rng):
        a, b = rng.uniform(-1, 1, (2, 2, 3, 4)), rng.uniform(-1, 1, (2, 2, 4, 3))
        c = rng.uniform(-1, 1, (2, 2, 3, 3))
        check_grads(lambda x, y: T.sum(T.mul(T.matmul(x, y), Tensor(c))), a, b)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == 1.0
        assert 0 <= out[1] < 1e-300 or out[1] == 0.0

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.ones((2, 3))), axis=2)

    def test_grad(self, rng):
        x = rng.uniform(-1, 1, 5)
        c = rng.uniform(-1, 1, 5)
        check_grads(lambda t: T.sum(T.mul(T.softmax(t), Tensor(c))), x, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        y = T.softmax(Tensor(x), axis=-1).data
        assert np.all(y >= 0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])

    def test_two_point(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_gain_shape_checked(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))

    def test_grad(self, rng):
        x = rng.uniform(-1, 1, (3, 4))
        g, b = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
        c = rng.uniform(-1, 1, (3, 4))
        check_grads(lambda x_, g_, b_: T.sum(T.mul(T.layer_norm(x_, g_, b_), Tensor(c))),
                    x, g, b, rtol=1e-5)


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((1, 4))), [2]).item()
        assert loss == pytest.approx(math.log(4), abs=1e-12)
        assert loss == pytest.approx(1.3863, abs=1e-4)

    def test_confident(self):
        loss = T.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item()
        assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
        assert loss == pytest.approx(2.06e-9, rel=1e-2)
        assert loss > 0

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_grad(self, rng):
        x = rng.uniform(-1, 1, (4, 5))
        labels = np.array([0, 4, 2, 2])
        check_grads(lambda t: T.cross_entropy(t, labels), x, atol=1e-10)


class TestOtherOps:
    def test_gelu_grad(self, rng):
        x = rng.uniform(-1, 1, (3, 4))
        check_grads(lambda t: T.sum(T.gelu(t)), x)

    def test_linear_grad(self, rng):
        x, w, b = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, 5)
        c = rng.uniform(-1, 1, (2, 3, 5))
        check_grads(lambda x_, w_, b_: T.sum(T.mul(T.linear(x_, w_, b_), Tensor(c))), x, w, b)

    def test_linear_matches_matmul_plus_bias(self, rng):
        x, w, b = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, 5)
        np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data,
                                   x @ w + b, rtol=0, atol=1e-14)

    def test_embedding_grad_accumulates_repeats(self, rng):
        table = rng.uniform(-1, 1, (5, 3))
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        c = rng.uniform(-1, 1, (2, 3, 3))
        check_grads(lambda t: T.sum(T.mul(T.embedding(t, ids), Tensor(c))), table)

    def test_embedding_unknown_id(self):
        with pytest.raises(IndexError):
            T.embedding(Tensor(np.zeros((4, 2))), np.array([1, 4]))

    def test_shape_ops_grad(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4))
        c = rng.uniform(-1, 1, (4, 2, 3))
        check_grads(lambda t: T.sum(T.mul(T.reshape(T.transpose(t, (2, 0, 1)), (4, 2, 3)),
                                          Tensor(c))), x)

    def test_broadcast_add_sub_mul(self, rng):
        x, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, 4)
        check_grads(lambda a, c: T.sum(T.mul(T.sub(T.add(a, c), c), T.add(a, c))), x, b)

    def test_mean_and_scale(self, rng):
        x = rng.uniform(-1, 1, (3, 4))
        check_grads(lambda t: T.sum(T.scale(T.mean(T.mul(t, t), axis=1), 3.0)), x)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_forward_is_an_error(self):
        with pytest.raises(NonFiniteError):
            T.scale(Tensor([1e308]), 10.0)

    def test_mixed_tapes_rejected(self):
        a, b = Tape().watch("a", [1.0]), Tape().watch("b", [1.0])
        with pytest.raises(ValueError):
            T.add(a, b)


class TestBackward:
    def test_linear_sum(self):
        tape = Tape()
        w = tape.watch("w", [1.0, 2.0, 3.0])
        g = T.backward(tape, T.sum(w))
        np.testing.assert_array_equal(g["w"], [1.0, 1.0, 1.0])

    def test_quadratic(self):
        tape = Tape()
        w = tape.watch("w", [1.0, 2.0, 3.0])
        g = T.backward(tape, T.scale(T.sum(T.mul(w, w)), 0.5))
        np.testing.assert_array_equal(g["w"], [1.0, 2.0, 3.0])

    def test_untouched_leaf_gets_zero_grad(self):
        tape = Tape()
        w = tape.watch("w", [1.0, 2.0])
        tape.watch("unused", np.ones((2, 2)))
        g = T.backward(tape, T.sum(w))
        np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))

    def test_non_scalar_loss(self):
        tape = Tape()
        w = tape.watch("w", [1.0, 2.0])
        with pytest.raises(ValueError):
            T.backward(tape, T.scale(w, 2.0))

    def test_records_are_topologically_ordered(self):
        tape = Tape()
        w = tape.watch("w", np.ones((2, 2)))
        T.sum(T.gelu(T.matmul(w, w)))
        produced = {id(leaf) for leaf in tape.leaves.values()}
        for rec in tape.records:
            assert all(id(i) in produced or i.tape is None for i in rec.inputs)
            produced.add(id(rec.out))

    def test_forward_deterministic(self, rng):
        x = rng.uniform(-1, 1, (4, 8))
        g, b = rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8)
        outs = [T.softmax(T.layer_norm(Tensor(x), Tensor(g), Tensor(b))).data for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()
