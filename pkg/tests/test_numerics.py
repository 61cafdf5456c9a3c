import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from irmlab import numerics as nx
from irmlab.host import HostModel, ModelConfig
from irmlab.numerics import GraphError, NonFiniteError, ShapeError, Tensor, gradcheck

TOL = 1e-6


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted(out, rng_seed=7):
    # random projection keeps gradients from being trivially uniform
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return nx.sum_all(nx.mul(out, Tensor(w)))


class TestForwardValues:
    def test_matmul_identity(self, rng):
        a = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(np.eye(3))).data, a)

    def test_matmul_hand(self):
        out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_relu(self):
        np.testing.assert_array_equal(nx.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert not nx.relu(Tensor(-np.arange(1.0, 6.0))).data.any()

    def test_rmsnorm_constant_vector_is_ones(self):
        out = nx.rmsnorm(Tensor(np.full(6, 3.7)), Tensor(np.ones(6)), 0.0)
        np.testing.assert_allclose(out.data, np.ones(6), rtol=0, atol=1e-15)

    def test_rmsnorm_zero_vector(self):
        out = nx.rmsnorm(Tensor(np.zeros(5)), Tensor(np.ones(5)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_softmax_uniform_and_ln2(self):
        np.testing.assert_allclose(nx.softmax_rows(Tensor(np.full((1, 4), 2.5))).data, 0.25)
        out = nx.softmax_rows(Tensor([[0.3, 0.3 + math.log(2)]])).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_swiglu_zero_cases(self, rng):
        x = Tensor(rng.normal(size=4))
        z = lambda *s: Tensor(np.zeros(s))
        assert not nx.swiglu_ffn(x, z(6, 4), z(6, 4), z(4, 6)).data.any()
        # W1 x = 0 -> silu(0) = 0 -> zero output, regardless of W3, W2
        out = nx.swiglu_ffn(x, z(6, 4), Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(4, 6))))
        assert not out.data.any()

    def test_swiglu_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            nx.swiglu_ffn(Tensor(np.ones(4)), Tensor(np.ones((6, 5))), Tensor(np.ones((6, 4))),
                          Tensor(np.ones((4, 6))))

    def test_rope_position_zero_identity(self, rng):
        x = rng.normal(size=(1, 6))
        np.testing.assert_array_equal(nx.rope_apply(Tensor(x), [0], 10000.0).data, x)

    def test_rope_preserves_pair_norms(self, rng):
        x = rng.normal(size=(5, 8))
        y = nx.rope_apply(Tensor(x), list(range(5)), 10000.0).data
        np.testing.assert_allclose(np.hypot(y[:, 0::2], y[:, 1::2]), np.hypot(x[:, 0::2], x[:, 1::2]),
                                   rtol=1e-13)

    def test_rope_relative_position(self, rng):
        q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))

        def score(p, r):
            qp = nx.rope_apply(Tensor(q), [p], 10000.0).data
            kr = nx.rope_apply(Tensor(k), [r], 10000.0).data
            return float((qp @ kr.T)[0, 0])

        assert score(3, 1) == pytest.approx(score(5, 3), rel=1e-12)
        assert score(3, 1) != pytest.approx(score(3, 2), rel=1e-3)

    def test_rope_odd_dim(self):
        with pytest.raises(ValueError):
            nx.rope_apply(Tensor(np.ones((1, 5))), [0], 10000.0)

    def test_cross_entropy_uniform_is_lnV(self):
        ce = nx.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
        assert ce.item() == pytest.approx(math.log(7), abs=1e-14)

    def test_cross_entropy_dominant_is_zero(self):
        logits = np.zeros((2, 5))
        logits[0, 1] = logits[1, 4] = 1e4
        assert nx.cross_entropy(Tensor(logits), [1, 4]).item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(IndexError):
            nx.cross_entropy(Tensor(np.zeros((1, 4))), [4])

    def test_nonfinite_is_an_error(self):
        with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
            nx.scale(Tensor([1e308]), 10.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = param(rng, 3, 2)
        nx.backward(nx.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_sum_of_squares_gives_2x(self, rng):
        x = param(rng, 4)
        nx.backward(nx.sum_all(nx.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)

    def test_non_scalar_loss(self, rng):
        with pytest.raises(GraphError):
            nx.backward(nx.relu(param(rng, 3)))

    def test_detached_loss(self, rng):
        with pytest.raises(GraphError):
            nx.backward(nx.sum_all(Tensor(rng.normal(size=3))))

    def test_graph_runs_once(self, rng):
        loss = nx.sum_all(param(rng, 2))
        nx.backward(loss)
        with pytest.raises(GraphError):
            nx.backward(loss)

    def test_shared_node_visited_once(self, rng):
        # y used twice: d/dx sum(y*y) with y = 3x must be 18x, not double counted
        x = param(rng, 3)
        y = nx.scale(x, 3.0)
        nx.backward(nx.sum_all(nx.mul(y, y)))
        np.testing.assert_allclose(x.grad, 18 * x.data, rtol=1e-14)


class TestGradcheck:
    def test_matmul(self, rng):
        a, b = param(rng, 5, 4), param(rng, 4, 3)
        assert gradcheck(lambda: weighted(nx.matmul(a, b)), [a, b]) < TOL

    def test_batched_matmul(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 2)
        assert gradcheck(lambda: weighted(nx.matmul(a, b)), [a, b]) < TOL

    def test_linear_and_bias(self, rng):
        x, w, b = param(rng, 3, 4), param(rng, 5, 4), param(rng, 5)
        assert gradcheck(lambda: weighted(nx.add_bias(nx.linear(x, w), b)), [x, w, b]) < TOL

    def test_relu_away_from_kink(self, rng):
        v = rng.normal(size=20)
        v[np.abs(v) < 1e-3] = 0.5
        x = Tensor(v, requires_grad=True)
        assert gradcheck(lambda: weighted(nx.relu(x)), [x]) < TOL

    def test_rmsnorm(self, rng):
        x, g = param(rng, 8), param(rng, 8)
        assert gradcheck(lambda: weighted(nx.rmsnorm(x, g, 1e-5)), [x, g]) < TOL

    def test_softmax(self, rng):
        x = param(rng, 3, 4)
        assert gradcheck(lambda: weighted(nx.softmax_rows(x)), [x]) < TOL

    def test_masked_softmax(self, rng):
        x = param(rng, 4, 4)
        mask = np.tril(np.ones((4, 4), dtype=bool))
        assert gradcheck(lambda: weighted(nx.softmax_rows(x, mask)), [x]) < TOL

    def test_swiglu(self, rng):
        x, w1, w3, w2 = param(rng, 4), param(rng, 6, 4), param(rng, 6, 4), param(rng, 4, 6)
        assert gradcheck(lambda: weighted(nx.swiglu_ffn(x, w1, w3, w2)), [x, w1, w3, w2]) < TOL

    def test_rope(self, rng):
        x = param(rng, 2, 5, 6)
        assert gradcheck(lambda: weighted(nx.rope_apply(x, [0, 1, 2, 3, 4], 10000.0)), [x]) < TOL

    def test_cross_entropy(self, rng):
        x = param(rng, 2, 5)
        assert gradcheck(lambda: nx.cross_entropy(x, [1, 3]), [x]) < TOL

    def test_masked_cross_entropy(self, rng):
        x = param(rng, 2, 3, 5)
        mask = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
        assert gradcheck(lambda: nx.cross_entropy(x, np.array([[1, 2, 0], [4, 0, 3]]), mask), [x]) < TOL

    def test_embedding_with_repeats(self, rng):
        w = param(rng, 6, 3)
        assert gradcheck(lambda: weighted(nx.embedding(w, np.array([[1, 4, 1]]))), [w]) < TOL

    def test_shape_ops(self, rng):
        x = param(rng, 2, 3, 4)
        f = lambda: weighted(nx.select(nx.reshape(nx.transpose(x, (1, 0, 2)), (3, 2, 4)), 1, axis=1))
        assert gradcheck(f, [x]) < TOL

    def test_sigmoid_silu_sub_mean(self, rng):
        a, b = param(rng, 7), param(rng, 7)
        f = lambda: nx.mean_all(nx.mul(nx.sub(nx.sigmoid(a), b), nx.silu(b)))
        assert gradcheck(f, [a, b]) < TOL

    def test_full_toy_transformer(self):
        cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=12, vocab_size=11, max_seq=8)
        host = HostModel.init(cfg, seed=5)
        host.set_trainable(True)
        # norm gains away from 1 so their gradients are generic
        r = np.random.default_rng(0)
        for _, p in host.named_parameters():
            if p.ndim == 1:
                p.data[...] = r.uniform(0.5, 1.5, p.shape)
        tokens = np.array([[2, 5, 7, 1, 9], [3, 3, 8, 0, 4]])
        mask = np.array([[0, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
        f = lambda: nx.cross_entropy(host.logits_batch(tokens[:, :-1]), tokens[:, 1:], mask)
        assert gradcheck(f, host.parameters()) < 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    p = nx.softmax_rows(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    # shift invariance
    np.testing.assert_allclose(nx.softmax_rows(Tensor(x + 3.0)).data, p, atol=1e-12)
