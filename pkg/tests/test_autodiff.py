"""Gradient, initializer, and optimizer checks for the autodiff core.

Every primitive is checked against central finite differences (eps=1e-4)
with max relative error 1e-4 on randomized shapes up to 16x16.
"""

import numpy as np
import pytest

import fraudlens.autodiff as ad
from fraudlens.errors import NumericOverflowError

EPS = 1e-4
TOL = 1e-4


def max_rel_err(a, b, floor=1e-3):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_grad(f, x0):
    """Central finite differences of scalar f at x0 (ndarray), elementwise."""
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += EPS
        xm = x0.copy()
        xm[idx] -= EPS
        g[idx] = (f(xp) - f(xm)) / (2 * EPS)
    return g


def scalarize(t, w):
    """Reduce tensor t to a scalar via a fixed random projection w."""
    flatten_l = ad.Tensor(np.ones((1, t.shape[0])))
    return ad.matmul(ad.matmul(flatten_l, ad.mul(t, ad.Tensor(w))), ad.Tensor(np.ones((t.shape[1], 1))))


def check_grad(build, x0, seed=0):
    """build(x_tensor) -> output tensor; checks d(proj(out))/dx vs finite differences."""
    rng = np.random.default_rng(seed)
    probe = build(ad.Tensor(x0))
    w = rng.normal(size=probe.shape)

    def f(xv):
        return scalarize(build(ad.Tensor(xv)), w).item()

    x = ad.Tensor(x0, requires_grad=True)
    loss = scalarize(build(x), w)
    ad.backward(loss)
    assert x.grad is not None
    err = max_rel_err(x.grad, fd_grad(f, np.asarray(x0, dtype=float)))
    assert err <= TOL, f"finite-difference mismatch: {err}"


RNG = np.random.default_rng(20240811)


def rand_shape(max_dim=16):
    return (int(RNG.integers(1, max_dim + 1)), int(RNG.integers(1, max_dim + 1)))


class TestPrimitiveForward:
    def test_softmax_uniform_on_equal_logits(self):
        out = ad.softmax(ad.Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_softmax_sums_to_one_and_in_open_interval(self):
        for _ in range(50):
            x = RNG.normal(scale=3, size=rand_shape())
            s = ad.softmax(ad.Tensor(x)).data
            assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-6)
            assert np.all((s > 0) & (s < 1 + 1e-12))

    def test_segment_softmax_sums_to_one_per_group(self):
        for _ in range(30):
            n = int(RNG.integers(2, 20))
            segs = np.sort(RNG.integers(0, 4, size=n))
            x = RNG.normal(size=(n, 3))
            s = ad.softmax(ad.Tensor(x), segments=segs).data
            for gid in np.unique(segs):
                assert np.allclose(s[segs == gid].sum(axis=0), 1.0, atol=1e-9)

    def test_dropout_eval_is_identity(self):
        x = ad.Tensor(RNG.normal(size=(4, 5)))
        assert ad.dropout(x, 0.5, "eval") is x

    def test_dropout_train_rate_and_inverted_scaling(self):
        rate = 0.3
        n = 100_000
        rng = np.random.default_rng(7)
        x = ad.Tensor(np.ones((n, 1)))
        y = ad.dropout(x, rate, "train", rng).data
        dropped = np.mean(y == 0.0)
        assert abs(dropped - rate) <= 0.01
        survivors = y[y != 0.0]
        assert np.allclose(survivors, 1.0 / (1.0 - rate))
        # eval/train expectations agree
        assert abs(y.mean() - 1.0) <= 0.02

    def test_cross_entropy_uniform_logits(self):
        assert ad.cross_entropy(ad.Tensor([[0.0, 0.0]]), 0).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_relu_tanh_sigmoid_values(self):
        x = ad.Tensor([[-1.0, 0.0, 2.0]])
        assert np.allclose(ad.relu(x).data, [[0, 0, 2]])
        assert np.allclose(ad.tanh(x).data, np.tanh(x.data))
        assert np.allclose(ad.sigmoid(x).data, 1 / (1 + np.exp(-x.data)))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
        with pytest.raises(ValueError):
            ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))

    def test_nonfinite_result_names_primitive(self):
        big = ad.Tensor(np.full((1, 1), 1e308))
        with np.errstate(over="ignore"), pytest.raises(NumericOverflowError) as exc:
            ad.mul(big, big)
        assert "mul" in str(exc.value)


class TestPrimitiveGradients:
    """Finite-difference oracle for every primitive on randomized shapes."""

    def test_matmul(self):
        for _ in range(5):
            n, k = rand_shape()
            m = int(RNG.integers(1, 17))
            b = RNG.normal(size=(k, m))
            check_grad(lambda x: ad.matmul(x, ad.Tensor(b)), RNG.normal(size=(n, k)))
            a = RNG.normal(size=(n, k))
            check_grad(lambda x: ad.matmul(ad.Tensor(a), x), RNG.normal(size=(k, m)))

    def test_add_with_broadcast(self):
        n, m = 5, 7
        b = RNG.normal(size=(1, m))
        check_grad(lambda x: ad.add(x, ad.Tensor(b)), RNG.normal(size=(n, m)))
        a = RNG.normal(size=(n, m))
        check_grad(lambda x: ad.add(ad.Tensor(a), x), RNG.normal(size=(1, m)))
        check_grad(lambda x: ad.add(ad.Tensor(a), x), RNG.normal(size=(n, 1)))

    def test_mul_with_broadcast(self):
        n, m = 6, 4
        b = RNG.normal(size=(n, m))
        check_grad(lambda x: ad.mul(x, ad.Tensor(b)), RNG.normal(size=(n, m)))
        check_grad(lambda x: ad.mul(ad.Tensor(b), x), RNG.normal(size=(n, 1)))
        check_grad(lambda x: ad.mul(ad.Tensor(b), x), RNG.normal(size=(1, 1)))

    def test_concat_rows_and_cols(self):
        a = RNG.normal(size=(3, 4))
        check_grad(lambda x: ad.concat([ad.Tensor(a), x], axis=0), RNG.normal(size=(2, 4)))
        check_grad(lambda x: ad.concat([x, ad.Tensor(a)], axis=1), RNG.normal(size=(3, 2)))

    def test_mean_rows(self):
        check_grad(ad.mean_rows, RNG.normal(size=(9, 3)))

    def test_softmax_rowwise(self):
        check_grad(ad.softmax, RNG.normal(size=(4, 6)))

    def test_softmax_segments(self):
        segs = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
        check_grad(lambda x: ad.softmax(x, segments=segs), RNG.normal(size=(9, 3)))

    def test_relu_away_from_kink(self):
        x = RNG.normal(size=(8, 8))
        x[np.abs(x) < 0.05] = 0.5
        check_grad(ad.relu, x)

    def test_tanh(self):
        check_grad(ad.tanh, RNG.normal(size=(5, 5)))

    def test_sigmoid(self):
        check_grad(ad.sigmoid, RNG.normal(size=(7, 2)))

    def test_layer_norm_input_and_params(self):
        n, m = 4, 6
        g0 = RNG.normal(size=(1, m)) + 1.5
        b0 = RNG.normal(size=(1, m))
        check_grad(lambda x: ad.layer_norm(x, ad.Tensor(g0), ad.Tensor(b0)), RNG.normal(size=(n, m)))
        x0 = RNG.normal(size=(n, m))
        check_grad(lambda g: ad.layer_norm(ad.Tensor(x0), g, ad.Tensor(b0)), g0)
        check_grad(lambda b: ad.layer_norm(ad.Tensor(x0), ad.Tensor(g0), b), b0)

    def test_layer_norm_sum_matches_fd(self):
        x0 = RNG.normal(size=(3, 5))
        gain = ad.Tensor(np.ones((1, 5)))
        bias = ad.Tensor(np.zeros((1, 5)))

        def f(xv):
            return float(ad.layer_norm(ad.Tensor(xv), gain, bias).data.sum())

        x = ad.Tensor(x0, requires_grad=True)
        out = ad.layer_norm(x, gain, bias)
        loss = ad.matmul(ad.matmul(ad.Tensor(np.ones((1, 3))), out), ad.Tensor(np.ones((5, 1))))
        ad.backward(loss)
        assert max_rel_err(x.grad, fd_grad(f, x0)) <= TOL

    def test_dropout_train_grad(self):
        # Recreate the same mask on every evaluation so finite differences see
        # a fixed function.
        def build(x):
            return ad.dropout(x, 0.4, "train", np.random.default_rng(123))

        check_grad(build, RNG.normal(size=(6, 6)))

    def test_cross_entropy_grad_is_p_minus_onehot(self):
        logits0 = RNG.normal(size=(1, 4))
        x = ad.Tensor(logits0, requires_grad=True)
        loss = ad.cross_entropy(x, 2)
        ad.backward(loss)
        z = logits0 - logits0.max()
        p = np.exp(z) / np.exp(z).sum()
        expect = p.copy()
        expect[0, 2] -= 1.0
        assert max_rel_err(x.grad, expect) <= 1e-10

        def f(v):
            return ad.cross_entropy(ad.Tensor(v), 2).item()

        assert max_rel_err(x.grad, fd_grad(f, logits0)) <= TOL

    def test_cross_entropy_batched_rows(self):
        labels = np.array([0, 2, 1])
        check_grad(lambda x: ad.cross_entropy(x, labels), RNG.normal(size=(3, 3)))


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        loss = ad.matmul(ad.mul(x, x), ad.Tensor(np.ones((2, 1))))
        ad.backward(loss)
        assert np.allclose(x.grad, [[2.0, 4.0]])

    def test_reused_node_accumulates(self):
        x = ad.Tensor([[3.0]], requires_grad=True)
        y = ad.mul(x, x)      # x^2
        loss = ad.add(y, ad.mul(y, ad.Tensor([[2.0]])))  # 3 x^2
        ad.backward(loss)
        assert np.allclose(x.grad, [[18.0]])

    def test_unreachable_leaf_gets_zero(self):
        x = ad.Tensor([[1.0]], requires_grad=True)
        other = ad.Tensor([[5.0]], requires_grad=True)
        loss = ad.mul(x, x)
        ad.backward(loss, leaves=[x, other])
        assert np.allclose(other.grad, 0.0)

    def test_non_grad_leaves_have_no_grad(self):
        x = ad.Tensor([[1.0]], requires_grad=True)
        c = ad.Tensor([[2.0]])
        loss = ad.mul(x, c)
        ad.backward(loss)
        assert c.grad is None

    def test_backward_on_detached_raises(self):
        with pytest.raises(ValueError):
            ad.backward(ad.Tensor([[1.0]]))

    def test_backward_on_nonscalar_raises(self):
        x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.mul(x, x))

    def test_replay_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            x = ad.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            h = ad.relu(ad.matmul(x, ad.Tensor(rng.normal(size=(4, 4)))))
            h = ad.dropout(h, 0.2, "train", np.random.default_rng(5))
            loss = ad.cross_entropy(ad.matmul(ad.mean_rows(h), ad.Tensor(rng.normal(size=(4, 2)))), 1)
            ad.backward(loss)
            return loss.item(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)


class TestXavierInit:
    def test_bound_is_enforced(self):
        t = ad.xavier_init(2, 3, seed=7)
        limit = np.sqrt(6.0 / 5.0)
        assert np.all(np.abs(t.data) <= limit)

    def test_determinism(self):
        a = ad.xavier_init(4, 4, seed=11)
        b = ad.xavier_init(4, 4, seed=11)
        assert np.array_equal(a.data, b.data)

    def test_mean_within_three_standard_errors(self):
        rows, cols = 100, 100
        t = ad.xavier_init(rows, cols, seed=3)
        limit = np.sqrt(6.0 / (rows + cols))
        # uniform(-L, L): var = L^2/3, se of the mean of n draws
        se = limit / np.sqrt(3 * rows * cols)
        assert abs(t.data.mean()) <= 3 * se


class TestAdam:
    def test_zero_grads_fixed_point(self):
        p = ad.Tensor([[1.0, -2.0]], requires_grad=True)
        before = p.data.copy()
        opt = ad.Adam([p], lr=0.1)
        opt.step(grads=[np.zeros((1, 2))])
        assert np.array_equal(p.data, before)

    def test_single_step_bias_corrected(self):
        # m_hat = 1, v_hat = 1 after one step with constant grad 1, so the
        # update is lr/(1 + eps) which is 0.1 to within eps.
        p = ad.Tensor([[0.0]], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        opt.step(grads=[np.ones((1, 1))])
        assert p.item() == pytest.approx(-0.1, abs=1e-8)

    def test_converges_on_quadratic(self):
        p = ad.Tensor([[0.0]], requires_grad=True)
        opt = ad.Adam([p], lr=0.1)
        for _ in range(200):
            grad = 2.0 * (p.data - 3.0)
            opt.step(grads=[grad])
        assert abs(p.item() - 3.0) < 0.05

    def test_grad_shape_mismatch_raises(self):
        p = ad.Tensor([[0.0]], requires_grad=True)
        opt = ad.Adam([p])
        with pytest.raises(ValueError):
            opt.step(grads=[np.ones((2, 2))])
