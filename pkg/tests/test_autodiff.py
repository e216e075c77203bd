import math

import numpy as np
import pytest

from spinegnn import autodiff as ad
from spinegnn.autodiff import Adam, Madgrad, Mlp, Tensor


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle of a scalar function of one array."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4):
    scale = max(np.abs(numeric).max(), 1e-8)
    assert np.abs(analytic - numeric).max() / scale < rtol


class TestForwardOps:
    def test_relu(self):
        t = Tensor([[-1.0, 2.0]])
        np.testing.assert_array_equal(ad.relu(t).data, [[0.0, 2.0]])

    def test_sigmoid_extremes_stable(self):
        t = Tensor([[-800.0, 0.0, 800.0]])
        s = ad.sigmoid(t).data
        np.testing.assert_allclose(s, [[0.0, 0.5, 1.0]], atol=1e-12)

    def test_matmul_shape_mismatch_reports_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_concat_cols(self):
        out = ad.concat_cols([Tensor([[1.0]]), Tensor([[2.0, 3.0]])])
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])

    def test_grouped_max_pool_example(self):
        out = ad.row_max_pool_grouped(Tensor([[1.0, 5.0], [3.0, 2.0]]), np.array([0, 0]), 1)
        np.testing.assert_array_equal(out.data, [[3.0, 5.0]])

    def test_grouped_max_pool_multiple_groups(self):
        vals = Tensor([[1.0], [7.0], [4.0], [2.0]])
        out = ad.row_max_pool_grouped(vals, np.array([1, 0, 1, 0]), 2)
        np.testing.assert_array_equal(out.data, [[7.0], [4.0]])

    def test_grouped_max_pool_missing_group_rejected(self):
        with pytest.raises(ValueError, match="every group"):
            ad.row_max_pool_grouped(Tensor([[1.0]]), np.array([0]), 2)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3))
        ad.sum_all(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_backward_rejects_non_scalar(self):
        t = Tensor(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            t.backward()

    def test_shared_parent_accumulates(self):
        x = Tensor([[2.0]])
        y = ad.add(x, x)  # dy/dx = 2
        ad.sum_all(y).backward()
        assert x.grad[0, 0] == 2.0

    def test_max_pool_tie_goes_to_lowest_row(self):
        vals = Tensor([[1.0, 3.0], [1.0, 3.0], [0.0, 0.0]])
        out = ad.row_max_pool_grouped(vals, np.array([0, 0, 0]), 1)
        ad.sum_all(out).backward()
        np.testing.assert_array_equal(vals.grad, [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])

    def test_matmul_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a0 = rng.normal(size=(4, 3))
        b0 = rng.normal(size=(3, 2))

        def loss_of_a(a_data):
            return float((a_data @ b0).sum())

        a = Tensor(a0)
        b = Tensor(b0)
        ad.sum_all(ad.matmul(a, b)).backward()
        assert_grad_close(a.grad, finite_difference(loss_of_a, a0), rtol=1e-6)

    @pytest.mark.parametrize("op_name", ["matmul", "add_bias", "relu", "sigmoid",
                                         "concat", "gather", "pool", "slices"])
    def test_randomized_finite_difference_checks(self, op_name):
        # 100 random instances per differentiable op, rel. tol 1e-4, h = 1e-5
        rng = np.random.default_rng(hash(op_name) % 2 ** 32)
        for _ in range(100):
            n, d = int(rng.integers(2, 6)), int(rng.integers(2, 5))
            x0 = rng.normal(size=(n, d))
            if op_name in ("relu", "pool"):  # keep away from kinks and ties
                x0 = x0 + 0.05 * np.sign(x0) + rng.normal(size=x0.shape) * 0.01
            w = rng.normal(size=(d, 3))
            bias = rng.normal(size=(1, d))
            idx = rng.integers(0, n, size=2 * n)
            n_groups = int(rng.integers(1, n + 1))
            groups = np.concatenate([rng.integers(0, n_groups, size=n - n_groups),
                                     np.arange(n_groups)])
            rng.shuffle(groups)

            def build(x):
                if op_name == "matmul":
                    return ad.matmul(x, Tensor(w))
                if op_name == "add_bias":
                    return ad.add(x, Tensor(bias))
                if op_name == "relu":
                    return ad.relu(x)
                if op_name == "sigmoid":
                    return ad.sigmoid(x)
                if op_name == "concat":
                    return ad.concat_rows([ad.concat_cols([x, x]),
                                           ad.concat_cols([x, x])])
                if op_name == "gather":
                    return ad.gather_rows(x, idx)
                if op_name == "pool":
                    return ad.row_max_pool_grouped(x, groups, n_groups)
                if op_name == "slices":
                    return ad.concat_cols([ad.slice_cols(x, 0, d - 1),
                                           ad.slice_cols(x, d - 1, d),
                                           ad.slice_rows(ad.concat_rows([x, x]), 0, n)])
                raise AssertionError(op_name)

            weights = rng.normal(size=build(Tensor(x0)).shape)

            def scalar(x_data):
                return float((build(Tensor(x_data)).data * weights).sum())

            x = Tensor(x0)
            ad.sum_all(_elementwise_mul(build(x), Tensor(weights))).backward()
            assert_grad_close(x.grad, finite_difference(scalar, x0))


def _elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def backward(grad):
        a._accumulate(grad * b.data, own=True)
        b._accumulate(grad * a.data, own=True)

    out._backward = backward
    return out


class TestLosses:
    def test_bce_analytic_value(self):
        loss = ad.binary_cross_entropy_with_logits(Tensor([[0.0]]), np.array([1.0]))
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_softmax_ce_uniform(self):
        logits = Tensor(np.zeros((1, 28)))
        loss = ad.softmax_cross_entropy(logits, np.array([5]), np.ones(1, bool))
        assert loss.item() == pytest.approx(math.log(28.0), rel=1e-12)

    def test_softmax_matches_naive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            n, c = int(rng.integers(1, 8)), int(rng.integers(2, 7))
            logits = rng.normal(size=(n, c)) * 3
            targets = rng.integers(0, c, size=n)
            mask = rng.random(n) < 0.7
            if not mask.any():
                mask[0] = True
            # naive softmax-then-log oracle
            probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
            naive = -np.log(probs[np.arange(n), targets])[mask].mean()
            ours = ad.softmax_cross_entropy(Tensor(logits), targets, mask).item()
            assert abs(ours - naive) < 1e-10

    def test_bce_matches_naive_sigmoid_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            logits = rng.uniform(-15, 15, size=(6, 1))
            targets = (rng.random(6) < 0.5).astype(float)
            s = 1.0 / (1.0 + np.exp(-logits[:, 0]))
            naive = -(targets * np.log(s) + (1 - targets) * np.log(1 - s)).mean()
            ours = ad.binary_cross_entropy_with_logits(Tensor(logits), targets).item()
            assert abs(ours - naive) < 1e-9

    def test_all_masked_is_zero_with_zero_gradient(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        loss = ad.softmax_cross_entropy(logits, np.zeros(4, int), np.zeros(4, bool))
        assert loss.item() == 0.0
        loss.backward()
        assert logits.grad is None or not logits.grad.any()

    def test_empty_bce_is_zero(self):
        loss = ad.binary_cross_entropy_with_logits(Tensor(np.zeros((0, 1))), np.zeros(0))
        assert loss.item() == 0.0

    def test_loss_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            logits0 = rng.normal(size=(5, 4))
            targets = rng.integers(0, 4, size=5)
            mask = np.ones(5, bool)

            def ce(x):
                return ad.softmax_cross_entropy(Tensor(x), targets, mask).item()

            t = Tensor(logits0)
            ad.softmax_cross_entropy(t, targets, mask).backward()
            assert_grad_close(t.grad, finite_difference(ce, logits0))

            blogits0 = rng.normal(size=(6, 1))
            btargets = (rng.random(6) < 0.5).astype(float)

            def bce(x):
                return ad.binary_cross_entropy_with_logits(Tensor(x), btargets).item()

            bt = Tensor(blogits0)
            ad.binary_cross_entropy_with_logits(bt, btargets).backward()
            assert_grad_close(bt.grad, finite_difference(bce, blogits0))

    def test_losses_permutation_invariant_over_rows(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(7, 4))
        targets = rng.integers(0, 4, size=7)
        mask = rng.random(7) < 0.8
        perm = rng.permutation(7)
        a = ad.softmax_cross_entropy(Tensor(logits), targets, mask).item()
        b = ad.softmax_cross_entropy(Tensor(logits[perm]), targets[perm], mask[perm]).item()
        assert a == pytest.approx(b, rel=1e-12)


class TestMlp:
    def test_two_layer_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        mlp = Mlp(4, 8, 3, rng)
        x0 = rng.normal(size=(5, 4))
        weights = rng.normal(size=(5, 3))

        def loss_fn():
            out = mlp(Tensor(x0))
            return ad.sum_all(_elementwise_mul(out, Tensor(weights)))

        loss_fn().backward()
        for param in mlp.parameters():
            analytic = param.grad.copy()
            saved = param.data.copy()

            def scalar(p):
                param.data = p
                val = loss_fn().item()
                param.data = saved
                return val

            numeric = finite_difference(scalar, saved)
            assert_grad_close(analytic, numeric)


class TestOptimizers:
    def test_madgrad_single_step_descends(self):
        x = Tensor([[1.0]])
        opt = Madgrad([x], lr=0.1, momentum=1.0)
        x.grad = 2.0 * x.data
        opt.step()
        assert x.data[0, 0] < 1.0

    def test_madgrad_converges_on_quadratic(self):
        x = Tensor(np.zeros((1, 3)))
        opt = Madgrad([x], lr=1e-1)
        for _ in range(500):
            x.grad = 2.0 * (x.data - 3.0)
            opt.step()
        assert np.abs(x.data - 3.0).max() < 1e-3

    def test_madgrad_zero_gradient_fixed_point(self):
        x = Tensor([[5.0, -2.0]])
        opt = Madgrad([x], lr=0.5)
        for _ in range(10):
            x.grad = np.zeros_like(x.data)
            opt.step()
        np.testing.assert_array_equal(x.data, [[5.0, -2.0]])

    def test_madgrad_state_round_trip(self):
        x = Tensor([[1.0, 2.0]])
        opt = Madgrad([x], lr=0.05, momentum=0.3)
        for _ in range(3):
            x.grad = x.data.copy()
            opt.step()
        state = opt.state_dict()
        x2 = Tensor(x.data.copy())
        opt2 = Madgrad([x2], lr=0.05, momentum=0.3)
        opt2.load_state_dict(state)
        x.grad = np.ones_like(x.data)
        x2.grad = np.ones_like(x2.data)
        opt.step()
        opt2.step()
        np.testing.assert_array_equal(x.data, x2.data)

    def test_adam_converges_on_quadratic(self):
        x = Tensor(np.zeros((1, 3)))
        opt = Adam([x], lr=0.05)
        for _ in range(800):
            x.grad = 2.0 * (x.data - 3.0)
            opt.step()
        assert np.abs(x.data - 3.0).max() < 1e-3

    def test_invalid_settings_rejected(self):
        x = Tensor([[0.0]])
        with pytest.raises(ValueError):
            Madgrad([x], lr=-1.0)
        with pytest.raises(ValueError):
            Madgrad([x], lr=0.1, momentum=0.0)
        with pytest.raises(ValueError):
            ad.make_optimizer("sgd", [x], lr=0.1)
