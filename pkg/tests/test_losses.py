import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_grad

from phunet import autodiff as ad
from phunet.autodiff import Tensor
from phunet.errors import ContractError, DimensionError
from phunet.losses import (LossWeights, kl_gaussian, kl_sparsity, loss_components, mse_loss,
                           total_loss, tv_loss)
from phunet.model import LatentGaussian

TOL = 1e-4


def gaussian(mean, var):
    return LatentGaussian(Tensor(np.asarray(mean, float)), Tensor(np.asarray(var, float)))


def log_density(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var).sum(axis=-1)


def monte_carlo_kl(f, g, n, rng):
    """Sample estimate of KL(F||G) and its standard error."""
    fm, fv = f
    x = fm + np.sqrt(fv) * rng.standard_normal((n, fm.size))
    r = log_density(x, fm, fv) - log_density(x, *g)
    return r.mean(), r.std() / np.sqrt(n)


class TestGaussianKL:
    def test_identical_is_zero(self):
        f = gaussian([0.3, -1.0], [0.5, 2.0])
        assert kl_gaussian(f, f).item() == pytest.approx(0.0, abs=1e-15)

    def test_unit_shift(self):
        assert kl_gaussian(gaussian([1.0], [1.0]), gaussian([0.0], [1.0])).item() == pytest.approx(0.5)

    def test_variance_ratio(self):
        value = kl_gaussian(gaussian([0.0], [2.0]), gaussian([0.0], [1.0])).item()
        assert value == pytest.approx((2 - 1 - math.log(2)) / 2, rel=1e-12)

    def test_batch_mean_of_sums(self):
        rng = np.random.default_rng(0)
        fm, gm = rng.standard_normal((2, 4, 3))
        fv, gv = rng.uniform(0.2, 2, (2, 4, 3))
        per = 0.5 * (np.log(gv / fv) + (fv + (fm - gm) ** 2) / gv - 1).sum(axis=1)
        assert kl_gaussian(gaussian(fm, fv), gaussian(gm, gv)).item() == pytest.approx(per.mean())

    def test_nonpositive_variance(self):
        with pytest.raises(ContractError):
            kl_gaussian(gaussian([0.0], [0.0]), gaussian([0.0], [1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            kl_gaussian(gaussian([0.0, 1.0], [1.0, 1.0]), gaussian([0.0], [1.0]))

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            d = rng.integers(1, 7)
            fm, gm = rng.standard_normal((2, d))
            fv, gv = rng.uniform(0.3, 2.0, (2, d))
            est, se = monte_carlo_kl((fm, fv), (gm, gv), 200_000, rng)
            exact = kl_gaussian(gaussian(fm, fv), gaussian(gm, gv)).item()
            assert abs(est - exact) < 3 * se

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        fm, gm = rng.standard_normal((2, 5))
        fv, gv = rng.uniform(0.05, 5.0, (2, 5))
        assert kl_gaussian(gaussian(fm, fv), gaussian(gm, gv)).item() >= -1e-12

    def test_gradients(self):
        rng = np.random.default_rng(1)
        fm, gm = rng.standard_normal((2, 3, 4))
        fv, gv = rng.uniform(0.3, 2.0, (2, 3, 4))

        def op(a, b, c, d):
            return kl_gaussian(LatentGaussian(a, b), LatentGaussian(c, d))

        assert check_grad(op, fm, fv, gm, gv) < TOL


class TestSparsityKL:
    def test_zero_at_target(self):
        beta = 0.05
        z = math.log(beta / (1 - beta))
        assert kl_sparsity(z, beta).item() == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_case(self):
        assert kl_sparsity(0.0, 0.5).item() == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        expected = 0.05 * math.log(0.1) + 0.95 * math.log(1.9)
        assert kl_sparsity(0.0, 0.05).item() == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
    def test_beta_range(self, beta):
        with pytest.raises(ContractError):
            kl_sparsity(0.0, beta)

    def test_finite_when_saturated(self):
        for z in (-800.0, 800.0):
            assert np.isfinite(kl_sparsity(z, 0.05).item())

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-30, 30), st.floats(0.01, 0.99))
    def test_nonnegative(self, z, beta):
        assert kl_sparsity(z, beta).item() >= -1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.001, 0.999), st.floats(0.001, 0.999), st.floats(0.01, 0.99))
    def test_convex_in_rho(self, r1, r2, beta):
        def kl_rho(rho):
            return kl_sparsity(math.log(rho / (1 - rho)), beta).item()

        mid = kl_rho(0.5 * (r1 + r2))
        assert mid <= 0.5 * (kl_rho(r1) + kl_rho(r2)) + 1e-9

    def test_gradient(self):
        assert check_grad(lambda z: kl_sparsity(z, 0.05), np.array(0.7)) < TOL


class TestTV:
    def test_constant_is_zero(self):
        assert tv_loss(np.full((5, 5), 3.0)).item() == 0

    def test_hand_value(self):
        assert tv_loss(np.array([[0.0, 1.0], [0.0, 1.0]])).item() == 0.5

    def test_single_pixel(self):
        assert tv_loss(np.ones((1, 1))).item() == 0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(-10, 10))
    def test_homogeneous(self, seed, alpha):
        u = np.random.default_rng(seed).standard_normal((6, 7))
        assert tv_loss(alpha * u).item() == pytest.approx(abs(alpha) * tv_loss(u).item(), abs=1e-12)

    def test_batch_is_averaged(self):
        u = np.random.default_rng(2).standard_normal((3, 1, 4, 4))
        each = [tv_loss(u[i, 0]).item() for i in range(3)]
        assert tv_loss(u).item() == pytest.approx(np.mean(each))

    def test_gradient(self):
        u = np.random.default_rng(3).standard_normal((2, 1, 5, 5))
        assert check_grad(tv_loss, u) < TOL


class TestMSE:
    def test_values(self):
        y = np.random.default_rng(4).standard_normal((3, 4))
        assert mse_loss(y, y).item() == 0
        assert mse_loss(y + 1, y).item() == pytest.approx(1.0)

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(5)
        o, y = rng.standard_normal((2, 4, 4))
        t = Tensor(o, requires_grad=True)
        mse_loss(t, Tensor(y)).backward()
        np.testing.assert_allclose(t.grad, 2 * (o - y) / o.size, rtol=1e-12)
        assert check_grad(lambda a: mse_loss(a, Tensor(y)), o) < TOL

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(np.ones((2, 2)), np.ones((2, 3)))


def small_instance(seed=0):
    rng = np.random.default_rng(seed)
    post = gaussian(rng.standard_normal((2, 3)), rng.uniform(0.5, 1.5, (2, 3)))
    prior = gaussian(rng.standard_normal((2, 3)), rng.uniform(0.5, 1.5, (2, 3)))
    spectra = [Tensor(rng.standard_normal((2, 4, 8, 8))), Tensor(rng.standard_normal((2, 8, 8, 8)))]
    u = Tensor(rng.uniform(0.5, 1.5, (2, 1, 8, 8)))
    o, y = Tensor(rng.standard_normal((2, 1, 8, 8))), Tensor(rng.standard_normal((2, 1, 8, 8)))
    return post, prior, spectra, u, o, y


class TestTotalLoss:
    def test_defaults(self):
        w = LossWeights()
        assert (w.kl, w.sparsity, w.tv, w.mse, w.beta) == (10, 0.1, 1, 1, 0.05)

    def test_invalid_weights(self):
        with pytest.raises(ContractError):
            LossWeights(tv=-1)
        with pytest.raises(ContractError):
            LossWeights(beta=1.0)

    def test_all_zero_weights(self):
        total, _ = total_loss(*small_instance(), LossWeights(0, 0, 0, 0))
        assert total.item() == 0

    def test_only_mse_with_perfect_output(self):
        post, prior, spectra, u, o, y = small_instance()
        total, _ = total_loss(post, prior, spectra, u, y, y, LossWeights(0, 0, 0, 1))
        assert total.item() == 0

    def test_equals_hand_sum(self):
        post, prior, spectra, u, o, y = small_instance(1)
        w = LossWeights(kl=2.0, sparsity=0.3, tv=0.7, mse=1.3, beta=0.1)
        total, _ = total_loss(post, prior, spectra, u, o, y, w)
        fm, fv, gm, gv = post.mean.data, post.var.data, prior.mean.data, prior.var.data
        kl = (0.5 * (np.log(gv / fv) + (fv + (fm - gm) ** 2) / gv - 1).sum(axis=1)).mean()
        sparsity = 0.0
        for z in spectra:
            rho = 1 / (1 + np.exp(-z.data.mean()))
            sparsity += 0.1 * np.log(0.1 / rho) + 0.9 * np.log(0.9 / (1 - rho))
        ud = u.data
        tv = (np.abs(np.diff(ud, axis=3)).sum() + np.abs(np.diff(ud, axis=2)).sum()) / ud.size
        mse = ((o.data - y.data) ** 2).mean()
        expected = 2.0 * kl + 0.3 * sparsity + 0.7 * tv + 1.3 * mse
        assert total.item() == pytest.approx(expected, abs=1e-12)

    def test_linear_in_each_weight(self):
        inst = small_instance(2)
        comps = {k: v.item() for k, v in loss_components(*inst, LossWeights()).items()}
        for name in ("kl", "sparsity", "tv", "mse"):
            values = [total_loss(*inst, LossWeights(**{**dict(kl=0, sparsity=0, tv=0, mse=0),
                                                       name: lam}))[0].item()
                      for lam in (0.0, 1.0, 2.5)]
            np.testing.assert_allclose(values, [0.0, comps[name], 2.5 * comps[name]], rtol=1e-12)

    def test_backward_reaches_every_input(self):
        post, prior, spectra, u, o, y = small_instance(3)
        leaves = [post.mean, post.var, prior.mean, prior.var, *spectra, u, o]
        for t in leaves:
            t.requires_grad = True
        total, _ = total_loss(post, prior, spectra, u, o, y, LossWeights())
        total.backward()
        assert all(t.grad is not None and np.all(np.isfinite(t.grad)) for t in leaves)
        assert ad.tsum(Tensor(np.zeros(1))).item() == 0
