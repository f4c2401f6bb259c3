import numpy as np
import pytest
from scipy.signal import correlate

from helpers import away_from, check_grad

from phunet import autodiff as ad
from phunet.autodiff import Tensor
from phunet.errors import ContractError, DimensionError

TOL = 1e-4
rng = np.random.default_rng(1234)


def reference_conv(x, w, b=None):
    """Edge-padded 'same' cross-correlation via scipy, one channel pair at a time."""
    k = w.shape[-1]
    before, after = (k - 1) // 2, k - 1 - (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)), mode="edge")
    out = np.zeros((x.shape[0], w.shape[0]) + x.shape[2:])
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for i in range(x.shape[1]):
                out[n, o] += correlate(xp[n, i], w[o, i], mode="valid")
    if b is not None:
        out += b[None, :, None, None]
    return out


class TestEngine:
    def test_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        y = ad.tsum(x * x + x * 3.0)
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 3)

    def test_leaf_grads_accumulate_across_calls(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        ad.tsum(x * 2.0).backward()
        ad.tsum(x * 2.0).backward()
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    def test_diamond_graph(self):
        x = Tensor(np.array(0.7), requires_grad=True)
        a = ad.exp(x)
        y = a * a + a
        y.backward()
        ea = np.exp(0.7)
        assert x.grad == pytest.approx(2 * ea * ea + ea)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_backward_without_grad_inputs(self):
        with pytest.raises(ContractError):
            ad.tsum(Tensor(np.ones(3))).backward()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.tsum(ad.exp(x))
        assert not y.requires_grad and y._backward is None

    def test_graph_released_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.tsum(ad.exp(x))
        y.backward()
        assert y._parents == () and y._backward is None

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert x.grad == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_float32_preserved(self):
        x = Tensor(np.ones((1, 1, 8, 8), np.float32), requires_grad=True)
        w = Tensor(np.ones((2, 1, 3, 3), np.float32), requires_grad=True)
        y = ad.relu(ad.conv2d(x, w))
        assert y.dtype == np.float32


class TestElementwiseGradients:
    def test_add_sub_mul(self):
        a, b = rng.standard_normal((2, 3, 4))
        assert check_grad(lambda x, y: ad.add(x, y), a, b) < TOL
        assert check_grad(lambda x, y: ad.sub(x, y), a, b) < TOL
        assert check_grad(lambda x, y: ad.mul(x, y), a, b) < TOL
        assert check_grad(lambda x: ad.neg(x) * 2.5 - 1.0, a) < TOL

    def test_unary(self):
        a = rng.standard_normal((3, 5))
        pos = np.abs(a) + 0.5
        assert check_grad(ad.square, a) < TOL
        assert check_grad(ad.exp, a) < TOL
        assert check_grad(ad.log, pos) < TOL
        assert check_grad(ad.sqrt, pos) < TOL
        assert check_grad(ad.sigmoid, a * 4) < TOL
        assert check_grad(ad.softplus, a * 4) < TOL

    def test_kinked_ops_away_from_kinks(self):
        a = away_from(rng.standard_normal((4, 6)), [0.0], 1e-3)
        assert check_grad(ad.relu, a) < TOL
        assert check_grad(ad.absolute, a) < TOL

    def test_saturated_softplus_and_sigmoid(self):
        a = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
        t = Tensor(a, requires_grad=True)
        y = ad.tsum(ad.softplus(t))
        assert np.isfinite(y.item())
        y.backward()
        np.testing.assert_allclose(t.grad, [0, 1 / (1 + np.exp(40)), 0.5, 1 / (1 + np.exp(-40)), 1])


class TestStructuralGradients:
    def test_reductions(self):
        a = rng.standard_normal((2, 3, 4))
        assert check_grad(ad.tsum, a) < TOL
        assert check_grad(lambda x: ad.tsum(x, axis=1), a) < TOL
        assert check_grad(ad.mean, a) < TOL
        assert check_grad(lambda x: ad.mean(x, axis=(0, 2)), a) < TOL

    def test_reshape_getitem_concat(self):
        a, b = rng.standard_normal((2, 2, 3, 4))
        assert check_grad(lambda x: x.reshape(6, 4), a) < TOL
        assert check_grad(lambda x: x[:, 1:, ::2], a) < TOL
        assert check_grad(lambda x, y: ad.concat([x, y], axis=1), a, b) < TOL

    def test_broadcast_spatial(self):
        r = rng.standard_normal((2, 3))
        assert check_grad(lambda t: ad.broadcast_spatial(t, 4, 5), r) < TOL

    def test_linear(self):
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)
        assert check_grad(ad.linear, x, w, b) < TOL
        assert check_grad(ad.linear, x, w) < TOL

    def test_pooling(self):
        x = rng.standard_normal((2, 3, 8, 8))
        assert check_grad(ad.avgpool2d, x) < TOL
        assert check_grad(ad.global_avgpool, x) < TOL
        np.testing.assert_allclose(ad.avgpool2d(Tensor(x)).data,
                                   x.reshape(2, 3, 4, 2, 4, 2).mean(axis=(3, 5)))


# Kernel sizes and channel counts exercising every convolution code path:
# pointwise, unrolled patches, shifted-window products and FFT correlation.
CONV_CASES = [(1, 1, 1), (1, 3, 3), (2, 2, 4), (1, 4, 16), (5, 3, 3), (6, 2, 7),
              (4, 3, 2), (5, 2, 16), (4, 1, 9)]


class TestConv2d:
    @pytest.mark.parametrize("cin,cout,k", CONV_CASES)
    def test_forward_matches_scipy(self, cin, cout, k):
        x = rng.standard_normal((2, cin, 16, 16))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, reference_conv(x, w, b), atol=1e-10)

    @pytest.mark.parametrize("cin,cout,k", CONV_CASES)
    def test_gradients(self, cin, cout, k):
        size = 8 if k < 9 else 16
        x = rng.standard_normal((2, cin, size, size))
        w = rng.standard_normal((cout, cin, k, k)) * 0.3
        b = rng.standard_normal(cout)
        assert check_grad(ad.conv2d, x, w, b) < TOL

    def test_same_padding_split(self):
        assert ad.same_padding(3) == (1, 1)
        assert ad.same_padding(16) == (7, 8)
        assert ad.same_padding(1) == (0, 0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((1, 3, 3, 3))))

    def test_float32_close_to_float64(self):
        x = rng.standard_normal((2, 8, 32, 32))
        w = rng.standard_normal((4, 8, 7, 7)) * 0.1
        o64 = ad.conv2d(Tensor(x), Tensor(w)).data
        o32 = ad.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32))).data
        np.testing.assert_allclose(o32, o64, atol=1e-4)
