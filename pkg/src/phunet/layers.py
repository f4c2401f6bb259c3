"""Transform-domain layers: trainable scaling and hard thresholding.

The threshold gradient needs a convention. Written literally, the hard
threshold ``C_T(x) + sign(C_T(x)) * T`` (with ``C_T`` the soft threshold) has
a derivative in ``T`` that is identically zero, because the ``-T`` inside
``C_T`` and the restored ``+T`` cancel. Thresholds would then never move. Here
the restoration term is forward-only: the value is exact hard thresholding,
``x * 1[|x| > t]``, while the gradient in ``t`` is the soft-threshold one,
``-sign(x) * 1[|x| > t]``.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _make
from .errors import ContractError, DimensionError
from .wht import ORTHO, Spectrum, ht2d_array


def _as_array(s):
    return s.coeffs if isinstance(s, Spectrum) else np.asarray(s, dtype=np.float64)


def _wrap_like(s, values):
    if isinstance(s, Spectrum):
        return Spectrum(values, s.ordering, s.norm_convention)
    return values


def scaling_layer(s, w):
    """Elementwise product ``W * s`` of a spectrum with scaling weights."""
    x = _as_array(s)
    w = np.asarray(w, dtype=np.float64)
    if x.shape != w.shape:
        raise DimensionError(f"scaling weights {w.shape} do not match spectrum {x.shape}")
    return _wrap_like(s, w * x)


def soft_threshold(s, t):
    """``sign(x) * max(|x| - t, 0)``."""
    x = _as_array(s)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ContractError("thresholds must be non-negative")
    return _wrap_like(s, np.sign(x) * np.maximum(np.abs(x) - t, 0.0))


def hard_threshold_layer(s, t):
    """Soft threshold plus the restored magnitude ``sign(C) * t``.

    Equal to ``x * 1[|x| > t]``; ``|x| == t`` maps to 0. Evaluated in that
    masked form because the literal sum ``(|x| - t) + t`` can be off by one ulp.
    """
    x = _as_array(s)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ContractError("thresholds must be non-negative")
    return _wrap_like(s, np.where(np.abs(x) > t, x, 0.0))


# ----------------------------------------------------------- autodiff versions


def _check_channel_param(x, p, what):
    if x.ndim != 4 or p.shape != x.shape[1:]:
        raise DimensionError(f"{what} of shape {p.shape} does not fit input {x.shape}")


def hadamard2d(x):
    """Differentiable ``(1/M) H x H`` over the last two axes.

    The transform is symmetric and orthonormal, so its adjoint is itself.
    """
    return _make(ht2d_array(x.data), (x,), lambda g: (ht2d_array(g),))


def scale(x, w):
    """x (B, C, M, M) times per-channel weights w (C, M, M)."""
    _check_channel_param(x, w, "scaling weights")
    xd, wd = x.data, w.data

    def backward(g):
        return g * wd, (g * xd).sum(axis=0)

    return _make(xd * wd, (x, w), backward)


def soft_threshold_op(x, t):
    """Differentiable soft threshold with per-channel thresholds t (C, M, M)."""
    _check_channel_param(x, t, "thresholds")
    xd, td = x.data, t.data
    keep = np.abs(xd) > td
    sgn = np.sign(xd)
    out = sgn * np.maximum(np.abs(xd) - td, 0)

    def backward(g):
        gk = g * keep
        return gk, -(gk * sgn).sum(axis=0)

    return _make(out.astype(xd.dtype, copy=False), (x, t), backward)


def hard_threshold(x, t):
    """Differentiable hard threshold, see the module docstring for gradients."""
    _check_channel_param(x, t, "thresholds")
    xd, td = x.data, t.data
    keep = np.abs(xd) > td
    sgn = np.sign(xd)

    def backward(g):
        gk = g * keep
        return gk, -(gk * sgn).sum(axis=0)

    return _make(np.where(keep, xd, 0).astype(xd.dtype), (x, t), backward)


def mean_activation(z):
    """Mean of a thresholded spectrum batch over every axis."""
    if z.size == 0:
        raise ContractError("mean_activation of an empty batch")
    return ad.mean(z)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) loses precision for large y; y + log1p(-exp(-y)) does not.
    return y + np.log(-np.expm1(-y))


class HTBlock:
    """Per-channel ``iht(hard_threshold(W * ht(x), T))`` block.

    Thresholds are stored as unconstrained ``theta`` with ``T = softplus(theta)``,
    which keeps them positive without clipping.
    """

    def __init__(self, channels, size, init_threshold=1e-3, dtype=np.float64, name="ht"):
        self.channels = channels
        self.size = size
        self.weight = Tensor(np.ones((channels, size, size)), True, f"{name}.W", dtype)
        theta = np.full((channels, size, size), inverse_softplus(init_threshold))
        self.theta = Tensor(theta, True, f"{name}.theta", dtype)

    def parameters(self):
        return [self.weight, self.theta]

    def thresholds(self):
        return ad.softplus(self.theta)

    def __call__(self, x):
        if x.ndim != 4 or x.shape[1:] != (self.channels, self.size, self.size):
            raise DimensionError(
                f"HT block expects (B, {self.channels}, {self.size}, {self.size}), got {x.shape}"
            )
        spec = hadamard2d(x)
        z = hard_threshold(scale(spec, self.weight), self.thresholds())
        return hadamard2d(z), z


__all__ = [
    "ORTHO",
    "HTBlock",
    "hadamard2d",
    "hard_threshold",
    "hard_threshold_layer",
    "inverse_softplus",
    "mean_activation",
    "scale",
    "scaling_layer",
    "soft_threshold",
    "soft_threshold_op",
]
