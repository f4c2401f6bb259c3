"""Training loss terms and their weighted sum.

Every function accepts autodiff tensors and returns a scalar tensor, so the
same code computes values for reports and gradients for training.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .layers import mean_activation


@dataclass
class LossWeights:
    kl: float = 10.0
    sparsity: float = 0.1
    tv: float = 1.0
    mse: float = 1.0
    beta: float = 0.05

    def __post_init__(self):
        for name in ("kl", "sparsity", "tv", "mse"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be non-negative")
        if not 0.0 < self.beta < 1.0:
            raise ContractError(f"sparsity target beta must lie in (0, 1), got {self.beta}")

    def to_dict(self):
        return asdict(self)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def kl_gaussian(f, g):
    """KL(F || G) for diagonal Gaussians, summed over latent dims, averaged over batch.

    ``f`` and ``g`` are LatentGaussian-like objects with ``mean``/``var``
    tensors of shape (B, D) or (D,).
    """
    fm, fv, gm, gv = _t(f.mean), _t(f.var), _t(g.mean), _t(g.var)
    if fm.shape != gm.shape or fv.shape != gv.shape or fm.shape != fv.shape:
        raise DimensionError(f"latent shapes differ: {fm.shape} vs {gm.shape}")
    if np.any(fv.data <= 0) or np.any(gv.data <= 0):
        raise ContractError("variances must be positive")
    diff = fm - gm
    # 0.5 * [log(gv / fv) + (fv + diff^2) / gv - 1], with 1/gv = exp(-log gv).
    log_gv = ad.log(gv)
    inv_gv = ad.exp(-log_gv)
    terms = (log_gv - ad.log(fv)) + (fv + ad.square(diff)) * inv_gv - 1.0
    per_sample = ad.tsum(terms, axis=-1) * 0.5
    return ad.mean(per_sample) if per_sample.ndim else per_sample


def kl_sparsity(z_bar, beta):
    """Bernoulli KL(beta || sigmoid(z_bar)).

    Written with ``log(sigmoid(z)) = -softplus(-z)`` and
    ``log(1 - sigmoid(z)) = -softplus(z)`` so it stays finite when the
    sigmoid saturates.
    """
    if not 0.0 < beta < 1.0:
        raise ContractError(f"beta must lie in (0, 1), got {beta}")
    z = _t(z_bar)
    const = beta * np.log(beta) + (1.0 - beta) * np.log(1.0 - beta)
    return ad.softplus(-z) * beta + ad.softplus(z) * (1.0 - beta) + const


def tv_loss(u):
    """Anisotropic total variation divided by the pixel count.

    Accepts (H, W) or a batch (B, 1, H, W); a batch is averaged.
    """
    u = _t(u)
    if u.ndim == 2:
        u = u.reshape(1, 1, *u.shape)
    if u.ndim != 4:
        raise DimensionError(f"expected (H, W) or (B, C, H, W), got {u.shape}")
    bsz, c, h, w = u.shape
    if h < 2 and w < 2:
        return Tensor(np.zeros((), dtype=u.dtype))
    total = None
    if w > 1:
        total = ad.tsum(ad.absolute(u[:, :, :, 1:] - u[:, :, :, :-1]))
    if h > 1:
        vert = ad.tsum(ad.absolute(u[:, :, 1:, :] - u[:, :, :-1, :]))
        total = vert if total is None else total + vert
    return total * (1.0 / (bsz * c * h * w))


def mse_loss(o, y):
    o, y = _t(o), _t(y)
    if o.shape != y.shape:
        raise DimensionError(f"mse: shape mismatch {o.shape} vs {y.shape}")
    return ad.mean(ad.square(o - y))


def loss_components(posterior, prior, spectra, field, output, target, weights):
    """Unweighted terms: kl, sparsity (summed over HT blocks), tv, mse."""
    sparsity = None
    for z in spectra:
        term = kl_sparsity(mean_activation(z), weights.beta)
        sparsity = term if sparsity is None else sparsity + term
    if sparsity is None:
        sparsity = Tensor(np.zeros(()))
    return {
        "kl": kl_gaussian(posterior, prior),
        "sparsity": sparsity,
        "tv": tv_loss(field),
        "mse": mse_loss(output, target),
    }


def total_loss(posterior, prior, spectra, field, output, target, weights):
    """Weighted sum of all four terms; returns (total, components)."""
    comps = loss_components(posterior, prior, spectra, field, output, target, weights)
    total = (
        comps["kl"] * weights.kl
        + comps["sparsity"] * weights.sparsity
        + comps["tv"] * weights.tv
        + comps["mse"] * weights.mse
    )
    return total, comps
