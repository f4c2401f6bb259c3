"""Synthetic phantoms with known multiplicative bias fields.

Each phantom has a clean slice Y, a smooth positive bias b and the biased
slice X = Y * b, together with exact tissue and background masks. The ideal
scalar field is therefore 1 / b.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .wht import check_power_of_two

BIAS_RANGE = (0.6, 1.5)
MAX_BIAS_DEGREE = 3
MIN_SIZE = 32
ORGAN_AXES = (0.7, 0.85)
ZONE_RADIUS = (0.08, 0.14)
NOISE_LEVEL = 0.01
# Higher-degree terms are damped so most of the range falls across the organ.
DEGREE_DECAY = 0.2
STRENGTH_RANGE = (0.8, 1.0)
MANIFEST_VERSION = 1


@dataclass
class Phantom:
    clean: np.ndarray
    biased: np.ndarray
    bias: np.ndarray
    tissue_mask: np.ndarray
    background_mask: np.ndarray

    @property
    def ideal_field(self):
        return 1.0 / self.bias


def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (ca * dx + sa * dy) / rx
    v = (-sa * dx + ca * dy) / ry
    return u * u + v * v


def gen_phantom(rng, size):
    """Clean phantom: dark background and an elliptical organ with texture zones.

    The organ holds 2-4 zones whose intensity differs from the surrounding
    tissue by 20-40%, so tissue is deliberately not uniform. Returns a
    :class:`Phantom` with a unit bias (``biased`` equals ``clean``).
    """
    size = int(size)
    check_power_of_two(size, "phantom size")
    if size < MIN_SIZE:
        raise ContractError(f"phantom size must be >= {MIN_SIZE}, got {size}")
    yy, xx = _grid(size)
    cy, cx = rng.uniform(-0.1, 0.1, 2)
    ry, rx = rng.uniform(*ORGAN_AXES, 2)
    angle = rng.uniform(0.0, np.pi)
    r2 = _ellipse(yy, xx, cy, cx, ry, rx, angle)
    tissue = r2 <= 1.0
    # A guard ring keeps the masks disjoint and away from the organ edge.
    background = r2 > 1.15 ** 2

    base = rng.uniform(0.55, 0.7)
    clean = np.full((size, size), base)
    for _ in range(rng.integers(2, 5)):
        # Zone centre inside the organ, in the organ's own frame.
        rad = 0.6 * np.sqrt(rng.uniform())
        phi = rng.uniform(0.0, 2.0 * np.pi)
        zy = cy + rad * ry * np.sin(phi)
        zx = cx + rad * rx * np.cos(phi)
        zr = rng.uniform(*ZONE_RADIUS, 2) * np.array([ry, rx])
        zone = _ellipse(yy, xx, zy, zx, zr[0], zr[1], rng.uniform(0.0, np.pi)) <= 1.0
        contrast = rng.uniform(0.2, 0.4) * rng.choice([-1.0, 1.0])
        clean[zone] = base * (1.0 + contrast)
    clean *= 1.0 + NOISE_LEVEL * rng.standard_normal((size, size))
    bg_level = np.clip(0.015 + 0.005 * rng.standard_normal((size, size)), 0.0, 0.04)
    clean = np.where(tissue, clean, bg_level)
    clean = np.clip(clean, 0.0, 1.0)
    tissue_mask = tissue.copy()
    return Phantom(clean, clean.copy(), np.ones_like(clean), tissue_mask, background)


def _exponents():
    return [(i, j) for i in range(MAX_BIAS_DEGREE + 1)
            for j in range(MAX_BIAS_DEGREE + 1 - i) if i + j > 0]


def _monomials(size):
    yy, xx = _grid(size)
    return [xx ** i * yy ** j for i, j in _exponents()]


def bias_from_polynomial(coeffs, size, mask=None, scale=1.0):
    """``exp(scale * P)`` normalized to unit mean over ``mask`` (whole image if None).

    ``coeffs`` holds the 9 non-constant coefficients of a total-degree-3
    polynomial in x and y on [-1, 1]; the constant term is fixed by the
    normalization.
    """
    mono = _monomials(size)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (len(mono),):
        raise ContractError(f"expected {len(mono)} coefficients, got {coeffs.shape}")
    p = np.zeros((size, size))
    for c, m in zip(coeffs, mono):
        p += c * m
    b = np.exp(scale * p)
    region = b if mask is None else b[np.asarray(mask, dtype=bool)]
    return b / region.mean()


def _in_range(b):
    return b.min() >= BIAS_RANGE[0] and b.max() <= BIAS_RANGE[1]


def gen_bias(rng, size, mask=None, strength=None):
    """Random smooth bias field with values in [0.6, 1.5] and unit mean over ``mask``.

    The polynomial is scaled to the largest amplitude that respects the
    range, times ``strength`` (drawn from ``STRENGTH_RANGE`` when not given).
    """
    size = int(size)
    check_power_of_two(size, "bias size")
    decay = np.array([DEGREE_DECAY ** (i + j - 1) for i, j in _exponents()])
    coeffs = rng.standard_normal(len(decay)) * decay
    if strength is None:
        strength = rng.uniform(*STRENGTH_RANGE)
    lo, hi = 0.0, 1.0
    while _in_range(bias_from_polynomial(coeffs, size, mask, hi)) and hi < 1e3:
        lo, hi = hi, 2.0 * hi
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if _in_range(bias_from_polynomial(coeffs, size, mask, mid)):
            lo = mid
        else:
            hi = mid
    return bias_from_polynomial(coeffs, size, mask, lo * strength)


def apply_bias(phantom, bias):
    bias = np.asarray(bias, dtype=np.float64)
    return Phantom(phantom.clean, phantom.clean * bias, bias,
                   phantom.tissue_mask, phantom.background_mask)


def item_rng(seed, index):
    """Independent stream for item ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def make_phantom(seed, index, size):
    rng = item_rng(seed, index)
    ph = gen_phantom(rng, size)
    return apply_bias(ph, gen_bias(rng, size, ph.tissue_mask))


def make_dataset(seed, n, size, start=0):
    """``n`` biased phantoms and a manifest sufficient to regenerate them."""
    if n < 1:
        raise ContractError("dataset needs at least one item")
    check_power_of_two(size, "image size")
    items = [{"id": f"ph{start + i:05d}", "seed": int(seed), "index": start + i}
             for i in range(n)]
    phantoms = [make_phantom(it["seed"], it["index"], size) for it in items]
    manifest = {"version": MANIFEST_VERSION, "size": int(size), "items": items}
    return phantoms, manifest


def replay_manifest(manifest):
    size = manifest["size"]
    return [make_phantom(it["seed"], it["index"], size) for it in manifest["items"]]
