"""Fast Walsh-Hadamard transforms.

Natural (Hadamard) ordering is used everywhere; :func:`sequency_permutation`
exists for diagnostics such as measuring low-sequency energy.

Two normalizations are exposed:

``"unnormalized"``
    ``fwht(v) = H v`` with ``H`` the +-1 natural-order Hadamard matrix. The
    dyadic convolution theorem holds without extra factors:
    ``fwht(m *d n) = fwht(m) * fwht(n)`` and ``fwht(fwht(v)) = M v``.
``"ortho_eq1"``
    The 2D transform ``(1/M) H X H`` used inside the network. For an M x M
    image this is orthonormal, so it is its own inverse and preserves the
    Frobenius norm. In 1D the matching factor is ``1/sqrt(M)``.
"""

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

UNNORMALIZED = "unnormalized"
ORTHO = "ortho_eq1"
NATURAL = "natural"
SEQUENCY = "sequency"


def is_power_of_two(n):
    n = int(n)
    return n >= 1 and (n & (n - 1)) == 0


def check_power_of_two(n, what="length"):
    if not is_power_of_two(n):
        raise DimensionError(f"{what} must be a power of two, got {n}")


def _butterfly(x):
    """Unnormalized transform along axis 1 of a C-contiguous (pre, M, post) array.

    Each stage reads one buffer and writes the other, using only additions and
    subtractions. The trailing axis keeps inner loops long, so callers
    transforming a last axis should swap it forward first.
    """
    pre, m, post = x.shape
    if m == 1:
        return x.copy()
    bufs = (np.empty_like(x), np.empty_like(x))
    cur = x
    h = 1
    stage = 0
    while h < m:
        out = bufs[stage % 2]
        v = cur.reshape(pre, m // (2 * h), 2, h * post)
        w = out.reshape(pre, m // (2 * h), 2, h * post)
        np.add(v[:, :, 0], v[:, :, 1], out=w[:, :, 0])
        np.subtract(v[:, :, 0], v[:, :, 1], out=w[:, :, 1])
        cur = out
        h *= 2
        stage += 1
    return cur


def fwht(x, axis=-1):
    """Unnormalized transform along one axis of an array of any rank."""
    x = np.asarray(x)
    if x.ndim == 0:
        raise DimensionError("fwht needs at least one axis")
    axis = axis % x.ndim
    m = x.shape[axis]
    check_power_of_two(m)
    dtype = np.float64 if x.dtype.kind in "biu" else x.dtype
    if axis == x.ndim - 1 and x.ndim >= 2 and x.shape[-2] > 1:
        # Transform the last axis with the second-to-last as the long inner loop.
        return np.swapaxes(fwht(np.swapaxes(x, -1, -2), axis=x.ndim - 2), -1, -2)
    pre = int(np.prod(x.shape[:axis], dtype=np.int64))
    post = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
    buf = np.ascontiguousarray(x, dtype=dtype).reshape(pre, m, post)
    return _butterfly(buf).reshape(x.shape)


def fwht_1d(v, convention=UNNORMALIZED):
    """Walsh-Hadamard transform of a vector.

    Parameters
    ----------
    v : array_like, shape (M,)
        Input vector, M a power of two.
    convention : {"unnormalized", "ortho_eq1"}
        ``"unnormalized"`` returns ``H v``; ``"ortho_eq1"`` returns
        ``H v / sqrt(M)``.

    Returns
    -------
    ndarray, shape (M,)
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    out = fwht(v)
    if convention == UNNORMALIZED:
        return out
    if convention == ORTHO:
        return out / np.sqrt(v.shape[0])
    raise ValueError(f"unknown convention {convention!r}")


# Sides at least this large use the factored GEMM path in ht2d_array.
_KRON_MIN_SIDE = 128


def _radix_factors(m, max_bits=4):
    bits = m.bit_length() - 1
    out = []
    while bits > 0:
        q = min(max_bits, bits)
        out.append(1 << q)
        bits -= q
    return out


def _ht2d_factored(x):
    """Unnormalized 2D transform via H_M = H_f1 (x) H_f2 (x) ... factors.

    The array is laid out as (sub-axes..., batch). Each pass multiplies the
    leading sub-axis by a small Hadamard matrix and rotates it to the end,
    so after one pass per sub-axis the original layout is restored.
    """
    m = x.shape[-1]
    lead = x.shape[:-2]
    n = int(np.prod(lead, dtype=np.int64))
    cur = np.ascontiguousarray(x.reshape(n, m * m).T)
    for f in _radix_factors(m) * 2:
        h = hadamard_matrix(f).astype(x.dtype)
        cur = cur.reshape(f, -1).T @ h
    return cur.reshape(x.shape)


def ht2d_array(x):
    """``(1/M) H x H`` over the last two axes; leading axes are batched."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"expected square trailing axes, got shape {x.shape}")
    m = x.shape[-1]
    check_power_of_two(m, "side")
    if x.dtype.kind in "biu":
        x = x.astype(np.float64)
    if m >= _KRON_MIN_SIDE:
        out = _ht2d_factored(x)
    else:
        out = fwht(fwht(x, axis=-2), axis=-1)
    return np.multiply(out, 1.0 / m, dtype=out.dtype)


# The ortho_eq1 transform is an involution.
iht2d_array = ht2d_array


@dataclass
class Spectrum:
    """Hadamard-domain coefficient grid."""

    coeffs: np.ndarray
    ordering: str = NATURAL
    norm_convention: str = ORTHO

    def __post_init__(self):
        c = self.coeffs
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimensionError(f"spectrum must be square, got shape {c.shape}")
        check_power_of_two(c.shape[0], "side")

    @property
    def size(self):
        return self.coeffs.shape[0]

    def to_sequency(self):
        if self.ordering == SEQUENCY:
            return self
        p = sequency_permutation(self.size)
        return Spectrum(self.coeffs[np.ix_(p, p)], SEQUENCY, self.norm_convention)

    def to_natural(self):
        if self.ordering == NATURAL:
            return self
        inv = np.argsort(sequency_permutation(self.size))
        return Spectrum(self.coeffs[np.ix_(inv, inv)], NATURAL, self.norm_convention)


def ht_2d(x):
    """2D transform ``(1/M) H x H`` of a square power-of-two image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2D image, got shape {x.shape}")
    return Spectrum(ht2d_array(x))


def iht_2d(s):
    """Inverse of :func:`ht_2d`; accepts a Spectrum in either ordering."""
    s = s.to_natural()
    if s.norm_convention == ORTHO:
        return iht2d_array(s.coeffs)
    if s.norm_convention == UNNORMALIZED:
        m = s.size
        return ht2d_array(s.coeffs) / m
    raise ValueError(f"unknown convention {s.norm_convention!r}")


def dyadic_conv_bruteforce(m, n):
    """O(M^2) dyadic convolution ``out[k] = sum_i m[i] n[k ^ i]``.

    Reference implementation used to test the convolution theorem.
    """
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if m.ndim != 1 or m.shape != n.shape:
        raise DimensionError(f"length mismatch: {m.shape} vs {n.shape}")
    size = m.shape[0]
    check_power_of_two(size)
    out = np.zeros(size)
    for k in range(size):
        for i in range(size):
            out[k] += m[i] * n[k ^ i]
    return out


def dyadic_conv2d_bruteforce(m, n):
    """2D analogue: ``out[k, l] = sum_{i,j} m[i, j] n[k ^ i, l ^ j]``."""
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if m.ndim != 2 or m.shape != n.shape:
        raise DimensionError(f"shape mismatch: {m.shape} vs {n.shape}")
    rows, cols = m.shape
    check_power_of_two(rows, "rows")
    check_power_of_two(cols, "cols")
    ri = np.arange(rows)
    ci = np.arange(cols)
    out = np.zeros_like(m)
    for i in range(rows):
        for j in range(cols):
            out += m[i, j] * n[np.ix_(ri ^ i, ci ^ j)]
    return out


def _bit_reverse(i, bits):
    r = 0
    for _ in range(bits):
        r = (r << 1) | (i & 1)
        i >>= 1
    return r


def _gray_to_binary(g):
    b = 0
    while g:
        b ^= g
        g >>= 1
    return b


def sequency_permutation(m):
    """Natural-order row indices listed in increasing sequency.

    ``H[perm]`` has rows whose sign-change counts are 0, 1, ..., M-1.
    """
    check_power_of_two(m)
    bits = int(m).bit_length() - 1
    seq_of_natural = np.array(
        [_gray_to_binary(_bit_reverse(i, bits)) for i in range(m)], dtype=np.int64
    )
    perm = np.empty(m, dtype=np.int64)
    perm[seq_of_natural] = np.arange(m)
    return perm


@functools.lru_cache(maxsize=32)
def _hadamard_cached(m):
    h = fwht(np.eye(m))
    h.flags.writeable = False
    return h


def hadamard_matrix(m):
    """Natural-order +-1 Hadamard matrix (Sylvester construction)."""
    check_power_of_two(m)
    return _hadamard_cached(int(m)).copy()


def low_sequency_energy_fraction(x, block=8):
    """Share of ``||ht_2d(x)||^2`` inside the lowest-sequency block x block corner."""
    s = ht_2d(x).to_sequency().coeffs
    total = float(np.sum(s * s))
    if total == 0.0:
        return 1.0
    return float(np.sum(s[:block, :block] ** 2)) / total
