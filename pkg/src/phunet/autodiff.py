"""Small reverse-mode autodiff engine over dense numpy arrays.

Only the operations the network needs are provided. Binary elementwise ops
require identical shapes; the single broadcast is :func:`broadcast_spatial`,
which lifts a per-sample vector to constant feature maps.

Each op records its parents and a backward closure on the output tensor.
:meth:`Tensor.backward` walks the graph once in topological order, summing
gradients where a tensor has several consumers, and releases it afterwards.
"""

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy.linalg import blas

from .errors import ContractError, DimensionError

# Upper bound on the number of elements of one im2col block.
_COLS_BUDGET = 1 << 22
# Below this many input channels conv2d uses im2col instead of shifted GEMMs.
_SHIFT_MIN_CHANNELS = 4
# Kernels at least this wide are correlated through the FFT.
_FFT_MIN_KERNEL = 9


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        """Populate ``.grad`` on every leaf that requires it.

        The loss must be a scalar (a single element). Leaf gradients are
        accumulated, so call ``zero_grad`` between steps.
        """
        if self.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root):
    """Parents-before-children order of the nodes that require grad."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _make(data, parents, backward):
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def absolute(a):
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def relu(a):
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def _sigmoid(x):
    # Split by sign to avoid overflow in exp.
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    # max(x, 0) + log1p(exp(-|x|)) is exact and overflow-free.
    out = np.asarray(np.exp(-np.abs(x)))
    np.log1p(out, out=out)
    out += np.maximum(x, 0)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    ad = a.data
    return _make(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),))


# ------------------------------------------------------------------ reductions


def tsum(a, axis=None):
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return mul(tsum(a, axis), 1.0 / n)


# --------------------------------------------------------------------- shaping


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward)


def concat(tensors, axis=1):
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_spatial(r, height, width):
    """Lift ``r`` of shape (B, D) to constant maps of shape (B, D, H, W)."""
    if r.ndim != 2:
        raise DimensionError(f"broadcast_spatial expects (B, D), got {r.shape}")
    b, d = r.shape
    out = np.broadcast_to(r.data[:, :, None, None], (b, d, height, width)).copy()
    return _make(out, (r,), lambda g: (g.sum(axis=(2, 3)),))


# ------------------------------------------------------------------ linear ops


def linear(x, w, b=None):
    """``x @ w + b`` with x (B, Din), w (Din, Dout), b (Dout,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot apply {w.shape} to {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape}")
        out = out + b.data

    def backward(g):
        grads = (g @ wd.T, xd.T @ g)
        if b is not None:
            grads += (g.sum(axis=0),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def same_padding(k):
    """(before, after) padding that keeps the spatial size for a k x k kernel."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _fold_edge_pad(gp, before, after, h, w):
    """Adjoint of ``np.pad(..., mode="edge")`` on the last two axes."""
    g = gp[..., before:before + h, :].copy()
    if before:
        g[..., 0, :] += gp[..., :before, :].sum(axis=-2)
    if after:
        g[..., -1, :] += gp[..., before + h:, :].sum(axis=-2)
    out = g[..., :, before:before + w].copy()
    if before:
        out[..., :, 0] += g[..., :, :before].sum(axis=-1)
    if after:
        out[..., :, -1] += g[..., :, before + w:].sum(axis=-1)
    return out


def _row_chunks(rows, per_row):
    step = max(1, min(rows, _COLS_BUDGET // max(per_row, 1)))
    for r0 in range(0, rows, step):
        yield r0, min(rows, r0 + step)


def _correlate_im2col(xp, wmat, k):
    """Valid cross-correlation of xp (B, C, Hp, Wp) with wmat (O, C*k*k).

    Used when C is tiny, where one wide GEMM beats k*k thin ones.
    """
    bsz, c, hp, wp = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    o = wmat.shape[0]
    out = np.empty((bsz, o, ho, wo), dtype=np.result_type(xp, wmat))
    view = sliding_window_view(xp, (k, k), axis=(2, 3))
    for bi in range(bsz):
        for r0, r1 in _row_chunks(ho, wo * c * k * k):
            cols = view[bi, :, r0:r1].transpose(1, 2, 0, 3, 4).reshape(-1, c * k * k)
            out[bi, :, r0:r1] = (cols @ wmat.T).T.reshape(o, r1 - r0, wo)
    return out


def _im2col_weight_grad(xp, g, k):
    """dW[o, c, i, j] = sum_{b,y,x} g[b, o, y, x] xp[b, c, y + i, x + j]."""
    bsz, c, _, _ = xp.shape
    _, o, ho, wo = g.shape
    acc = np.zeros((c * k * k, o), dtype=np.result_type(xp, g))
    view = sliding_window_view(xp, (k, k), axis=(2, 3))
    for bi in range(bsz):
        for r0, r1 in _row_chunks(ho, wo * c * k * k):
            cols = view[bi, :, r0:r1].transpose(1, 2, 0, 3, 4).reshape(-1, c * k * k)
            gm = g[bi, :, r0:r1].reshape(o, -1)
            acc += cols.T @ gm.T
    return acc.T.reshape(o, c, k, k)


def _gemm_for(dtype):
    return blas.sgemm if dtype == np.float32 else blas.dgemm


def _gemm_acc(gemm, a, b, c, trans_b=0):
    """``c += a @ op(b)`` in place; all operands Fortran-ordered views."""
    res = gemm(1.0, a, b, beta=1.0, c=c, overwrite_c=1, trans_b=trans_b)
    if not np.shares_memory(res, c):
        c[...] = res


class _ShiftLayout:
    """Channels-last flattening of an edge-padded batch.

    Row ``n`` of the (L, C) matrix is pixel ``n`` of the padded grid
    (B, Hp, Wp), so the input window for kernel tap (i, j) is the contiguous
    row block starting at ``i * Wp + j``. Output row ``n`` is valid when its
    grid position has y < H and x < W; other rows are discarded.
    """

    def __init__(self, shape, k):
        self.bsz, self.c, self.h, self.w = shape
        self.k = k
        self.before, self.after = same_padding(k)
        self.hp = self.h + k - 1
        self.wp = self.w + k - 1
        self.n = self.bsz * self.hp * self.wp
        self.length = self.n + (k - 1) * (self.wp + 1)

    def flatten(self, x):
        """Edge-pad x (B, C, H, W) into the (L, C) row layout."""
        pad = ((0, 0), (0, 0), (self.before, self.after), (self.before, self.after))
        # Padding first avoids power-of-two strides in the transposing copy.
        xp = np.pad(x, pad, mode="edge")
        flat = np.empty((self.length, self.c), dtype=x.dtype)
        flat[self.n:] = 0
        flat[: self.n] = xp.transpose(0, 2, 3, 1).reshape(self.n, self.c)
        return flat

    def offsets(self):
        for i in range(self.k):
            for j in range(self.k):
                yield i, j, i * self.wp + j

    def unflatten(self, rows, ho, wo):
        """(N, C) rows -> (B, C, ho, wo) taking the top-left corner of each image."""
        grid = rows[: self.n].reshape(self.bsz, self.hp, self.wp, -1)
        return np.ascontiguousarray(grid[:, :ho, :wo].transpose(0, 3, 1, 2))

    def grid_rows(self, g):
        """(B, O, H, W) -> zero-filled (N, O) rows on the padded grid."""
        o = g.shape[1]
        rows = np.zeros((self.bsz, self.hp, self.wp, o), dtype=g.dtype)
        rows[:, : self.h, : self.w] = g.transpose(0, 2, 3, 1)
        return rows.reshape(self.n, o)


def _correlate_shift(x, w, bias=None):
    """Same-size correlation as k*k accumulated GEMMs over shifted windows."""
    lay = _ShiftLayout(x.shape, w.shape[2])
    o = w.shape[0]
    flat = lay.flatten(x)
    gemm = _gemm_for(flat.dtype)
    out_t = np.empty((o, lay.n), dtype=flat.dtype, order="F")
    out_t[...] = 0 if bias is None else bias.astype(flat.dtype)[:, None]
    for i, j, off in lay.offsets():
        a = np.asfortranarray(w[:, :, i, j], dtype=flat.dtype)
        _gemm_acc(gemm, a, flat[off:off + lay.n].T, out_t)
    return lay.unflatten(out_t.T, lay.h, lay.w), (lay, flat)


def _shift_backward(cache, w, g, need_input):
    lay, flat = cache
    gemm = _gemm_for(flat.dtype)
    o, c = w.shape[:2]
    rows = lay.grid_rows(g.astype(flat.dtype, copy=False))
    g_t = rows.T  # (O, N), Fortran-ordered view
    gw = np.zeros((lay.k, lay.k, o, c), dtype=flat.dtype)
    gflat = np.zeros((lay.length, c), dtype=flat.dtype) if need_input else None
    for i, j, off in lay.offsets():
        tile = np.zeros((o, c), dtype=flat.dtype, order="F")
        _gemm_acc(gemm, g_t, flat[off:off + lay.n].T, tile, trans_b=1)
        gw[i, j] = tile
        if need_input:
            a = np.asfortranarray(w[:, :, i, j].T, dtype=flat.dtype)
            _gemm_acc(gemm, a, g_t, gflat[off:off + lay.n].T)
    gw = gw.transpose(2, 3, 0, 1)
    gxp = lay.unflatten(gflat, lay.hp, lay.wp) if need_input else None
    return gw, gxp


def _fft_shape(hp, wp):
    return sp_fft.next_fast_len(hp, real=True), sp_fft.next_fast_len(wp, real=True)


def _correlate_fft(xp, w):
    """Valid cross-correlation through the FFT.

    Circular correlation over the padded grid equals linear correlation on
    the valid region because no valid output reads past the grid edge.
    """
    bsz, c, hp, wp = xp.shape
    o, _, k, _ = w.shape
    shape = _fft_shape(hp, wp)
    xf = sp_fft.rfft2(xp, s=shape)
    wf = np.conj(sp_fft.rfft2(w, s=shape))
    yf = np.einsum("bcuv,ocuv->bouv", xf, wf, optimize=True)
    out = sp_fft.irfft2(yf, s=shape)[:, :, : hp - k + 1, : wp - k + 1]
    return np.ascontiguousarray(out, dtype=xp.dtype), xf


def _fft_backward(xf, xp_shape, w, g, need_input):
    bsz, c, hp, wp = xp_shape
    o, _, k, _ = w.shape
    shape = _fft_shape(hp, wp)
    gf = sp_fft.rfft2(g, s=shape)
    # dW = correlation of the input with the output gradient.
    gw = sp_fft.irfft2(np.einsum("bcuv,bouv->ocuv", xf, np.conj(gf), optimize=True), s=shape)
    gw = np.ascontiguousarray(gw[:, :, :k, :k], dtype=g.dtype)
    gxp = None
    if need_input:
        # dX = full convolution of the output gradient with the kernel.
        wf = sp_fft.rfft2(w, s=shape)
        gxp = sp_fft.irfft2(np.einsum("bouv,ocuv->bcuv", gf, wf, optimize=True), s=shape)
        gxp = np.ascontiguousarray(gxp[:, :, :hp, :wp], dtype=g.dtype)
    return gw, gxp


def conv2d(x, w, b=None):
    """Same-size 2D cross-correlation with replicate (edge) padding.

    Parameters
    ----------
    x : Tensor, shape (B, Cin, H, W)
    w : Tensor, shape (Cout, Cin, k, k)
    b : Tensor, shape (Cout,), optional

    Even kernels pad asymmetrically: ``(k-1)//2`` before, the rest after, so
    a 16 x 16 kernel pads 7 then 8.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: bad shapes input {x.shape}, kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias shape {b.shape}, expected ({w.shape[0]},)")
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xd, wdat = x.data, w.data.astype(x.dtype, copy=False)
    method = None

    if k == 1:
        wm = wdat[:, :, 0, 0]
        out = np.einsum("oc,bchw->bohw", wm, xd, optimize=True)

        def conv_backward(g):
            gx = np.einsum("oc,bohw->bchw", wm, g, optimize=True) if x.requires_grad else None
            gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)[:, :, None, None]
            return gx, gw

    else:
        before, after = same_padding(k)
        pad = ((0, 0), (0, 0), (before, after), (before, after))
        if k >= _FFT_MIN_KERNEL:
            method = "fft"
            xp = np.pad(xd, pad, mode="edge")
            out, cache = _correlate_fft(xp, wdat)
        elif cin >= _SHIFT_MIN_CHANNELS:
            method = "shift"
            out, cache = _correlate_shift(xd, wdat, None if b is None else b.data)
        else:
            method = "im2col"
            xp = np.pad(xd, pad, mode="edge")
            out = _correlate_im2col(xp, wdat.reshape(cout, -1), k)

        def conv_backward(g):
            if method == "fft":
                gw, gxp = _fft_backward(cache, xp.shape, wdat, g, x.requires_grad)
            elif method == "shift":
                gw, gxp = _shift_backward(cache, wdat, g, x.requires_grad)
            else:
                gw = _im2col_weight_grad(xp, g, k)
                gxp = None
                if x.requires_grad:
                    # Full correlation of the output gradient with the flipped kernel.
                    gpad = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                    wflip = np.ascontiguousarray(wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                    gxp = _correlate_im2col(gpad, wflip.reshape(cin, -1), k)
            gx = _fold_edge_pad(gxp, before, after, h, wd) if gxp is not None else None
            return gx, gw

    if b is not None and not (k > 1 and method == "shift"):
        out += b.data.astype(out.dtype, copy=False)[None, :, None, None]

    def backward(g):
        gx, gw = conv_backward(g)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def avgpool2d(x):
    """2 x 2 average pooling with stride 2."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects (B, C, H, W), got {x.shape}")
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2d needs even extents, got {h}x{w}")
    out = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), backward)


def global_avgpool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    return mean(x, axis=(2, 3))
