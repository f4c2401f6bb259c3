import numpy as np

from phunet import autodiff as ad


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f()
            a[i] = old - eps
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(op, *inputs, seed=0, eps=1e-6):
    """Worst relative error between reverse-mode and numeric gradients of ``op``.

    Non-scalar outputs are contracted with a fixed random tensor first.
    """
    tensors = [ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = None

    def scalar():
        nonlocal probe
        out = op(*tensors)
        if out.ndim == 0:
            return out
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return ad.tsum(out * ad.Tensor(probe))

    loss = scalar()
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    with ad.no_grad():
        numeric = numeric_grad(lambda: scalar().item(), [t.data for t in tensors], eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def away_from(x, points, margin):
    """Push entries of ``x`` at least ``margin`` away from each kink in ``points``."""
    x = np.array(x, dtype=np.float64)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x
