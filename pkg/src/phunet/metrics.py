"""Image-quality and mask-overlap metrics."""

import numpy as np

from .errors import DimensionError, UndefinedMetricError


def _roi(img, mask):
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if img.shape != mask.shape:
        raise DimensionError(f"image {img.shape} and mask {mask.shape} differ")
    vals = img[mask]
    if vals.size == 0:
        raise UndefinedMetricError("empty region of interest")
    return vals


def cv_metric(img, roi_mask):
    """Coefficient of variation in percent, ``100 * std / mean`` (population std)."""
    vals = _roi(img, roi_mask)
    mu = vals.mean()
    if mu == 0:
        raise UndefinedMetricError("CV undefined for zero mean")
    return float(100.0 * vals.std() / mu)


def snr_metric(img, fg_mask, bg_mask):
    """Mean foreground intensity over background standard deviation."""
    fg = _roi(img, fg_mask)
    bg = _roi(img, bg_mask)
    sigma = bg.std()
    if sigma == 0:
        raise UndefinedMetricError("SNR undefined for a noiseless background")
    return float(fg.mean() / sigma)


def to_db(ratio):
    return 20.0 * np.log10(ratio)


def _masks(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


# When both masks are empty the overlap metrics return 1.


def dice(a, b):
    a, b = _masks(a, b)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def iou(a, b):
    a, b = _masks(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def ppv(pred, gt):
    pred, gt = _masks(pred, gt)
    npred = pred.sum()
    if npred == 0:
        return 1.0 if gt.sum() == 0 else 0.0
    return float(np.logical_and(pred, gt).sum() / npred)


def pearson(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        raise UndefinedMetricError("correlation undefined for a constant input")
    return float((a * b).sum() / denom)


def otsu_threshold(img, bins=256):
    """Threshold maximizing between-class variance of the intensity histogram."""
    img = np.asarray(img, dtype=np.float64).ravel()
    hist, edges = np.histogram(img, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 / w0[-1] - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    return float(centers[int(np.argmax(between))])


def otsu_masks(img):
    """(foreground, background) masks for images without known tissue masks."""
    t = otsu_threshold(img)
    fg = np.asarray(img) > t
    return fg, ~fg
