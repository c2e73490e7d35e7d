"""Segmentation quality metrics: MAE, S-measure, E-measure, weighted F-measure.

All functions take a 2-D prediction in [0, 1] and a 2-D binary ground truth.
The structure, enhanced-alignment and weighted-F definitions follow the
published reference code of each measure, including their special cases for
empty or full ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EPS = np.spacing(1.0)


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    s_measure: float
    e_measure: float
    weighted_f: float


def _prepare(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.ndim != 2:
        pred, gt = np.squeeze(pred), np.squeeze(gt)
        if pred.ndim != 2:
            raise ValueError(f"metrics need 2-D maps, got {pred.shape}")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


# -- S-measure --------------------------------------------------------------

def _object_score(values: np.ndarray) -> float:
    mu = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    if gt.any():
        cy, cx = np.argwhere(gt).mean(axis=0).round()
    else:
        cy, cx = np.round(h / 2), np.round(w / 2)
    # split after the centroid row/column (it belongs to the top-left part)
    cy, cx = int(cy) + 1, int(cx) + 1
    area = h * w
    w_lt = cx * cy / area
    w_rt = cy * (w - cx) / area
    w_lb = (h - cy) * cx / area
    w_rb = 1.0 - w_lt - w_rt - w_lb
    g = gt.astype(np.float64)
    return (
        w_lt * _ssim(pred[:cy, :cx], g[:cy, :cx])
        + w_rt * _ssim(pred[:cy, cx:], g[:cy, cx:])
        + w_lb * _ssim(pred[cy:, :cx], g[cy:, :cx])
        + w_rb * _ssim(pred[cy:, cx:], g[cy:, cx:])
    )


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    obj = y * _object_score(pred[gt]) + (1.0 - y) * _object_score(1.0 - pred[~gt])
    return float(max(0.0, alpha * obj + (1.0 - alpha) * _region_score(pred, gt)))


# -- E-measure --------------------------------------------------------------

def e_measure(pred, gt, threshold: str | float = "adaptive") -> float:
    """Enhanced-alignment measure of the binarized prediction, averaged over pixels.

    ``threshold="adaptive"`` binarizes at ``min(2 * mean(pred), 1)``; a number
    is used as a fixed threshold.
    """
    pred, gt = _prepare(pred, gt)
    thr = min(2.0 * pred.mean(), 1.0) if threshold == "adaptive" else float(threshold)
    fm = (pred >= thr).astype(np.float64)
    g = gt.astype(np.float64)
    if not gt.any():
        enhanced = 1.0 - fm
    elif gt.all():
        enhanced = fm
    else:
        af = fm - fm.mean()
        ag = g - g.mean()
        align = 2.0 * af * ag / (af * af + ag * ag + EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


# -- weighted F-measure -----------------------------------------------------

def _gauss_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def weighted_f(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return 1.0 if not pred.any() else 0.0
    g = gt.astype(np.float64)
    dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
    err = np.abs(pred - g)
    # background errors are read at the nearest foreground pixel
    et = err[iy, ix]
    ea = ndimage.convolve(et, _gauss_kernel(), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tpw = g.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1.0 + beta2) * recall * precision / (recall + beta2 * precision + EPS))


def evaluate_all(pred, gt) -> MetricsReport:
    return MetricsReport(mae(pred, gt), s_measure(pred, gt), e_measure(pred, gt), weighted_f(pred, gt))
