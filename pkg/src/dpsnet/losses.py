"""Training objective: weighted BCE + weighted IoU on the mask, BCE on the dilated boundary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor

# probabilities are clamped away from {0, 1} before taking logs
PROB_EPS = 1e-12
HARD_PIXEL_WINDOW = 31
HARD_PIXEL_FACTOR = 5.0


@dataclass(frozen=True)
class LossReport:
    total: float
    mask_wbce: float
    mask_wiou: float
    boundary_bce: float


def _as_batch(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    while a.ndim < 4:
        a = a[None]
    return a


def hard_pixel_weights(gt: np.ndarray) -> np.ndarray:
    """``1 + 5 * |meanpool31(gt) - gt|`` with zero padding counted in the mean."""
    gt = _as_batch(gt)
    pooled = ndimage.uniform_filter(
        gt, size=(1, 1, HARD_PIXEL_WINDOW, HARD_PIXEL_WINDOW), mode="constant", cval=0.0
    )
    return 1.0 + HARD_PIXEL_FACTOR * np.abs(pooled - gt)


def _bce_map(pred: Tensor, gt: np.ndarray) -> Tensor:
    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return -(gt * T.log(p) + (1.0 - gt) * T.log(1.0 - p))


def _check_shapes(pred: Tensor, gt: np.ndarray, what: str) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"{what}: prediction shape {pred.shape} != target shape {gt.shape}")


def mask_loss(pred, gt) -> tuple[Tensor, Tensor]:
    """Hard-pixel weighted BCE and IoU, each averaged over the batch.

    ``pred`` holds probabilities, ``gt`` a binary mask of the same shape
    ([N, 1, H, W] or anything broadcastable to it after adding batch axes).
    """
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt, "mask_loss")
    if pred.ndim < 4:
        pred = T.reshape(pred, _as_batch(gt).shape)
    gt = _as_batch(gt)
    weight = hard_pixel_weights(gt)
    wsum = weight.sum(axis=(2, 3))
    wbce = ((_bce_map(pred, gt) * weight).sum(axis=(2, 3)) / wsum).mean()
    inter = (pred * gt * weight).sum(axis=(2, 3))
    union = ((pred + gt - pred * gt) * weight).sum(axis=(2, 3))
    wiou = (1.0 - (inter + 1.0) / (union + 1.0)).mean()
    return wbce, wiou


def boundary_loss(pred, gt) -> Tensor:
    """Plain BCE averaged over every pixel."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt, "boundary_loss")
    return _bce_map(pred, gt).mean()


def dilate_boundary(edge: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a (2r+1) x (2r+1) square over the last two axes."""
    edge = np.asarray(edge)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return edge.copy()
    size = (1,) * (edge.ndim - 2) + (2 * radius + 1, 2 * radius + 1)
    out = ndimage.maximum_filter(edge != 0, size=size, mode="constant", cval=0)
    return out.astype(edge.dtype)


def total_loss(
    mask_pred: Tensor,
    edge_pred: Tensor | None,
    gt_mask: np.ndarray,
    gt_edge: np.ndarray,
    dilation_radius: int = 1,
) -> tuple[Tensor, LossReport]:
    """Mask loss + boundary loss.  ``edge_pred`` is upsampled to the mask resolution.

    With the boundary decoder disabled (``edge_pred is None``) the boundary
    term is zero.
    """
    gt_mask = _as_batch(gt_mask)
    wbce, wiou = mask_loss(mask_pred, gt_mask)
    total = wbce + wiou
    bbce_value = 0.0
    if edge_pred is not None:
        h, w = gt_mask.shape[-2:]
        target = dilate_boundary(_as_batch(gt_edge), dilation_radius)
        bbce = boundary_loss(T.upsample_bilinear(edge_pred, h, w), target)
        total = total + bbce
        bbce_value = bbce.item()
    report = LossReport(total.item(), wbce.item(), wiou.item(), bbce_value)
    return total, report
