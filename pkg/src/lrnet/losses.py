"""Area and edge losses for change probability maps.

Inputs are torch tensors of matching shape, typically ``N x 1 x H x W``;
``pred`` holds probabilities, ``gt`` holds {0, 1}.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .core import binarize, boundary_extract_torch

EPS = 1e-7
LOSS_MODES = ("bce", "iou", "bce+iou")


def _check(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")


def bce_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy with ``pred`` clamped to ``[eps, 1 - eps]``."""
    _check(pred, gt)
    p = pred.clamp(eps, 1.0 - eps)
    gt = gt.to(p.dtype)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p)).mean()


def iou_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Soft IoU loss ``-ln((I + eps) / (U + eps))``.

    For 4-D input the ratio is taken per sample and the losses averaged;
    lower-rank input is treated as a single map. An empty target with an
    empty prediction scores a ratio of exactly 1.
    """
    _check(pred, gt)
    gt = gt.to(pred.dtype)
    dims = tuple(range(1, pred.ndim)) if pred.ndim == 4 else tuple(range(pred.ndim))
    inter = (gt * pred).sum(dim=dims)
    union = gt.sum(dim=dims) + pred.sum(dim=dims) - inter
    return -torch.log((inter + eps) / (union + eps)).mean()


def edge_prediction(pred: torch.Tensor, edge_target: torch.Tensor) -> torch.Tensor:
    """Probability values kept at predicted-or-target edge positions, zero elsewhere.

    Predicted edge positions are the boundary of ``pred >= 0.5``; the
    position mask carries no gradient, the kept values do.
    """
    with torch.no_grad():
        pred_edges = boundary_extract_torch(binarize(pred.detach()))
        keep = ((pred_edges > 0) | (edge_target > 0)).to(pred.dtype)
    return pred * keep


class LossTerms(NamedTuple):
    area: torch.Tensor
    edge: torch.Tensor
    total: torch.Tensor


def combined_loss(pred: torch.Tensor, gt: torch.Tensor, mode: str = "bce+iou") -> LossTerms:
    """Area, edge and total loss for one supervision point.

    ``mode`` selects the loss variant: ``"bce+iou"`` (area BCE + IoU, edge
    IoU), ``"iou"`` (area IoU, edge IoU) or ``"bce"`` (area BCE only).
    """
    _check(pred, gt)
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; choose from {LOSS_MODES}")
    gt = gt.to(pred.dtype)
    zero = pred.new_zeros(())
    if mode == "bce":
        area = bce_loss(pred, gt)
        return LossTerms(area, zero, area)
    area = iou_loss(pred, gt)
    if mode == "bce+iou":
        area = area + bce_loss(pred, gt)
    edge_target = boundary_extract_torch(gt)
    edge = iou_loss(edge_prediction(pred, edge_target), edge_target)
    return LossTerms(area, edge, area + edge)
