"""Training objectives: triplet, IoU, focal, their weighted sum, and target encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .boxes import BBox
from .model import ConfigError

PT_CLAMP = 1e-7
IOU_EPS = 1e-9
CLS_SHRINK = 0.5  # classification positives come from the box shrunk about its center


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    gamma: float = 2.0
    lambda_triplet: float = 0.5
    lambda_reg: float = 1.0
    lambda_cls: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin", "must be > 0")
        if self.gamma < 0:
            raise ConfigError("gamma", "must be >= 0")
        for name in ("lambda_triplet", "lambda_reg", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")


def triplet_loss(
    e_t: torch.Tensor, e_s: torch.Tensor, e_n: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """max{d(e_t, e_s) - d(e_t, e_n) + margin, 0} with Euclidean d; batch mean.

    Accepts single (C,) embeddings or batches (N, C).
    """
    d_pos = (e_t - e_s).norm(dim=-1)
    d_neg = (e_t - e_n).norm(dim=-1)
    return torch.clamp(d_pos - d_neg + config.margin, min=0.0).mean()


def box_iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of (..., 4) boxes in (x1, y1, x2, y2) form."""
    ix1 = torch.maximum(pred[..., 0], target[..., 0])
    iy1 = torch.maximum(pred[..., 1], target[..., 1])
    ix2 = torch.minimum(pred[..., 2], target[..., 2])
    iy2 = torch.minimum(pred[..., 3], target[..., 3])
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)
    area_p = (pred[..., 2] - pred[..., 0]).clamp(min=0) * (pred[..., 3] - pred[..., 1]).clamp(min=0)
    area_t = (target[..., 2] - target[..., 0]).clamp(min=0) * (
        target[..., 3] - target[..., 1]
    ).clamp(min=0)
    return inter / (area_p + area_t - inter + IOU_EPS)


def iou_loss(
    pred_boxes: torch.Tensor, target_boxes: torch.Tensor, positive_mask: torch.Tensor
) -> tuple[torch.Tensor, bool]:
    """1 - mean IoU over positive cells; value in [0, 1].

    Returns (loss, empty_flag); an empty mask yields loss 0 and flags the batch
    instead of raising.
    """
    mask = positive_mask.bool()
    if not bool(mask.any()):
        return torch.zeros((), dtype=pred_boxes.dtype), True
    iou = box_iou(pred_boxes, target_boxes)
    return 1.0 - iou[mask].mean(), False


def focal_loss(
    cls_logits: torch.Tensor, labels: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    """-(1 - p_t)^gamma * log(p_t) averaged over all map positions.

    ``labels`` take values in {-1, +1}; p = sigmoid(logit) and p_t follows the
    two-case split (p for positives, 1 - p for negatives).
    """
    p = torch.sigmoid(cls_logits)
    positive = labels.to(cls_logits.dtype).gt(0)
    p_t = torch.where(positive, p, 1.0 - p).clamp(PT_CLAMP, 1.0 - PT_CLAMP)
    return (-((1.0 - p_t) ** config.gamma) * torch.log(p_t)).mean()


def total_loss(
    l_triplet: torch.Tensor, l_reg: torch.Tensor, l_cls: torch.Tensor, config: LossConfig
) -> torch.Tensor:
    return (
        config.lambda_triplet * l_triplet
        + config.lambda_reg * l_reg
        + config.lambda_cls * l_cls
    )


@dataclass
class RegressionTargets:
    """Per-cell (l, t, r, b) distances plus the label masks for both heads.

    ``targets`` is 4 x g x g in search-crop pixels; ``positive_mask`` marks
    cells whose center lies inside the box (regression supervision);
    ``cls_labels`` is +1 inside the shrunk center region, -1 elsewhere.
    """

    targets: np.ndarray
    positive_mask: np.ndarray
    cls_labels: np.ndarray


def cell_centers(stride: int, map_side: int) -> tuple[np.ndarray, np.ndarray]:
    """(cx, cy) grids for map cells; cell (i, j) centers at (j*s + s/2, i*s + s/2)."""
    coords = np.arange(map_side) * stride + stride / 2.0
    cx, cy = np.meshgrid(coords, coords)
    return cx, cy


def encode_targets(gt_box: BBox, stride: int, map_side: int) -> RegressionTargets:
    """Anchor-free targets: distances from each cell center to the box sides."""
    crop_size = stride * map_side
    if (
        gt_box.x_min < 0 or gt_box.y_min < 0
        or gt_box.x_max > crop_size or gt_box.y_max > crop_size
    ):
        raise ValueError(f"box {gt_box} outside {crop_size}px crop")
    gt_box.validate()

    cx, cy = cell_centers(stride, map_side)
    targets = np.stack(
        [cx - gt_box.x_min, cy - gt_box.y_min, gt_box.x_max - cx, gt_box.y_max - cy]
    )
    positive = (targets > 0).all(axis=0)

    half_w = 0.5 * CLS_SHRINK * gt_box.width
    half_h = 0.5 * CLS_SHRINK * gt_box.height
    bcx, bcy = gt_box.center
    inside_core = (
        (np.abs(cx - bcx) < half_w) & (np.abs(cy - bcy) < half_h)
    )
    cls_labels = np.where(inside_core, 1.0, -1.0)
    return RegressionTargets(targets=targets, positive_mask=positive, cls_labels=cls_labels)
