"""Standard single-object tracking metrics over results/annotation files."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .boxes import BBox, center_distance, iou

SUCCESS_THRESHOLDS = (0.5, 0.75)
PRECISION_RADIUS_PX = 20.0


def evaluate_boxes(pred: list[BBox], gt: list[BBox]) -> dict:
    """Mean IoU, success rates (fraction of frames with IoU above threshold),
    and precision (fraction with center error below 20 px)."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} annotations")
    if not pred:
        raise ValueError("empty results")
    ious = np.array([iou(p, g) for p, g in zip(pred, gt)])
    errors = np.array([center_distance(p, g) for p, g in zip(pred, gt)])
    metrics = {
        "n_frames": len(pred),
        "mean_iou": float(ious.mean()),
        "precision_at_20px": float((errors < PRECISION_RADIUS_PX).mean()),
    }
    for thr in SUCCESS_THRESHOLDS:
        metrics[f"success_at_{thr}"] = float((ious > thr).mean())
    return metrics


def load_annotations(path: str | Path) -> list[BBox]:
    boxes = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        boxes.append(BBox(*(float(v) for v in parts[1:5])))
    return boxes


def evaluate_files(results_path: str | Path, annotations_path: str | Path) -> dict:
    from .tracker import read_results

    pred, _, _ = read_results(results_path)
    gt = load_annotations(annotations_path)
    return evaluate_boxes(pred, gt)
