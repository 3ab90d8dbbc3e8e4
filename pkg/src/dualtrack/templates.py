"""Dual-template state: mixing, embeddings, similarity, and the update rule.

The template representation is a convex combination of static (first-frame)
and dynamic (periodically refreshed) feature maps, weighted by a single
learned scalar. Per frame, the search embedding (confidence-weighted average
pooling) is compared against the template embedding (plain average pooling)
by cosine similarity; the best-scoring frame inside each update window
becomes the next dynamic template.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .boxes import BBox
from .model import FeatureMap, ShapeError

EMBED_EPS = 1e-8


def stable_sigmoid(x: float) -> float:
    """Overflow-safe sigmoid; maps -inf/+inf to exactly 0/1."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x)) if x < 700 else 1.0
    z = math.exp(x) if x > -700 else 0.0
    return z / (1.0 + z)


@dataclass
class Candidate:
    """Best dynamic-template candidate seen inside the current update window."""

    similarity: float
    crop: np.ndarray  # template-style crop, pixels
    box: BBox  # frame coordinates


@dataclass
class DualTemplateState:
    static_feats: FeatureMap
    dynamic_feats: FeatureMap
    raw_mix: float
    update_interval: int = 70
    min_similarity: Optional[float] = None  # optional gate, off by default
    best_candidate: Optional[Candidate] = None
    frames_since_update: int = 0
    updates_performed: int = 0

    @property
    def mix_weight(self) -> float:
        return stable_sigmoid(self.raw_mix)


def combine_templates(state: DualTemplateState) -> FeatureMap:
    """(1 - w) * static + w * dynamic, elementwise, with w = sigmoid(raw_mix)."""
    f_t, f_d = state.static_feats, state.dynamic_feats
    if f_t.data.shape != f_d.data.shape:
        raise ShapeError(
            f"template shape mismatch: {tuple(f_t.data.shape)} vs {tuple(f_d.data.shape)}"
        )
    w = state.mix_weight
    return FeatureMap((1.0 - w) * f_t.data + w * f_d.data, f_t.stride)


def embed_template(combined: FeatureMap) -> torch.Tensor:
    """Per-channel spatial mean of the combined template map."""
    return combined.data.mean(dim=(1, 2))


def weighted_average_pool(feats: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    """Batched WAP: N x C x H x W features pooled by N x 1 x H x W weights."""
    n, c = feats.shape[:2]
    w = scores.reshape(n, 1, -1)
    num = (feats.reshape(n, c, -1) * w).sum(dim=-1)
    return num / (w.sum(dim=-1) + EMBED_EPS)


def embed_search(search_feats: FeatureMap, cls_scores: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Confidence-weighted average pooling of search features.

    ``cls_scores`` are sigmoid confidences on the same spatial grid as the
    feature map, so weights are in (0, 1); an epsilon guards the denominator
    anyway.
    """
    scores = cls_scores
    if not isinstance(scores, torch.Tensor):
        scores = torch.from_numpy(np.asarray(scores))
    scores = scores.reshape(1, 1, *scores.shape[-2:]).to(search_feats.data.dtype)
    if scores.shape[-2:] != search_feats.data.shape[-2:]:
        raise ShapeError(
            f"score grid {tuple(scores.shape[-2:])} does not match feature grid "
            f"{tuple(search_feats.data.shape[-2:])}"
        )
    return weighted_average_pool(search_feats.data[None], scores)[0]


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """a . b / (||a|| ||b||), epsilon-guarded, clamped to [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeError(f"embedding shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    denom = a.norm().clamp_min(EMBED_EPS) * b.norm().clamp_min(EMBED_EPS)
    return ((a * b).sum() / denom).clamp(-1.0, 1.0)


def observe_frame(
    state: DualTemplateState,
    similarity: float,
    frame_crop: np.ndarray,
    predicted_box: BBox,
    extract: Callable[[np.ndarray], FeatureMap],
) -> bool:
    """Track the running-best candidate; refresh the dynamic template on window close.

    The crop (pixels) is buffered rather than its features, so only one extra
    feature extraction runs per window. Ties keep the earliest frame (strict
    greater-than comparison). Returns True when an update was performed.
    """
    passes_gate = state.min_similarity is None or similarity >= state.min_similarity
    if passes_gate and (
        state.best_candidate is None or similarity > state.best_candidate.similarity
    ):
        state.best_candidate = Candidate(similarity, np.array(frame_crop, copy=True), predicted_box)

    state.frames_since_update += 1
    if state.frames_since_update < state.update_interval:
        return False

    updated = False
    if state.best_candidate is not None:
        state.dynamic_feats = extract(state.best_candidate.crop)
        state.updates_performed += 1
        updated = True
    state.frames_since_update = 0
    state.best_candidate = None
    return updated
