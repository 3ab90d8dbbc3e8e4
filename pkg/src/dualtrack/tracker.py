"""Inference engine: session state, per-frame stepping, decoding, window penalty."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .boxes import BBox, DegenerateBoxError
from .datapipe import SamplerConfig, crop_search, crop_template
from .model import ConfigError, FeatureMap, TrackerNet, reduce_template
from .templates import (
    DualTemplateState,
    combine_templates,
    cosine_similarity,
    embed_search,
    embed_template,
    observe_frame,
)


@dataclass(frozen=True)
class TrackerConfig:
    update_interval: int = 70
    window_influence: float = 0.25
    size_lr: float = 0.35
    use_window: bool = True
    min_update_similarity: Optional[float] = None

    def __post_init__(self):
        if self.update_interval < 1:
            raise ConfigError("update_interval", "must be >= 1")
        for name in ("window_influence", "size_lr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"must be in [0, 1], got {v}")


@dataclass
class TrackerOutput:
    box: BBox  # frame coordinates
    confidence: float  # sigmoid score at the chosen cell, in [0, 1]
    cls_scores: np.ndarray  # g x g sigmoid confidence map
    similarity: float  # template/search cosine similarity, in [-1, 1]
    template_updated: bool


@dataclass
class TrackSession:
    net: TrackerNet
    state: DualTemplateState
    tracker_config: TrackerConfig
    sampler_config: SamplerConfig
    last_box: BBox
    frame_index: int = 0


@lru_cache(maxsize=8)
def hanning2d(side: int) -> np.ndarray:
    w = np.hanning(side)
    return np.outer(w, w)


def apply_window_penalty(scores: np.ndarray, config: TrackerConfig) -> np.ndarray:
    """Blend scores with a centered Hanning window; identity when disabled."""
    if not config.use_window or config.window_influence == 0.0:
        return scores
    return (1.0 - config.window_influence) * scores \
        + config.window_influence * hanning2d(scores.shape[0])


def raw_to_distances(
    raw: torch.Tensor, stride: int, max_raw: Optional[float] = None
) -> torch.Tensor:
    """Non-negative (l, t, r, b) distances: exp of the raw activation, in pixels.

    ``max_raw`` caps the exponent (training-time overflow guard); inference
    and decode use the pure exponential.
    """
    if max_raw is not None:
        raw = raw.clamp(max=max_raw)
    return torch.exp(raw) * stride


def distances_to_boxes(distances: torch.Tensor, stride: int) -> torch.Tensor:
    """(N x) 4 x g x g distances -> (x1, y1, x2, y2) boxes about each cell center."""
    g = distances.shape[-1]
    coords = torch.arange(g, dtype=distances.dtype) * stride + stride / 2.0
    cx = coords.reshape(1, g).expand(g, g)
    cy = coords.reshape(g, 1).expand(g, g)
    l, t, r, b = distances.unbind(dim=-3)
    return torch.stack([cx - l, cy - t, cx + r, cy + b], dim=-3)


def decode_map(reg_raw: torch.Tensor, stride: int) -> torch.Tensor:
    """Differentiable full-map decode used in training; no clamping."""
    return distances_to_boxes(raw_to_distances(reg_raw, stride), stride)


def decode_regression(
    reg_map: torch.Tensor | np.ndarray, cell: tuple[int, int], stride: int,
    crop_size: Optional[int] = None,
) -> BBox:
    """Decode one cell of a 4 x g x g raw regression map into a crop-frame box."""
    raw = np.asarray(reg_map.detach() if isinstance(reg_map, torch.Tensor) else reg_map)
    i, j = cell
    g = raw.shape[-1]
    if not (0 <= i < g and 0 <= j < g):
        raise IndexError(f"cell {cell} outside {g}x{g} map")
    l, t, r, b = (float(v) for v in np.exp(raw[:, i, j]) * stride)
    cx = j * stride + stride / 2.0
    cy = i * stride + stride / 2.0
    box = BBox(cx - l, cy - t, cx + r, cy + b)
    if crop_size is None:
        crop_size = g * stride
    return BBox(
        max(box.x_min, 0.0), max(box.y_min, 0.0),
        min(box.x_max, float(crop_size)), min(box.y_max, float(crop_size)),
    )


def init(
    frame: np.ndarray,
    box: BBox,
    net: TrackerNet,
    tracker_config: TrackerConfig = TrackerConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
) -> TrackSession:
    """Start a session: static template features from the first frame's box.

    The box is clamped to the frame; a zero-area box is an error. The dynamic
    template starts equal to the static one, so the mix is an identity until
    the first update.
    """
    h, w = frame.shape[:2]
    clamped = BBox(
        max(box.x_min, 0.0), max(box.y_min, 0.0), min(box.x_max, w), min(box.y_max, h)
    )
    if clamped.width <= 0 or clamped.height <= 0:
        raise DegenerateBoxError(f"init box {box} has no area inside the frame")

    crop, _ = crop_template(frame, clamped, sampler_config, net.config.template_size)
    with torch.no_grad():
        feats = net.extract_features(crop)
    raw_mix = float(net.raw_mix.detach()) if net.raw_mix is not None else -math.inf
    state = DualTemplateState(
        static_feats=feats,
        dynamic_feats=feats,
        raw_mix=raw_mix,
        update_interval=tracker_config.update_interval,
        min_similarity=tracker_config.min_update_similarity,
    )
    return TrackSession(
        net=net, state=state, tracker_config=tracker_config,
        sampler_config=sampler_config, last_box=clamped,
    )


def step(session: TrackSession, frame: np.ndarray) -> TrackerOutput:
    """Track one frame: crop, forward, penalize, decode, smooth, observe."""
    net, cfg = session.net, session.tracker_config
    h, w = frame.shape[:2]
    search_crop, transform = crop_search(
        frame, session.last_box, session.sampler_config, net.config.search_size
    )

    with torch.no_grad():
        f_s = net.extract_features(search_crop)
        f_t = combine_templates(session.state)
        reduced = reduce_template(f_t, net.config.template_corr_cells)
        fused = net.fusion_block(f_s, reduced)
        heads = net.run_heads(fused)
        scores_t = torch.sigmoid(heads.cls_map[0])
        e_t = embed_template(f_t)
        e_s = embed_search(f_s, scores_t)
        similarity = float(cosine_similarity(e_t, e_s))

    scores = scores_t.numpy()
    penalized = apply_window_penalty(scores, cfg)
    flat = int(np.argmax(penalized))  # ties resolve to the lowest flat index
    i, j = divmod(flat, scores.shape[1])

    crop_box = decode_regression(
        heads.reg_map, (i, j), net.config.final_stride, net.config.search_size
    )
    frame_box = transform.invert_box(crop_box)

    # new center taken outright; size blended with the previous box
    new_w = cfg.size_lr * frame_box.width + (1.0 - cfg.size_lr) * session.last_box.width
    new_h = cfg.size_lr * frame_box.height + (1.0 - cfg.size_lr) * session.last_box.height
    cx, cy = frame_box.center
    new_box = BBox(cx - new_w / 2, cy - new_h / 2, cx + new_w / 2, cy + new_h / 2)
    new_box = new_box.clipped(w, h)

    candidate_crop, _ = crop_template(
        frame, new_box, session.sampler_config, net.config.template_size
    )

    def extract(crop: np.ndarray) -> FeatureMap:
        with torch.no_grad():
            return net.extract_features(crop)

    updated = observe_frame(session.state, similarity, candidate_crop, new_box, extract)

    session.last_box = new_box
    session.frame_index += 1
    return TrackerOutput(
        box=new_box,
        confidence=float(scores[i, j]),
        cls_scores=scores,
        similarity=similarity,
        template_updated=updated,
    )


def track_video(
    net: TrackerNet,
    frames: list[np.ndarray],
    init_box: BBox,
    tracker_config: TrackerConfig = TrackerConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
) -> list[TrackerOutput]:
    """Initialize on the first frame's box, then step over every frame."""
    session = init(frames[0], init_box, net, tracker_config, sampler_config)
    return [step(session, frame) for frame in frames]


def write_results(path: str | Path, outputs: list[TrackerOutput]) -> Path:
    """One line per frame: index, box corners, confidence, similarity."""
    lines = [
        f"{i} {o.box.x_min:.3f} {o.box.y_min:.3f} {o.box.x_max:.3f} {o.box.y_max:.3f} "
        f"{o.confidence:.6f} {o.similarity:.6f}"
        for i, o in enumerate(outputs)
    ]
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n")
    return p


def read_results(path: str | Path) -> tuple[list[BBox], list[float], list[float]]:
    boxes, confidences, similarities = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        boxes.append(BBox(*(float(v) for v in parts[1:5])))
        confidences.append(float(parts[5]))
        similarities.append(float(parts[6]))
    return boxes, confidences, similarities
