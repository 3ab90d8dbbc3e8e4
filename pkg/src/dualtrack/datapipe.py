"""Crop geometry, augmentation, curriculum pair sampling, and synthetic videos.

Crops follow the usual Siamese recipe: the template crop is the target box
expanded by a context fraction, square-padded with the crop's mean RGB and
resized to 128; the search crop covers twice that region at 256, so object
scale matches across the two. Every crop returns the affine transform used,
so boxes map losslessly between frame and crop coordinates.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .boxes import BBox, iou
from .model import ConfigError

TEMPLATE_OUT = 128
SEARCH_OUT = 256


@dataclass(frozen=True)
class SamplerConfig:
    # frame-distance curriculum
    base_distance: int = 70
    curriculum_start_epoch: int = 15
    curriculum_step: int = 2
    # geometric augmentation
    template_shift: float = 8.0
    template_scale_range: float = 0.05  # +-5%
    search_shift: float = 48.0
    search_scale_min: float = 0.65
    search_scale_max: float = 1.35
    # crop geometry
    context_offset: float = 0.20
    # photometric augmentation (stand-in parameters, each applied with prob 0.5)
    brightness_jitter: float = 0.20
    contrast_jitter: float = 0.20
    hue_jitter: float = 0.05
    photometric_prob: float = 0.5

    def __post_init__(self):
        if self.base_distance < 1:
            raise ConfigError("base_distance", "must be >= 1")
        for name in ("curriculum_step", "template_shift", "search_shift",
                     "template_scale_range", "context_offset"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if not 0 < self.search_scale_min <= self.search_scale_max:
            raise ConfigError("search_scale_min", "need 0 < min <= max")


@dataclass(frozen=True)
class CropTransform:
    """Affine frame->crop mapping: crop = (frame - offset) * scale."""

    scale: float
    x_offset: float
    y_offset: float

    def apply_box(self, box: BBox) -> BBox:
        return BBox(
            (box.x_min - self.x_offset) * self.scale,
            (box.y_min - self.y_offset) * self.scale,
            (box.x_max - self.x_offset) * self.scale,
            (box.y_max - self.y_offset) * self.scale,
        )

    def invert_box(self, box: BBox) -> BBox:
        return BBox(
            box.x_min / self.scale + self.x_offset,
            box.y_min / self.scale + self.y_offset,
            box.x_max / self.scale + self.x_offset,
            box.y_max / self.scale + self.y_offset,
        )


@dataclass
class TrainingSample:
    template_img: np.ndarray  # 128 x 128 x 3
    search_img: np.ndarray  # 256 x 256 x 3
    dynamic_img: np.ndarray  # 128 x 128 x 3
    negative_img: np.ndarray  # 256 x 256 x 3
    gt_box: BBox  # search-crop coordinates
    meta: dict = field(default_factory=dict)


def _region_mean_rgb(frame: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Mean RGB over the part of [x0,x1)x[y0,y1) that lies inside the frame."""
    h, w = frame.shape[:2]
    xa, xb = max(0, int(math.floor(x0))), min(w, int(math.ceil(x1)))
    ya, yb = max(0, int(math.floor(y0))), min(h, int(math.ceil(y1)))
    if xa >= xb or ya >= yb:
        return np.full(3, 127.0)
    return frame[ya:yb, xa:xb].reshape(-1, 3).mean(axis=0)


def _warp_square(
    frame: np.ndarray, x0: float, y0: float, side: float, out_size: int, fill: np.ndarray
) -> np.ndarray:
    """Resample the square frame region [x0, x0+side) to out_size, filling outside."""
    s = out_size / side
    m = np.array([[s, 0.0, -s * x0], [0.0, s, -s * y0]])
    return cv2.warpAffine(
        frame, m, (out_size, out_size),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT,
        borderValue=tuple(float(v) for v in fill),
    )


def _expanded(box: BBox, context_offset: float) -> tuple[float, float, float, float]:
    w, h = box.width, box.height
    return (
        box.x_min - context_offset * w,
        box.y_min - context_offset * h,
        box.x_max + context_offset * w,
        box.y_max + context_offset * h,
    )


def template_region_side(box: BBox, config: SamplerConfig) -> float:
    """Side of the square template region in source-frame pixels."""
    ex0, ey0, ex1, ey1 = _expanded(box, config.context_offset)
    return max(ex1 - ex0, ey1 - ey0)


def crop_template(
    frame: np.ndarray, box: BBox, config: SamplerConfig, out_size: int = TEMPLATE_OUT
) -> tuple[np.ndarray, CropTransform]:
    """Context-expanded crop around the box, square-padded and resized.

    The expanded rectangle is extracted (out-of-frame pixels take the crop's
    mean RGB), centered in a mean-RGB square of its longer side, and resized.
    """
    box.validate()
    ex0, ey0, ex1, ey1 = _expanded(box, config.context_offset)
    side = max(ex1 - ex0, ey1 - ey0)
    cx, cy = box.center
    sq_x0, sq_y0 = cx - side / 2.0, cy - side / 2.0

    fill = _region_mean_rgb(frame, ex0, ey0, ex1, ey1)
    crop = _warp_square(frame, sq_x0, sq_y0, side, out_size, fill)

    # the shorter axis of the expanded rectangle is padding, not frame content
    scale = out_size / side
    rx0 = int(round((ex0 - sq_x0) * scale))
    ry0 = int(round((ey0 - sq_y0) * scale))
    rx1 = out_size - rx0
    ry1 = out_size - ry0
    fill_px = np.clip(np.round(fill), 0, 255).astype(frame.dtype)
    if ry0 > 0:
        crop[:ry0], crop[ry1:] = fill_px, fill_px
    if rx0 > 0:
        crop[:, :rx0], crop[:, rx1:] = fill_px, fill_px

    return crop, CropTransform(scale, sq_x0, sq_y0)


def crop_search(
    frame: np.ndarray, center_box: BBox, config: SamplerConfig, out_size: int = SEARCH_OUT
) -> tuple[np.ndarray, CropTransform]:
    """Square crop of twice the template region side, centered on the box center."""
    center_box.validate()
    side = 2.0 * template_region_side(center_box, config)
    cx, cy = center_box.center
    sq_x0, sq_y0 = cx - side / 2.0, cy - side / 2.0
    fill = _region_mean_rgb(frame, sq_x0, sq_y0, sq_x0 + side, sq_y0 + side)
    crop = _warp_square(frame, sq_x0, sq_y0, side, out_size, fill)
    return crop, CropTransform(out_size / side, sq_x0, sq_y0)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _affine_jitter(
    img: np.ndarray, rng: np.random.Generator, max_shift: float,
    scale_lo: float, scale_hi: float,
) -> tuple[np.ndarray, float, float, float]:
    """Scale about the center plus a shift; returns (image, f, dx, dy)."""
    f = float(rng.uniform(scale_lo, scale_hi))
    dx = float(rng.uniform(-max_shift, max_shift))
    dy = float(rng.uniform(-max_shift, max_shift))
    if f == 1.0 and dx == 0.0 and dy == 0.0:
        return img, f, dx, dy
    h, w = img.shape[:2]
    cx, cy = w / 2.0, h / 2.0
    m = np.array([[f, 0.0, cx - f * cx + dx], [0.0, f, cy - f * cy + dy]])
    fill = img.reshape(-1, 3).mean(axis=0)
    out = cv2.warpAffine(
        img, m, (w, h), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(float(v) for v in fill),
    )
    return out, f, dx, dy


def _jitter_box(box: BBox, f: float, dx: float, dy: float, size: int) -> BBox:
    c = size / 2.0
    return BBox(
        f * (box.x_min - c) + c + dx,
        f * (box.y_min - c) + c + dy,
        f * (box.x_max - c) + c + dx,
        f * (box.y_max - c) + c + dy,
    )


def _photometric(img: np.ndarray, rng: np.random.Generator, config: SamplerConfig) -> np.ndarray:
    out = img.astype(np.float32)
    if rng.random() < config.photometric_prob:
        out *= 1.0 + rng.uniform(-config.brightness_jitter, config.brightness_jitter)
    if rng.random() < config.photometric_prob:
        mean = out.mean()
        out = (out - mean) * (1.0 + rng.uniform(-config.contrast_jitter, config.contrast_jitter)) + mean
    if rng.random() < config.photometric_prob and config.hue_jitter > 0:
        hsv = cv2.cvtColor(np.clip(out, 0, 255).astype(np.uint8), cv2.COLOR_RGB2HSV)
        shift = rng.uniform(-config.hue_jitter, config.hue_jitter) * 180.0
        hsv[..., 0] = (hsv[..., 0].astype(np.int32) + int(round(shift))) % 180
        out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB).astype(np.float32)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def augment(
    sample: TrainingSample, rng: np.random.Generator, config: SamplerConfig
) -> TrainingSample:
    """Light template jitter, severe search/negative jitter, photometric noise.

    The ground-truth box follows the search warp exactly and is clipped to the
    crop afterwards.
    """
    t_img, *_ = _affine_jitter(
        sample.template_img, rng, config.template_shift,
        1.0 - config.template_scale_range, 1.0 + config.template_scale_range,
    )
    d_img, *_ = _affine_jitter(
        sample.dynamic_img, rng, config.template_shift,
        1.0 - config.template_scale_range, 1.0 + config.template_scale_range,
    )
    s_img, f, dx, dy = _affine_jitter(
        sample.search_img, rng, config.search_shift,
        config.search_scale_min, config.search_scale_max,
    )
    n_img, *_ = _affine_jitter(
        sample.negative_img, rng, config.search_shift,
        config.search_scale_min, config.search_scale_max,
    )
    size = sample.search_img.shape[0]
    gt = _jitter_box(sample.gt_box, f, dx, dy, size).clipped(size, size)

    return TrainingSample(
        template_img=_photometric(t_img, rng, config),
        search_img=_photometric(s_img, rng, config),
        dynamic_img=_photometric(d_img, rng, config),
        negative_img=n_img,
        gt_box=gt,
        meta=dict(sample.meta, augmented=True),
    )


# ---------------------------------------------------------------------------
# Synthetic videos
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriftProfile:
    """Appearance-change knobs for the synthetic generator."""

    color_drift: float = 0.35  # fraction of the way toward a second color by video end
    scale_amplitude: float = 0.12  # relative size oscillation
    speed: float = 2.5  # orbit speed, px/frame
    wobble: float = 0.8  # random-walk jitter, px/frame
    occluder: bool = False

    @classmethod
    def none(cls) -> "DriftProfile":
        return cls(color_drift=0.0, scale_amplitude=0.0, speed=0.0, wobble=0.0, occluder=False)

    @classmethod
    def mild(cls) -> "DriftProfile":
        return cls()


@dataclass
class SyntheticVideo:
    frames: list[np.ndarray]
    boxes: list[BBox]
    seed: int
    drift: DriftProfile
    occluder_boxes: Optional[list[BBox]] = None

    def __len__(self) -> int:
        return len(self.frames)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth low-contrast texture around a muted base color."""
    base = rng.uniform(70, 130, size=3)
    coarse = rng.uniform(-25, 25, size=(6, 6, 3))
    tex = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    return np.clip(base[None, None, :] + tex, 0, 255).astype(np.uint8)


def generate_synthetic(
    seed: int,
    n_frames: int,
    size: tuple[int, int] = (320, 320),
    drift: DriftProfile = DriftProfile.mild(),
) -> SyntheticVideo:
    """One bright elliptical target orbiting over a textured background.

    Fully deterministic in the seed: motion is a slow orbit plus a bounded
    random walk, size oscillates, and the color drifts toward a second hue.
    With ``drift.occluder`` a larger rectangle sweeps across the target near
    the middle of the video.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = size
    bg = _background(rng, h, w)

    a0 = float(rng.uniform(16, 26))  # semi-axes
    b0 = float(rng.uniform(0.7, 1.0)) * a0
    max_r = max(a0, b0) * (1.0 + drift.scale_amplitude)
    margin = max_r + 6
    color_a = rng.uniform(150, 255, size=3)
    color_a[int(rng.integers(3))] = rng.uniform(200, 255)  # one dominant channel
    color_b = rng.uniform(120, 255, size=3)
    phase = rng.uniform(0, 2 * math.pi, size=2)
    orbit_r = max((min(h, w) / 2.0) - margin - 2, 1.0)
    omega = drift.speed / orbit_r
    wobble = np.zeros(2)

    frames: list[np.ndarray] = []
    boxes: list[BBox] = []
    occ_boxes: list[BBox] = [] if drift.occluder else None
    occ_color = rng.uniform(40, 90, size=3)
    k_star = n_frames // 2  # occluder crosses the target here

    cxs, cys, axs, bys = [], [], [], []
    for k in range(n_frames):
        wobble = np.clip(
            wobble + rng.uniform(-drift.wobble, drift.wobble, size=2), -15, 15
        )
        cx = w / 2.0 + orbit_r * math.cos(phase[0] + omega * k) + wobble[0]
        cy = h / 2.0 + orbit_r * math.sin(phase[1] + omega * k) + wobble[1]
        cx = float(np.clip(cx, margin, w - margin))
        cy = float(np.clip(cy, margin, h - margin))
        osc = 1.0 + drift.scale_amplitude * math.sin(2 * math.pi * k / max(n_frames, 2))
        cxs.append(cx); cys.append(cy); axs.append(a0 * osc); bys.append(b0 * osc)

    for k in range(n_frames):
        frame = bg.copy()
        t = k / max(n_frames - 1, 1)
        color = color_a + drift.color_drift * t * (color_b - color_a)
        color = tuple(float(c) for c in np.clip(color, 0, 255))
        cx, cy, a, b = cxs[k], cys[k], axs[k], bys[k]
        cv2.ellipse(frame, (int(round(cx)), int(round(cy))),
                    (int(round(a)), int(round(b))), 0, 0, 360, color, -1, cv2.LINE_AA)
        # darker inner core gives the target some structure
        cv2.ellipse(frame, (int(round(cx)), int(round(cy))),
                    (max(int(round(a * 0.45)), 1), max(int(round(b * 0.45)), 1)),
                    0, 0, 360, tuple(c * 0.5 for c in color), -1, cv2.LINE_AA)
        box = BBox(cx - a, cy - b, cx + a, cy + b)

        if drift.occluder:
            ow, oh = a * 1.3, b * 1.3
            ocx = cxs[k_star] + (k - k_star) * 4.0
            ocy = cys[k_star]
            obox = BBox(ocx - ow, ocy - oh, ocx + ow, ocy + oh)
            if obox.x_max > 0 and obox.x_min < w:
                cv2.rectangle(
                    frame,
                    (int(round(obox.x_min)), int(round(obox.y_min))),
                    (int(round(obox.x_max)), int(round(obox.y_max))),
                    tuple(float(c) for c in occ_color), -1,
                )
            occ_boxes.append(obox)

        frames.append(frame)
        boxes.append(box)

    return SyntheticVideo(frames=frames, boxes=boxes, seed=seed, drift=drift,
                          occluder_boxes=occ_boxes)


# ---------------------------------------------------------------------------
# Curriculum pair sampling
# ---------------------------------------------------------------------------

def curriculum_distance(epoch: int, config: SamplerConfig) -> int:
    """Max template/search frame distance; grows from the curriculum start epoch."""
    extra = max(0, epoch - config.curriculum_start_epoch + 1)
    return config.base_distance + config.curriculum_step * extra


def _negative_region(
    video: SyntheticVideo, frame_idx: int, avoid: BBox, side: float,
    rng: np.random.Generator, attempts: int = 64,
) -> Optional[BBox]:
    """A square region inside the frame with zero overlap against ``avoid``."""
    h, w = video.frames[frame_idx].shape[:2]
    if side >= w or side >= h:
        return None
    for _ in range(attempts):
        x0 = float(rng.uniform(0, w - side))
        y0 = float(rng.uniform(0, h - side))
        region = BBox(x0, y0, x0 + side, y0 + side)
        if iou(region, avoid) == 0.0:
            return region
    return None


def sample_pair(
    video: SyntheticVideo,
    epoch: int,
    rng: np.random.Generator,
    config: SamplerConfig,
    template_out: int = TEMPLATE_OUT,
    search_out: int = SEARCH_OUT,
    negative_pool: Optional[Sequence[SyntheticVideo]] = None,
) -> TrainingSample:
    """Draw (template, search, dynamic, negative) crops under the frame-distance curriculum.

    The search frame sits within the curriculum distance of the template frame
    (clamped to the video); the dynamic frame is strictly between them when
    such a frame exists, else it reuses the template frame. The negative crop
    comes from the dynamic frame with zero overlap against the dynamic
    template's crop region when geometrically possible, otherwise from another
    video in the pool.
    """
    n = len(video)
    d = curriculum_distance(epoch, config)
    t = int(rng.integers(0, n))
    lo, hi = max(0, t - d), min(n - 1, t + d)
    s = int(rng.integers(lo, hi + 1))
    between = range(min(t, s) + 1, max(t, s))
    dyn = int(rng.choice(np.asarray(between))) if len(between) > 0 else t

    template_img, _ = crop_template(video.frames[t], video.boxes[t], config, template_out)
    search_img, s_tf = crop_search(video.frames[s], video.boxes[s], config, search_out)
    gt_box = s_tf.apply_box(video.boxes[s])
    dynamic_img, _ = crop_template(video.frames[dyn], video.boxes[dyn], config, template_out)

    dyn_box = video.boxes[dyn]
    dyn_side = template_region_side(dyn_box, config)
    dcx, dcy = dyn_box.center
    dyn_region = BBox(dcx - dyn_side / 2, dcy - dyn_side / 2,
                      dcx + dyn_side / 2, dcy + dyn_side / 2)

    neg_side = 2.0 * dyn_side
    region = _negative_region(video, dyn, dyn_region, neg_side, rng)
    neg_meta = {"negative_same_frame": region is not None}
    if region is None and negative_pool:
        others = [v for v in negative_pool if v is not video]
        if others:
            alt = others[int(rng.integers(0, len(others)))]
            fidx = int(rng.integers(0, len(alt)))
            abox = alt.boxes[fidx]
            aside = 2.0 * template_region_side(abox, config)
            acx, acy = abox.center
            avoid = BBox(acx - aside / 4, acy - aside / 4, acx + aside / 4, acy + aside / 4)
            region = _negative_region(alt, fidx, avoid, aside, rng)
            if region is not None:
                video_for_neg, fidx_for_neg = alt, fidx
                neg_meta["negative_video_seed"] = alt.seed
    if region is not None and neg_meta["negative_same_frame"]:
        video_for_neg, fidx_for_neg = video, dyn
    if region is None:
        # degenerate geometry: fall back to the far corner of the dynamic frame
        h, w = video.frames[dyn].shape[:2]
        x0 = 0.0 if dcx > w / 2 else w - neg_side
        y0 = 0.0 if dcy > h / 2 else h - neg_side
        region = BBox(x0, y0, x0 + neg_side, y0 + neg_side)
        video_for_neg, fidx_for_neg = video, dyn
        neg_meta["negative_same_frame"] = False

    neg_frame = video_for_neg.frames[fidx_for_neg]
    fill = _region_mean_rgb(neg_frame, region.x_min, region.y_min, region.x_max, region.y_max)
    negative_img = _warp_square(
        neg_frame, region.x_min, region.y_min, region.width, search_out, fill
    )

    meta = {
        "template_frame": t, "search_frame": s, "dynamic_frame": dyn,
        "distance": d, "negative_region": tuple(region),
        "dynamic_region": tuple(dyn_region), **neg_meta,
    }
    return TrainingSample(
        template_img=template_img, search_img=search_img,
        dynamic_img=dynamic_img, negative_img=negative_img,
        gt_box=gt_box, meta=meta,
    )


# ---------------------------------------------------------------------------
# Dataset directory I/O
# ---------------------------------------------------------------------------

def save_video(video: SyntheticVideo, out_dir: str | Path) -> Path:
    """Numbered PNG frames plus one annotation line per frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames):
        cv2.imwrite(str(out / f"{i:06d}.png"), frame)
    lines = [
        f"{i} {b.x_min:.3f} {b.y_min:.3f} {b.x_max:.3f} {b.y_max:.3f}"
        for i, b in enumerate(video.boxes)
    ]
    (out / "annotations.txt").write_text("\n".join(lines) + "\n")
    return out


def load_video(video_dir: str | Path) -> tuple[list[np.ndarray], list[BBox]]:
    vdir = Path(video_dir)
    boxes = []
    for line in (vdir / "annotations.txt").read_text().splitlines():
        parts = line.split()
        boxes.append(BBox(*(float(v) for v in parts[1:5])))
    frames = []
    for i in range(len(boxes)):
        frame = cv2.imread(str(vdir / f"{i:06d}.png"))
        if frame is None:
            raise FileNotFoundError(f"missing frame {i} in {vdir}")
        frames.append(frame)
    return frames, boxes


def dataset_hash(root: str | Path) -> str:
    """Content hash over every frame and annotation file, order-independent."""
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
