"""Training loop: batch assembly, loss wiring, plateau schedule, checkpoints."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .boxes import iou
from .checkpoint import save_checkpoint
from .datapipe import SamplerConfig, SyntheticVideo, TrainingSample, augment, sample_pair
from .losses import (
    LossConfig,
    encode_targets,
    focal_loss,
    iou_loss,
    total_loss,
    triplet_loss,
)
from .model import ConfigError, ModelConfig, TrackerNet, build_model, reduce_grid
from .templates import weighted_average_pool
from .tracker import (
    TrackerConfig,
    decode_regression,
    distances_to_boxes,
    raw_to_distances,
    track_video,
)

# training-time guard: exp of the raw regression activation can overflow early on
MAX_RAW_REG = 8.0


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    # full-scale training uses batch 512 and ~1e6 pairs/epoch on multi-GPU;
    # the defaults here are desk-scale stand-ins
    learning_rate: float = 4e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    batch_size: int = 16
    epochs: int = 20
    pairs_per_epoch: int = 200
    fixed_pairs: Optional[int] = None  # presample once and overfit that bank
    max_steps: Optional[int] = None
    monitor_metric: str = "mean_iou"
    seed: int = 0
    val_every: int = 1
    precision: str = "float64"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor", "must be in (0, 1)")
        for name in ("plateau_patience", "batch_size", "epochs", "pairs_per_epoch",
                     "val_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", "must be float32 or float64")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


class PlateauReducer:
    """Cut the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, factor: float, patience: int, min_delta: float = 1e-6):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best: Optional[float] = None
        self.bad_epochs = 0
        self.reductions = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> bool:
        if self.best is not None and metric <= self.best + self.min_delta:
            self.bad_epochs += 1
        else:
            self.best = metric
            self.bad_epochs = 0
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            self.reductions += 1
            return True
        return False


def _stack_images(images: Sequence[np.ndarray], dtype: torch.dtype) -> torch.Tensor:
    arr = np.stack(images).astype(np.float64) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def train_step(
    batch: Sequence[TrainingSample],
    net: TrackerNet,
    optimizer: torch.optim.Optimizer,
    loss_config: LossConfig,
) -> dict:
    """One optimizer update over a batch; returns the loss components.

    Both template branches feed the convex mix; the negative crop runs through
    the same fusion and classification head so its embedding uses
    confidence-weighted pooling, like the search branch.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = net.config
    dtype = net.dtype

    t_imgs = _stack_images([s.template_img for s in batch], dtype)
    d_imgs = _stack_images([s.dynamic_img for s in batch], dtype)
    s_imgs = _stack_images([s.search_img for s in batch], dtype)
    n_imgs = _stack_images([s.negative_img for s in batch], dtype)

    encoded = [encode_targets(s.gt_box, cfg.final_stride, cfg.search_grid) for s in batch]
    tgt_dist = torch.from_numpy(np.stack([e.targets for e in encoded])).to(dtype)
    pos_mask = torch.from_numpy(np.stack([e.positive_mask for e in encoded]))
    labels = torch.from_numpy(np.stack([e.cls_labels for e in encoded])).to(dtype)

    f_t = net.features(t_imgs)
    f_d = net.features(d_imgs)
    w = net.mix_weight()
    f_mix = (1.0 - w) * f_t + w * f_d
    reduced = reduce_grid(f_mix, cfg.corr_side)

    f_s = net.features(s_imgs)
    cls, reg = net.heads(net.fusion(f_s, reduced))

    pred_boxes = distances_to_boxes(
        raw_to_distances(reg, cfg.final_stride, max_raw=MAX_RAW_REG), cfg.final_stride
    ).permute(0, 2, 3, 1)
    target_boxes = distances_to_boxes(tgt_dist, cfg.final_stride).permute(0, 2, 3, 1)
    l_reg, reg_empty = iou_loss(pred_boxes, target_boxes, pos_mask)
    l_cls = focal_loss(cls[:, 0], labels, loss_config)

    scores = torch.sigmoid(cls)
    e_t = f_mix.mean(dim=(2, 3))
    e_s = weighted_average_pool(f_s, scores)
    f_n = net.features(n_imgs)
    cls_n, _ = net.heads(net.fusion(f_n, reduced))
    e_n = weighted_average_pool(f_n, torch.sigmoid(cls_n))
    l_tri = triplet_loss(e_t, e_s, e_n, loss_config)

    components = {"triplet": l_tri, "reg": l_reg, "cls": l_cls}
    for name, value in components.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value.detach()))
    loss = total_loss(l_tri, l_reg, l_cls, loss_config)

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()

    return {
        "loss_triplet": float(l_tri.detach()),
        "loss_reg": float(l_reg.detach()),
        "loss_cls": float(l_cls.detach()),
        "loss_total": float(loss.detach()),
        "train_iou": float(1.0 - l_reg.detach()) if not reg_empty else float("nan"),
        "reg_empty": reg_empty,
    }


def pair_mean_iou(net: TrackerNet, samples: Sequence[TrainingSample],
                  batch_size: int = 16) -> float:
    """Mean IoU of the argmax-cell predicted box against each sample's target.

    Eval-mode forward over (template, dynamic, search) triples; no window
    penalty. This is the training-set prediction quality metric.
    """
    cfg = net.config
    was_training = net.training
    net.eval()
    ious = []
    with torch.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            t_imgs = _stack_images([s.template_img for s in chunk], net.dtype)
            d_imgs = _stack_images([s.dynamic_img for s in chunk], net.dtype)
            s_imgs = _stack_images([s.search_img for s in chunk], net.dtype)
            cls, reg = net(s_imgs, t_imgs, d_imgs)
            scores = torch.sigmoid(cls[:, 0])
            for b, sample in enumerate(chunk):
                flat = int(scores[b].reshape(-1).argmax())
                i, j = divmod(flat, cfg.search_grid)
                pred = decode_regression(reg[b], (i, j), cfg.final_stride, cfg.search_size)
                ious.append(iou(pred, sample.gt_box))
    if was_training:
        net.train()
    return float(np.mean(ious))


def evaluate_tracking(
    net: TrackerNet,
    videos: Sequence[SyntheticVideo],
    tracker_config: TrackerConfig = TrackerConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
) -> float:
    """Mean per-frame IoU over full tracking runs (the validation protocol)."""
    was_training = net.training
    net.eval()
    ious = []
    for video in videos:
        outputs = track_video(net, video.frames, video.boxes[0], tracker_config, sampler_config)
        ious.extend(iou(o.box, g) for o, g in zip(outputs, video.boxes))
    if was_training:
        net.train()
    return float(np.mean(ious))


@dataclass
class TrainResult:
    net: TrackerNet
    history: list[dict] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    best_metric: float = float("-inf")
    steps: int = 0
    samples: Optional[list[TrainingSample]] = None  # the fixed pair bank, when used


def _draw_sample(
    videos: Sequence[SyntheticVideo], epoch: int, rng: np.random.Generator,
    sampler_config: SamplerConfig, model_config: ModelConfig,
) -> TrainingSample:
    video = videos[int(rng.integers(0, len(videos)))]
    raw = sample_pair(
        video, epoch, rng, sampler_config,
        template_out=model_config.template_size,
        search_out=model_config.search_size,
        negative_pool=videos,
    )
    return augment(raw, rng, sampler_config)


def fit(
    train_videos: Sequence[SyntheticVideo],
    val_videos: Sequence[SyntheticVideo],
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig(),
    model_config: ModelConfig = ModelConfig(),
    sampler_config: SamplerConfig = SamplerConfig(),
    out_dir: Optional[str | Path] = None,
    net: Optional[TrackerNet] = None,
    start_epoch: int = 1,
    log=None,
) -> TrainResult:
    """Epoch loop with curriculum sampling, plateau LR schedule, best-checkpoint save.

    When ``val_videos`` is empty the monitored mean IoU falls back to the
    training-batch value (1 - regression loss).
    """
    if not train_videos:
        raise ValueError("need at least one training video")
    rng = np.random.default_rng(train_config.seed)
    torch.manual_seed(train_config.seed)
    if net is None:
        net = build_model(model_config, seed=train_config.seed, dtype=train_config.dtype)
    optimizer = torch.optim.Adam(net.parameters(), lr=train_config.learning_rate)
    scheduler = PlateauReducer(
        optimizer, train_config.plateau_factor, train_config.plateau_patience
    )
    result = TrainResult(net=net)

    bank: Optional[list[TrainingSample]] = None
    if train_config.fixed_pairs:
        bank = [
            _draw_sample(train_videos, start_epoch, rng, sampler_config, model_config)
            for _ in range(train_config.fixed_pairs)
        ]
        result.samples = bank

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    done = False
    for epoch in range(start_epoch, start_epoch + train_config.epochs):
        if done:
            break
        net.train()
        if bank is not None:
            order = rng.permutation(len(bank))
            epoch_samples = [bank[i] for i in order]
        else:
            epoch_samples = [
                _draw_sample(train_videos, epoch, rng, sampler_config, model_config)
                for _ in range(train_config.pairs_per_epoch)
            ]

        stats: list[dict] = []
        for lo in range(0, len(epoch_samples), train_config.batch_size):
            batch = epoch_samples[lo:lo + train_config.batch_size]
            stats.append(train_step(batch, net, optimizer, loss_config))
            result.steps += 1
            if train_config.max_steps and result.steps >= train_config.max_steps:
                done = True
                break

        means = {
            k: float(np.nanmean([s[k] for s in stats]))
            for k in ("loss_triplet", "loss_reg", "loss_cls", "loss_total", "train_iou")
        }
        if val_videos and epoch % train_config.val_every == 0:
            metric = evaluate_tracking(net, val_videos, sampler_config=sampler_config)
        else:
            metric = means["train_iou"]
        row = {"epoch": epoch, **means, "val_mean_iou": metric, "lr": scheduler.lr}
        result.history.append(row)
        if log:
            log(row)

        if metric > result.best_metric:
            result.best_metric = metric
            if out is not None:
                result.checkpoint_path = save_checkpoint(
                    out / "checkpoint.npz", net,
                    extra={"epoch": epoch, "metric": metric, "lr": scheduler.lr},
                )
        scheduler.step(metric)

    net.eval()
    if out is not None:
        write_metrics_csv(out / "metrics.csv", result.history)
        if result.checkpoint_path is None:
            result.checkpoint_path = save_checkpoint(
                out / "checkpoint.npz", net,
                extra={"epoch": start_epoch + train_config.epochs - 1,
                       "metric": result.best_metric, "lr": scheduler.lr},
            )
    return result


def write_metrics_csv(path: str | Path, history: list[dict]) -> Path:
    p = Path(path)
    if not history:
        p.write_text("")
        return p
    with open(p, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)
    return p
