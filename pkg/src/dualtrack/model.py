"""Network graph: backbone, channel adjustment, pixel-wise fusion, prediction heads.

The template branch (128 px crop) and search branch (256 px crop) share one
backbone that emits a stride-16 (or stride-8) feature map; an AdjustLayer maps
it to a constant channel count. Template features are average-pooled to a small
correlation grid, correlated cell-by-cell against the search features, and the
correlation channels are fused back into the search features before the
classification and box-regression heads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn


class ConfigError(ValueError):
    """Invalid configuration value; carries the offending field name."""

    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.field = fieldname


class ShapeError(ValueError):
    """An input's spatial or channel shape violates an operation contract."""


# sigmoid(-2.2) ~ 0.10: early in training the static template dominates the mix
RAW_MIX_INIT = -2.2

# classification head bias prior keeps initial foreground probability low
CLS_BIAS_INIT = -2.0


@dataclass(frozen=True)
class ModelConfig:
    backbone_stages: int = 4
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    final_stride: int = 16
    adjusted_channels: int = 128
    template_size: int = 128
    search_size: int = 256
    template_corr_cells: int = 16
    head_blocks: int = 2
    dual_template: bool = True

    def __post_init__(self):
        if self.final_stride not in (8, 16):
            raise ConfigError("final_stride", f"must be 8 or 16, got {self.final_stride}")
        if self.search_size != 2 * self.template_size:
            raise ConfigError(
                "search_size",
                f"must be 2x template_size ({self.template_size}), got {self.search_size}",
            )
        for name in ("template_size", "search_size"):
            if getattr(self, name) % self.final_stride != 0:
                raise ConfigError(name, f"must be divisible by final_stride={self.final_stride}")
        side = math.isqrt(self.template_corr_cells)
        if side * side != self.template_corr_cells:
            raise ConfigError("template_corr_cells", "must be a perfect square")
        if self.template_corr_cells > self.template_grid**2:
            raise ConfigError(
                "template_corr_cells",
                f"exceeds template grid of {self.template_grid}x{self.template_grid}",
            )
        if len(self.backbone_channels) != self.backbone_stages:
            raise ConfigError("backbone_channels", "length must equal backbone_stages")
        if self.backbone_stages < int(math.log2(self.final_stride)):
            raise ConfigError("backbone_stages", "too few stages for the requested stride")
        if self.head_blocks < 1:
            raise ConfigError("head_blocks", "must be >= 1")

    @property
    def template_grid(self) -> int:
        return self.template_size // self.final_stride

    @property
    def search_grid(self) -> int:
        return self.search_size // self.final_stride

    @property
    def corr_side(self) -> int:
        return math.isqrt(self.template_corr_cells)

    def stage_strides(self) -> tuple[int, ...]:
        """Per-stage downsampling; the non-downsampling stages go last."""
        downsamples = int(math.log2(self.final_stride))
        return tuple(2 if i < downsamples else 1 for i in range(self.backbone_stages))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class FeatureMap:
    """C x H x W feature tensor with its pixel stride relative to the source crop."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be rank 3, got shape {tuple(self.data.shape)}")
        if self.data.shape[1] != self.data.shape[2]:
            raise ShapeError(f"feature map must be square, got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_side(self) -> int:
        return self.data.shape[1]

    @property
    def crop_size(self) -> int:
        return self.stride * self.spatial_side


@dataclass
class HeadOutputs:
    """Raw per-cell logits (1 x g x g) and box-regression activations (4 x g x g)."""

    cls_map: torch.Tensor
    reg_map: torch.Tensor


class BatchNorm2d(nn.Module):
    """Batch normalization spelled out in primitive tensor ops.

    This torch build's native batch_norm backward mis-computes gradients when
    one normalized feature map feeds both operands of a matmul (the Siamese
    correlation pattern); torch.autograd.gradcheck fails on a minimal
    functional repro. Composing the normalization from elementwise ops keeps
    autograd exact. Semantics match nn.BatchNorm2d (momentum 0.1, unbiased
    running variance).
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.register_buffer("num_batches_tracked", torch.tensor(0, dtype=torch.long))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            mean = x.mean(dim=(0, 2, 3))
            var = x.var(dim=(0, 2, 3), unbiased=False)
            with torch.no_grad():
                n = x.numel() / x.shape[1]
                unbiased = var.detach() * (n / max(n - 1.0, 1.0))
                self.running_mean += self.momentum * (mean.detach() - self.running_mean)
                self.running_var += self.momentum * (unbiased - self.running_var)
                self.num_batches_tracked += 1
        else:
            mean = self.running_mean
            var = self.running_var
        inv = torch.rsqrt(var.reshape(1, -1, 1, 1) + self.eps)
        scale = inv * self.weight.reshape(1, -1, 1, 1)
        return (x - mean.reshape(1, -1, 1, 1)) * scale + self.bias.reshape(1, -1, 1, 1)


def _conv_bn_relu(c_in: int, c_out: int, kernel: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
        BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Plain four-stage CNN; each stage is a 3x3 Conv-BN-ReLU block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        stages = []
        c_in = 3
        for c_out, stride in zip(config.backbone_channels, config.stage_strides()):
            stages.append(_conv_bn_relu(c_in, c_out, 3, stride))
            c_in = c_out
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class AdjustLayer(nn.Module):
    """Maps backbone output to a constant channel count: 1x1 convolution + BN."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 1, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.bn(self.conv(x))


class FusionBlock(nn.Module):
    """Correlation channels concatenated with convolved search features, then aggregated.

    The search map goes through a 3x3 Conv-BN-ReLU block, is correlated
    cell-by-cell against the (reduced) template, and the wh correlation
    channels are concatenated and squeezed back to the working width by a
    1x1 Conv-BN-ReLU block.
    """

    def __init__(self, channels: int, corr_cells: int):
        super().__init__()
        self.corr_cells = corr_cells
        self.pre = _conv_bn_relu(channels, channels, 3)
        self.post = _conv_bn_relu(channels + corr_cells, channels, 1)

    def forward(self, search: torch.Tensor, template: torch.Tensor) -> torch.Tensor:
        # search: N x C x H x W, template: N x C x h x w (h*w == corr_cells)
        if search.shape[1] != template.shape[1]:
            raise ShapeError(
                f"channel mismatch: search {search.shape[1]} vs template {template.shape[1]}"
            )
        if template.shape[2] * template.shape[3] != self.corr_cells:
            raise ShapeError(
                f"template grid {tuple(template.shape[2:])} does not match "
                f"{self.corr_cells} correlation cells"
            )
        s = self.pre(search)
        n, c, h, w = s.shape
        corr = torch.matmul(
            template.reshape(n, c, self.corr_cells).transpose(1, 2),
            s.reshape(n, c, h * w),
        ).reshape(n, self.corr_cells, h, w)
        return self.post(torch.cat([corr, s], dim=1))


class PredictionHeads(nn.Module):
    """Two towers of 3x3 Conv-BN-ReLU blocks; final 3x3 convs emit 1 + 4 channels."""

    def __init__(self, channels: int, head_blocks: int):
        super().__init__()
        self.cls_tower = nn.Sequential(
            *[_conv_bn_relu(channels, channels, 3) for _ in range(head_blocks)]
        )
        self.reg_tower = nn.Sequential(
            *[_conv_bn_relu(channels, channels, 3) for _ in range(head_blocks)]
        )
        self.cls_out = nn.Conv2d(channels, 1, 3, padding=1)
        self.reg_out = nn.Conv2d(channels, 4, 3, padding=1)
        nn.init.constant_(self.cls_out.bias, CLS_BIAS_INIT)
        nn.init.zeros_(self.reg_out.bias)

    def forward(self, fused: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.cls_out(self.cls_tower(fused)), self.reg_out(self.reg_tower(fused))


class TrackerNet(nn.Module):
    """The full differentiable graph shared by training and inference."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config)
        self.adjust = AdjustLayer(config.backbone_channels[-1], config.adjusted_channels)
        self.fusion = FusionBlock(config.adjusted_channels, config.template_corr_cells)
        self.heads = PredictionHeads(config.adjusted_channels, config.head_blocks)
        if config.dual_template:
            self.raw_mix = nn.Parameter(torch.tensor(float(RAW_MIX_INIT)))
        else:
            self.register_parameter("raw_mix", None)

    @property
    def dtype(self) -> torch.dtype:
        return self.adjust.conv.weight.dtype

    def mix_weight(self) -> torch.Tensor:
        """w = sigmoid(raw_mix); exactly 0 when the dual-template mix is disabled."""
        if self.raw_mix is None:
            return torch.zeros((), dtype=self.dtype)
        return torch.sigmoid(self.raw_mix)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Backbone + AdjustLayer on an N x 3 x H x W batch."""
        return self.adjust(self.backbone(images))

    def extract_features(self, image: np.ndarray | torch.Tensor) -> FeatureMap:
        """Feature map of a single H x W x 3 crop, normalized to [0, 1]."""
        x = image_to_tensor(image, self.dtype)
        side = x.shape[-1]
        if side % self.config.final_stride != 0:
            raise ShapeError(
                f"image side {side} not divisible by stride {self.config.final_stride}"
            )
        return FeatureMap(self.features(x)[0], self.config.final_stride)

    def fusion_block(self, search_feats: FeatureMap, template_feats: FeatureMap) -> FeatureMap:
        """Fuse a search feature map with an already-reduced template feature map."""
        fused = self.fusion(search_feats.data[None], template_feats.data[None])[0]
        return FeatureMap(fused, search_feats.stride)

    def run_heads(self, fused: FeatureMap) -> HeadOutputs:
        if fused.channels != self.config.adjusted_channels:
            raise ShapeError(
                f"fused map has {fused.channels} channels, "
                f"expected {self.config.adjusted_channels}"
            )
        cls, reg = self.heads(fused.data[None])
        return HeadOutputs(cls_map=cls[0], reg_map=reg[0])

    def forward(
        self, search: torch.Tensor, template_static: torch.Tensor, template_dynamic: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Batched training pass: images in, (cls logits, reg activations) out."""
        f_s = self.features(search)
        w = self.mix_weight()
        f_t = (1.0 - w) * self.features(template_static) + w * self.features(template_dynamic)
        reduced = reduce_grid(f_t, self.config.corr_side)
        return self.heads(self.fusion(f_s, reduced))


def image_to_tensor(image: np.ndarray | torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """H x W x 3 image (uint8 or [0, 1] float) -> 1 x 3 x H x W tensor."""
    if isinstance(image, torch.Tensor):
        x = image
    else:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected H x W x 3 image, got shape {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float64) / 255.0
        x = torch.from_numpy(np.ascontiguousarray(arr))
    if x.ndim == 3 and x.shape[2] == 3:
        x = x.permute(2, 0, 1)
    if float(x.min()) < -1e-6 or float(x.max()) > 1.0 + 1e-6:
        raise ValueError("image values must be normalized to [0, 1]")
    return x.to(dtype)[None]


def pixel_wise_correlation(template_feats, search_feats):
    """Phi_corr = Phi_T^T Phi_S on spatially flattened C x wh and C x WH features.

    Entry (i, j) is the dot product of template cell i's channel vector with
    search cell j's. Accepts numpy arrays or torch tensors.
    """
    if template_feats.ndim != 2 or search_feats.ndim != 2:
        raise ShapeError("inputs must be rank-2 (channels x cells)")
    if template_feats.shape[0] != search_feats.shape[0]:
        raise ShapeError(
            f"channel mismatch: {template_feats.shape[0]} vs {search_feats.shape[0]}"
        )
    return template_feats.swapaxes(0, 1) @ search_feats


def reduce_grid(feats: torch.Tensor, side: int) -> torch.Tensor:
    """Average-pool an N x C x H x W grid down to N x C x side x side."""
    h = feats.shape[-1]
    if h == side:
        return feats
    if h % side != 0:
        raise ShapeError(f"grid side {h} not divisible by target side {side}")
    k = h // side
    return torch.nn.functional.avg_pool2d(feats, kernel_size=k, stride=k)


def reduce_template(template_feats: FeatureMap, cells: int) -> FeatureMap:
    """Average-pool a template feature map down to sqrt(cells) x sqrt(cells)."""
    side = math.isqrt(cells)
    if side * side != cells:
        raise ShapeError(f"cells={cells} is not a perfect square")
    if cells > template_feats.spatial_side**2:
        raise ShapeError(
            f"cells={cells} exceeds current grid of {template_feats.spatial_side}^2"
        )
    reduced = reduce_grid(template_feats.data[None], side)[0]
    # stride bookkeeping: the pooled cell covers k source cells
    k = template_feats.spatial_side // side
    return FeatureMap(reduced, template_feats.stride * k)


def build_model(
    config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float64
) -> TrackerNet:
    """Deterministically initialized network in eval mode."""
    torch.manual_seed(seed)
    net = TrackerNet(config).to(dtype)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# Static cost accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    """Analytic parameter and FLOP counts for one search-frame inference.

    Every learnable layer appears exactly once, so the params total matches the
    network's learnable parameter count. FLOPs are charged for the per-frame
    search path; template feature extraction and mixing are amortized (they run
    once per track plus once per dynamic update) and charged zero.
    """

    params: int
    flops: int
    per_layer: list[LayerCost] = field(default_factory=list)
    flop_convention: str = "1 multiply-add = 2 FLOPs; BN and activations cost C*H*W each"

    def flops_matching(self, prefix: str) -> int:
        return sum(l.flops for l in self.per_layer if l.name.startswith(prefix))

    def params_matching(self, prefix: str) -> int:
        return sum(l.params for l in self.per_layer if l.name.startswith(prefix))

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "flop_convention": self.flop_convention,
            "per_layer": [{"name": l.name, "params": l.params, "flops": l.flops}
                          for l in self.per_layer],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def conv_cost(
    kernel: int, c_in: int, c_out: int, out_h: int, out_w: int, bias: bool = True
) -> tuple[int, int]:
    """(params, flops) of one convolution; flops = 2 * K^2 * C_in * C_out * H * W."""
    params = kernel * kernel * c_in * c_out + (c_out if bias else 0)
    flops = 2 * kernel * kernel * c_in * c_out * out_h * out_w
    return params, flops


def bn_cost(channels: int, out_h: int, out_w: int) -> tuple[int, int]:
    return 2 * channels, channels * out_h * out_w


def activation_flops(channels: int, out_h: int, out_w: int) -> int:
    return channels * out_h * out_w


def count_cost(config: ModelConfig) -> CostReport:
    """Per-layer analytic cost of the network defined by ``config``."""
    layers: list[LayerCost] = []

    def block(name: str, kernel: int, c_in: int, c_out: int, out: int,
              relu: bool = True, flops_on: bool = True):
        scale = 1 if flops_on else 0
        p, f = conv_cost(kernel, c_in, c_out, out, out, bias=False)
        layers.append(LayerCost(f"{name}.conv", p, f * scale))
        p, f = bn_cost(c_out, out, out)
        layers.append(LayerCost(f"{name}.bn", p, f * scale))
        if relu:
            layers.append(LayerCost(f"{name}.relu", 0, activation_flops(c_out, out, out) * scale))

    # backbone + adjust, applied to the search crop every frame
    side = config.search_size
    c_in = 3
    for i, (c_out, stride) in enumerate(
        zip(config.backbone_channels, config.stage_strides()), start=1
    ):
        side //= stride
        block(f"backbone.stage{i}", 3, c_in, c_out, side)
        c_in = c_out
    block("adjust", 1, c_in, config.adjusted_channels, side, relu=False)

    c = config.adjusted_channels
    grid = config.search_grid
    wh = config.template_corr_cells

    # template mixing: one learnable scalar, amortized across the track
    if config.dual_template:
        layers.append(LayerCost("dual_template.mix", 1, 0))

    # pixel-wise fusion on the search grid
    block("fusion.pre", 3, c, c, grid)
    layers.append(LayerCost("fusion.correlation", 0, 2 * c * wh * grid * grid))
    block("fusion.post", 1, c + wh, c, grid)

    for head in ("cls", "reg"):
        for j in range(1, config.head_blocks + 1):
            block(f"heads.{head}.block{j}", 3, c, c, grid)
        n_out = 1 if head == "cls" else 4
        p, f = conv_cost(3, c, n_out, grid, grid, bias=True)
        layers.append(LayerCost(f"heads.{head}.out", p, f))

    return CostReport(
        params=sum(l.params for l in layers),
        flops=sum(l.flops for l in layers),
        per_layer=layers,
    )
