"""Pydantic request/response models for the HTTP service."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class Box(BaseModel):
    x_min: float
    y_min: float
    x_max: float
    y_max: float


class SynthRequest(BaseModel):
    out_dir: str
    seed: int = 0
    n_videos: int = Field(default=1, ge=1)
    n_frames: int = Field(default=100, ge=1)
    height: int = 320
    width: int = 320
    drift: Optional[dict] = None  # DriftProfile fields; None -> mild profile
    config_path: Optional[str] = None


class SynthResponse(BaseModel):
    out_dir: str
    video_dirs: list[str]
    dataset_hash: str


class CostRequest(BaseModel):
    model: dict = Field(default_factory=dict)  # ModelConfig overrides


class LayerCostOut(BaseModel):
    name: str
    params: int
    flops: int


class CostResponse(BaseModel):
    params: int
    flops: int
    flop_convention: str
    per_layer: list[LayerCostOut]


class EvalRequest(BaseModel):
    results_path: str
    annotations_path: str
    out_dir: Optional[str] = None


class EvalResponse(BaseModel):
    metrics: dict


class TrainRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    config_path: Optional[str] = None
    overrides: dict = Field(default_factory=dict)  # {section: {field: value}}
    seed: Optional[int] = None
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    resume_from: Optional[str] = None


class TrainJobStatus(BaseModel):
    job_id: str
    status: Literal["running", "done", "failed"]
    epochs_done: int = 0
    steps_done: int = 0
    last_row: Optional[dict] = None
    best_metric: Optional[float] = None
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None
    error: Optional[str] = None


class TrackRequest(BaseModel):
    checkpoint: str
    video_dir: str
    out_dir: str
    init_box: Optional[Box] = None  # default: first annotation line
    precision: Literal["float32", "float64"] = "float32"
    config_path: Optional[str] = None
    overrides: dict = Field(default_factory=dict)
    seed: Optional[int] = None


class TrackResponse(BaseModel):
    results_path: str
    n_frames: int
    template_updates: int
    mean_confidence: float


class BenchRequest(BaseModel):
    protocol: Literal["online", "offline"]
    out_dir: str
    latency_ms: Optional[float] = None  # synthetic latency profile
    checkpoint: Optional[str] = None  # wall-clock measurement of a real model
    device: str = "efficient"  # efficient | inefficient | custom:<path>
    config_path: Optional[str] = None
    overrides: dict = Field(default_factory=dict)
    seed: Optional[int] = None


class BenchResponse(BaseModel):
    protocol: str
    aggregates: dict
    records_csv: str
    telemetry_csv: Optional[str] = None
    aggregates_json: str


class SessionOpenRequest(BaseModel):
    checkpoint: str
    box: Box
    frame_b64: Optional[str] = None  # base64-encoded PNG
    frame_path: Optional[str] = None  # server-local alternative
    precision: Literal["float32", "float64"] = "float32"
    overrides: dict = Field(default_factory=dict)


class SessionOpenResponse(BaseModel):
    session_id: str


class SessionStepRequest(BaseModel):
    frame_b64: Optional[str] = None
    frame_path: Optional[str] = None


class SessionStepResponse(BaseModel):
    frame_index: int
    box: Box
    confidence: float
    similarity: float
    template_updated: bool
