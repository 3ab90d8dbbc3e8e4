"""FastAPI service wrapping the core package.

The service owns model loading (one cached network per checkpoint/precision),
interactive tracking sessions, synchronous data/eval/bench/cost commands, and
background training jobs. All file paths are interpreted on the server's
filesystem; frames can also be sent inline as base64 PNG.
"""
from __future__ import annotations

import base64
import threading
import traceback
import uuid
from pathlib import Path

import cv2
import numpy as np
import torch
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..bench import (
    PROFILES,
    constant_latency,
    load_device_profile,
    run_offline,
    run_online,
    wall_clock_adapter,
)
from ..boxes import BBox, DegenerateBoxError
from ..checkpoint import load_checkpoint
from ..config import config_to_dict, load_config_file
from ..datapipe import (
    DriftProfile,
    SyntheticVideo,
    dataset_hash,
    generate_synthetic,
    load_video,
    save_video,
)
from ..manifest import write_manifest
from ..metrics import evaluate_files
from ..model import ConfigError, count_cost
from ..tracker import init as tracker_init
from ..tracker import step as tracker_step
from ..tracker import track_video, write_results
from ..trainer import fit
from . import schemas

app = FastAPI(title="dualtrack service", version=__version__)

_models: dict[tuple[str, str], object] = {}
_models_lock = threading.Lock()
_sessions: dict[str, dict] = {}
_sessions_lock = threading.Lock()
_jobs: dict[str, dict] = {}
_jobs_lock = threading.Lock()


def _dtype(precision: str) -> torch.dtype:
    return torch.float64 if precision == "float64" else torch.float32


def _get_model(checkpoint: str, precision: str):
    key = (str(Path(checkpoint).resolve()), precision)
    with _models_lock:
        if key not in _models:
            if not Path(checkpoint).exists():
                raise HTTPException(404, f"checkpoint not found: {checkpoint}")
            net, _ = load_checkpoint(checkpoint, dtype=_dtype(precision))
            _models[key] = net
        return _models[key]


def _decode_frame(frame_b64: str | None, frame_path: str | None) -> np.ndarray:
    if frame_b64:
        raw = np.frombuffer(base64.b64decode(frame_b64), dtype=np.uint8)
        frame = cv2.imdecode(raw, cv2.IMREAD_COLOR)
        if frame is None:
            raise HTTPException(400, "frame_b64 does not decode to an image")
        return frame
    if frame_path:
        frame = cv2.imread(frame_path)
        if frame is None:
            raise HTTPException(404, f"frame not found: {frame_path}")
        return frame
    raise HTTPException(400, "provide frame_b64 or frame_path")


def _load_sections(config_path: str | None, overrides: dict):
    try:
        return load_config_file(config_path, overrides)
    except ConfigError as err:
        raise HTTPException(422, str(err)) from err
    except FileNotFoundError as err:
        raise HTTPException(404, str(err)) from err


def _load_dataset(dataset_dir: str) -> list[SyntheticVideo]:
    root = Path(dataset_dir)
    if not root.exists():
        raise HTTPException(404, f"dataset not found: {dataset_dir}")
    video_dirs = sorted(d for d in root.iterdir() if (d / "annotations.txt").exists())
    if (root / "annotations.txt").exists():
        video_dirs = [root]
    if not video_dirs:
        raise HTTPException(400, f"no videos under {dataset_dir}")
    videos = []
    for d in video_dirs:
        frames, boxes = load_video(d)
        videos.append(SyntheticVideo(frames=frames, boxes=boxes, seed=-1,
                                     drift=DriftProfile.none()))
    return videos


@app.get("/health", response_model=schemas.HealthResponse)
def health():
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/synth", response_model=schemas.SynthResponse)
def synth(req: schemas.SynthRequest):
    sections = _load_sections(req.config_path, {})
    try:
        drift = DriftProfile(**req.drift) if req.drift is not None else DriftProfile.mild()
    except TypeError as err:
        raise HTTPException(422, f"drift: {err}") from err
    out = Path(req.out_dir)
    write_manifest(
        "synth", out,
        {"request": req.model_dump(), "config": config_to_dict(sections)},
        config_path=req.config_path, seed=req.seed,
    )
    dirs = []
    for i in range(req.n_videos):
        video = generate_synthetic(
            seed=req.seed + i, n_frames=req.n_frames,
            size=(req.height, req.width), drift=drift,
        )
        dirs.append(str(save_video(video, out / f"video_{i:03d}")))
    return schemas.SynthResponse(
        out_dir=str(out), video_dirs=dirs, dataset_hash=dataset_hash(out)
    )


@app.post("/cost", response_model=schemas.CostResponse)
def cost(req: schemas.CostRequest):
    sections = _load_sections(None, {"model": req.model})
    report = count_cost(sections["model"])
    return schemas.CostResponse(
        params=report.params, flops=report.flops,
        flop_convention=report.flop_convention,
        per_layer=[schemas.LayerCostOut(name=l.name, params=l.params, flops=l.flops)
                   for l in report.per_layer],
    )


@app.post("/eval", response_model=schemas.EvalResponse)
def eval_results(req: schemas.EvalRequest):
    for p in (req.results_path, req.annotations_path):
        if not Path(p).exists():
            raise HTTPException(404, f"file not found: {p}")
    try:
        metrics = evaluate_files(req.results_path, req.annotations_path)
    except ValueError as err:
        raise HTTPException(400, str(err)) from err
    if req.out_dir:
        out = Path(req.out_dir)
        write_manifest("eval", out, {"request": req.model_dump()})
        import json

        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return schemas.EvalResponse(metrics=metrics)


def _train_worker(job_id: str, req: schemas.TrainRequest, sections: dict):
    job = _jobs[job_id]

    def log(row: dict):
        job["epochs_done"] = row["epoch"]
        job["last_row"] = row
        job["steps_done"] = row.get("steps", job.get("steps_done", 0))

    try:
        videos = _load_dataset(req.dataset_dir)
        n_val = int(round(len(videos) * req.val_fraction))
        val = videos[len(videos) - n_val:] if n_val else []
        train = videos[: len(videos) - n_val] or videos
        net, start_epoch = None, 1
        if req.resume_from:
            net, extra = load_checkpoint(req.resume_from, dtype=sections["train"].dtype)
            start_epoch = int(extra.get("epoch", 0)) + 1
        result = fit(
            train, val,
            train_config=sections["train"], loss_config=sections["loss"],
            model_config=sections["model"], sampler_config=sections["sampler"],
            out_dir=req.out_dir, net=net, start_epoch=start_epoch, log=log,
        )
        job["status"] = "done"
        job["best_metric"] = result.best_metric
        job["steps_done"] = result.steps
        job["checkpoint_path"] = str(result.checkpoint_path)
        job["metrics_path"] = str(Path(req.out_dir) / "metrics.csv")
    except Exception as err:  # background thread: surface everything via status
        job["status"] = "failed"
        job["error"] = f"{type(err).__name__}: {err}"
        job["traceback"] = traceback.format_exc()


@app.post("/train", response_model=schemas.TrainJobStatus)
def train(req: schemas.TrainRequest):
    overrides = dict(req.overrides)
    if req.seed is not None:
        overrides.setdefault("train", {})
        overrides["train"] = {**overrides["train"], "seed": req.seed}
    sections = _load_sections(req.config_path, overrides)
    if not Path(req.dataset_dir).exists():
        raise HTTPException(404, f"dataset not found: {req.dataset_dir}")
    write_manifest(
        "train", req.out_dir,
        {"request": req.model_dump(), "config": config_to_dict(sections)},
        config_path=req.config_path, seed=sections["train"].seed,
    )
    job_id = uuid.uuid4().hex[:12]
    with _jobs_lock:
        _jobs[job_id] = {"status": "running", "epochs_done": 0, "steps_done": 0}
    thread = threading.Thread(
        target=_train_worker, args=(job_id, req, sections), daemon=True
    )
    thread.start()
    return _job_status(job_id)


def _job_status(job_id: str) -> schemas.TrainJobStatus:
    job = _jobs.get(job_id)
    if job is None:
        raise HTTPException(404, f"unknown job {job_id}")
    return schemas.TrainJobStatus(job_id=job_id, **{
        k: job.get(k) for k in (
            "status", "epochs_done", "steps_done", "last_row", "best_metric",
            "checkpoint_path", "metrics_path", "error",
        ) if job.get(k) is not None
    })


@app.get("/train/{job_id}", response_model=schemas.TrainJobStatus)
def train_status(job_id: str):
    return _job_status(job_id)


@app.post("/track", response_model=schemas.TrackResponse)
def track(req: schemas.TrackRequest):
    sections = _load_sections(req.config_path, req.overrides)
    net = _get_model(req.checkpoint, req.precision)
    if not Path(req.video_dir).exists():
        raise HTTPException(404, f"video dir not found: {req.video_dir}")
    frames, boxes = load_video(req.video_dir)
    if req.init_box is not None:
        b = req.init_box
        init_box = BBox(b.x_min, b.y_min, b.x_max, b.y_max)
    elif boxes:
        init_box = boxes[0]
    else:
        raise HTTPException(400, "no init box given and no annotations found")
    h, w = frames[0].shape[:2]
    if init_box.x_min >= w or init_box.y_min >= h or init_box.x_max <= 0 or init_box.y_max <= 0:
        raise HTTPException(400, f"init box {tuple(init_box)} outside the first frame")
    out = Path(req.out_dir)
    write_manifest(
        "track", out,
        {"request": req.model_dump(), "config": config_to_dict(sections)},
        config_path=req.config_path, seed=req.seed,
    )
    try:
        outputs = track_video(net, frames, init_box,
                              sections["tracker"], sections["sampler"])
    except DegenerateBoxError as err:
        raise HTTPException(400, str(err)) from err
    results_path = write_results(out / "results.txt", outputs)
    return schemas.TrackResponse(
        results_path=str(results_path),
        n_frames=len(outputs),
        template_updates=sum(o.template_updated for o in outputs),
        mean_confidence=float(np.mean([o.confidence for o in outputs])),
    )


def _bench_callable(req: schemas.BenchRequest, latency_profile: float):
    if req.checkpoint:
        net = _get_model(req.checkpoint, "float32")
        video = generate_synthetic(seed=req.seed or 0, n_frames=32, size=(320, 320))
        session = tracker_init(video.frames[0], video.boxes[0], net)

        def run(k: int):
            return tracker_step(session, video.frames[k % len(video)])

        return wall_clock_adapter(run)
    if req.latency_ms is not None:
        if req.latency_ms <= 0:
            raise HTTPException(422, "latency_ms must be > 0")
        return constant_latency(req.latency_ms / 1000.0)
    return constant_latency(latency_profile)


@app.post("/bench", response_model=schemas.BenchResponse)
def bench(req: schemas.BenchRequest):
    sections = _load_sections(req.config_path, req.overrides)
    if req.device in PROFILES:
        device, profile_latency = PROFILES[req.device]()
    elif req.device.startswith("custom:"):
        path = req.device.split(":", 1)[1]
        if not Path(path).exists():
            raise HTTPException(404, f"device profile not found: {path}")
        try:
            device, profile_latency = load_device_profile(path)
        except (ConfigError, TypeError, ValueError) as err:
            raise HTTPException(422, f"device profile: {err}") from err
    else:
        raise HTTPException(422, f"unknown device profile: {req.device}")

    out = Path(req.out_dir)
    write_manifest(
        "bench", out,
        {"request": req.model_dump(), "config": config_to_dict(sections),
         "device": device.to_dict()},
        config_path=req.config_path, seed=req.seed,
    )
    callable_ = _bench_callable(req, profile_latency)
    if req.protocol == "online":
        report = run_online(callable_, sections["online"], device)
    else:
        report = run_offline(callable_, sections["offline"])
    records_csv = report.to_csv(out / "records.csv")
    telemetry_csv = None
    if report.telemetry:
        telemetry_csv = str(report.telemetry_csv(out / "telemetry.csv"))
    agg_path = out / "aggregates.json"
    agg_path.write_text(report.to_json() + "\n")
    return schemas.BenchResponse(
        protocol=report.protocol, aggregates=report.aggregates,
        records_csv=str(records_csv), telemetry_csv=telemetry_csv,
        aggregates_json=str(agg_path),
    )


@app.post("/sessions", response_model=schemas.SessionOpenResponse)
def open_session(req: schemas.SessionOpenRequest):
    sections = _load_sections(None, req.overrides)
    net = _get_model(req.checkpoint, req.precision)
    frame = _decode_frame(req.frame_b64, req.frame_path)
    box = BBox(req.box.x_min, req.box.y_min, req.box.x_max, req.box.y_max)
    try:
        session = tracker_init(frame, box, net, sections["tracker"], sections["sampler"])
    except DegenerateBoxError as err:
        raise HTTPException(400, str(err)) from err
    session_id = uuid.uuid4().hex[:12]
    with _sessions_lock:
        _sessions[session_id] = {"session": session, "lock": threading.Lock()}
    return schemas.SessionOpenResponse(session_id=session_id)


@app.post("/sessions/{session_id}/step", response_model=schemas.SessionStepResponse)
def step_session(session_id: str, req: schemas.SessionStepRequest):
    with _sessions_lock:
        entry = _sessions.get(session_id)
    if entry is None:
        raise HTTPException(404, f"unknown session {session_id}")
    frame = _decode_frame(req.frame_b64, req.frame_path)
    with entry["lock"]:  # one session, one thread of control
        out = tracker_step(entry["session"], frame)
        frame_index = entry["session"].frame_index
    return schemas.SessionStepResponse(
        frame_index=frame_index,
        box=schemas.Box(x_min=out.box.x_min, y_min=out.box.y_min,
                        x_max=out.box.x_max, y_max=out.box.y_max),
        confidence=out.confidence,
        similarity=out.similarity,
        template_updated=out.template_updated,
    )


@app.delete("/sessions/{session_id}")
def close_session(session_id: str):
    with _sessions_lock:
        if _sessions.pop(session_id, None) is None:
            raise HTTPException(404, f"unknown session {session_id}")
    return {"closed": session_id}
