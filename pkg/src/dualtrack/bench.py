"""Efficiency benchmark: online/offline protocols over a simulated device.

The online protocol replays a fixed-rate camera stream on a virtual clock:
frames arrive every 1/fps seconds, a frame is processed only if the engine is
idle at its arrival instant (zero-length queue), and the engine stays busy for
the callable's reported latency times the current thermal throttle factor.
A first-order device model integrates utilization into temperature and
battery charge between events. The offline protocol runs warmup plus a fixed
count of invocations back to back and reports count / total latency.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ConfigError

# a frame arriving exactly when the engine frees counts as processable
TIME_EPS = 1e-12

TrackerCallable = Callable[[int], tuple[object, float]]


@dataclass(frozen=True)
class OnlineConfig:
    fps: float = 30.0
    duration: float = 1800.0  # seconds
    telemetry_period: float = 1.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ConfigError("fps", "must be > 0")
        if self.duration <= 0:
            raise ConfigError("duration", "must be > 0")
        if self.telemetry_period <= 0:
            raise ConfigError("telemetry_period", "must be > 0")


@dataclass(frozen=True)
class OfflineConfig:
    warmup: int = 20
    count: int = 100

    def __post_init__(self):
        if self.warmup < 1 or self.count < 1:
            raise ConfigError("warmup/count", "must be >= 1")


class ThermalState(IntEnum):
    NOMINAL = 0
    FAIR = 1
    SERIOUS = 2
    CRITICAL = 3


@dataclass(frozen=True)
class DeviceModel:
    """First-order thermal/battery model with hard throttle thresholds.

    Battery drain is derived from energy_per_inference: busy time divided by
    reference_latency gives the equivalent inference count, so a throttled
    (longer-running) inference costs proportionally more energy.
    """

    energy_per_inference: float = 0.2  # joules
    battery_capacity: float = 40_000.0  # joules (~11 Wh)
    heat_rate: float = 0.05  # deg C per second at utilization 1
    cool_rate: float = 0.01  # deg C per second
    ambient_temp: float = 25.0
    fair_temp: float = 35.0
    serious_temp: float = 45.0
    critical_temp: float = 55.0
    throttle_factor: float = 1.5  # latency multiplier at >= serious
    reference_latency: float = 1.0 / 30.0  # seconds per inference for energy accounting

    def __post_init__(self):
        if self.throttle_factor < 1:
            raise ConfigError("throttle_factor", "must be >= 1")
        if not (self.ambient_temp < self.fair_temp < self.serious_temp < self.critical_temp):
            raise ConfigError("thermal thresholds", "must be strictly increasing")
        for name in ("energy_per_inference", "battery_capacity", "heat_rate",
                     "cool_rate", "reference_latency"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be > 0")

    def thermal_state(self, temperature: float) -> ThermalState:
        if temperature >= self.critical_temp:
            return ThermalState.CRITICAL
        if temperature >= self.serious_temp:
            return ThermalState.SERIOUS
        if temperature >= self.fair_temp:
            return ThermalState.FAIR
        return ThermalState.NOMINAL

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "energy_per_inference", "battery_capacity", "heat_rate", "cool_rate",
            "ambient_temp", "fair_temp", "serious_temp", "critical_temp",
            "throttle_factor", "reference_latency")}


@dataclass
class DeviceState:
    temperature: float
    battery: float  # joules remaining


def device_step(
    model: DeviceModel, utilization: float, dt: float, state: Optional[DeviceState] = None
) -> tuple[float, float, ThermalState]:
    """Integrate one interval: returns (battery delta, temperature delta, new state).

    Temperature follows heat_rate * utilization - cool_rate, floored at
    ambient; battery drains by the utilization-equivalent inference energy,
    floored at zero. When ``state`` is given, the deltas are applied to it.
    """
    if not 0.0 <= utilization <= 1.0:
        raise ValueError(f"utilization must be in [0, 1], got {utilization}")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    temp0 = state.temperature if state else model.ambient_temp
    batt0 = state.battery if state else model.battery_capacity

    temp1 = max(model.ambient_temp, temp0 + (model.heat_rate * utilization - model.cool_rate) * dt)
    drain = model.energy_per_inference * (utilization * dt / model.reference_latency)
    batt1 = max(0.0, batt0 - drain)

    if state is not None:
        state.temperature = temp1
        state.battery = batt1
    return batt1 - batt0, temp1 - temp0, model.thermal_state(temp1)


@dataclass
class FrameRecord:
    time: float
    latency: float  # effective (throttled) latency; 0.0 for skipped frames
    processed: bool
    battery_pct: float
    thermal: ThermalState


@dataclass
class TelemetrySample:
    time: float
    battery_pct: float
    temperature: float
    thermal: ThermalState


@dataclass
class BenchReport:
    protocol: str
    records: list[FrameRecord] = field(default_factory=list)
    telemetry: list[TelemetrySample] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "latency", "processed", "battery_pct", "thermal_state"])
            for r in self.records:
                writer.writerow([
                    f"{r.time:.6f}", f"{r.latency:.6f}", int(r.processed),
                    f"{r.battery_pct:.4f}", r.thermal.name.lower(),
                ])
        return p

    def telemetry_csv(self, path: str | Path) -> Path:
        p = Path(path)
        with open(p, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "battery_pct", "temperature", "thermal_state"])
            for s in self.telemetry:
                writer.writerow([
                    f"{s.time:.6f}", f"{s.battery_pct:.4f}",
                    f"{s.temperature:.4f}", s.thermal.name.lower(),
                ])
        return p

    def to_json(self) -> str:
        return json.dumps({"protocol": self.protocol, "aggregates": self.aggregates}, indent=2)


class _DeviceIntegrator:
    """Advances a device through busy/idle intervals, sampling telemetry."""

    def __init__(self, model: DeviceModel, config: OnlineConfig):
        self.model = model
        self.config = config
        self.state = DeviceState(model.ambient_temp, model.battery_capacity)
        self.now = 0.0
        self.busy_until = 0.0
        self.telemetry: list[TelemetrySample] = [
            TelemetrySample(0.0, 100.0, model.ambient_temp, ThermalState.NOMINAL)
        ]
        self.next_sample = config.telemetry_period
        self.time_to_serious: Optional[float] = None

    def battery_pct(self) -> float:
        return 100.0 * self.state.battery / self.model.battery_capacity

    def _integrate(self, t_end: float, utilization: float):
        if t_end <= self.now + TIME_EPS:
            return
        temp_before = self.state.temperature
        dt = t_end - self.now
        device_step(self.model, utilization, dt, self.state)
        if self.time_to_serious is None and self.state.temperature >= self.model.serious_temp:
            slope = self.model.heat_rate * utilization - self.model.cool_rate
            if slope > 0 and temp_before < self.model.serious_temp:
                self.time_to_serious = self.now + (self.model.serious_temp - temp_before) / slope
            else:
                self.time_to_serious = t_end
        self.now = t_end

    def advance(self, t: float):
        """Integrate up to time t, splitting at busy/idle and telemetry boundaries."""
        while self.now < t - TIME_EPS:
            boundary = min(t, self.next_sample)
            if self.now < self.busy_until - TIME_EPS:
                boundary = min(boundary, self.busy_until)
                self._integrate(boundary, 1.0)
            else:
                self._integrate(boundary, 0.0)
            if self.now >= self.next_sample - TIME_EPS:
                self.telemetry.append(TelemetrySample(
                    self.now, self.battery_pct(), self.state.temperature,
                    self.model.thermal_state(self.state.temperature),
                ))
                self.next_sample += self.config.telemetry_period

    def thermal_now(self) -> ThermalState:
        return self.model.thermal_state(self.state.temperature)


def run_online(
    tracker: TrackerCallable,
    config: OnlineConfig = OnlineConfig(),
    device: DeviceModel = DeviceModel(),
) -> BenchReport:
    """Virtual-clock stream: frames arrive at k/fps; busy frames are skipped.

    The callable is invoked once per processed frame and must return
    (result, latency_seconds). Processed + skipped always equals
    floor(fps * duration).
    """
    n_frames = int(math.floor(config.fps * config.duration + TIME_EPS))
    sim = _DeviceIntegrator(device, config)
    records: list[FrameRecord] = []
    processed = skipped = 0

    for k in range(n_frames):
        arrival = k / config.fps
        sim.advance(arrival)
        if arrival >= sim.busy_until - TIME_EPS:
            _, latency = tracker(k)
            if latency < 0:
                raise ValueError("latency must be >= 0")
            effective = latency * (
                device.throttle_factor
                if sim.thermal_now() >= ThermalState.SERIOUS else 1.0
            )
            sim.busy_until = arrival + effective
            processed += 1
            records.append(FrameRecord(arrival, effective, True,
                                       sim.battery_pct(), sim.thermal_now()))
        else:
            skipped += 1
            records.append(FrameRecord(arrival, 0.0, False,
                                       sim.battery_pct(), sim.thermal_now()))
    sim.advance(config.duration)

    minutes = _per_minute_fps(records, config.duration)
    report = BenchReport(protocol="online", records=records, telemetry=sim.telemetry)
    report.aggregates = {
        "fps_target": config.fps,
        "duration": config.duration,
        "frames_total": n_frames,
        "processed": processed,
        "skipped": skipped,
        "achieved_fps": processed / config.duration,
        "per_minute_fps": minutes,
        "final_battery_pct": sim.battery_pct(),
        "final_temperature": sim.state.temperature,
        "time_to_serious": sim.time_to_serious,
    }
    return report


def _per_minute_fps(records: Sequence[FrameRecord], duration: float) -> list[float]:
    n_buckets = int(math.ceil(duration / 60.0 - TIME_EPS))
    counts = [0] * n_buckets
    for r in records:
        if r.processed:
            counts[min(int(r.time // 60.0), n_buckets - 1)] += 1
    out = []
    for b, c in enumerate(counts):
        length = min(60.0, duration - 60.0 * b)
        out.append(c / length)
    return out


def run_offline(
    tracker: TrackerCallable, config: OfflineConfig = OfflineConfig()
) -> BenchReport:
    """Warmup then count invocations back to back; FPS excludes the warmup."""
    records: list[FrameRecord] = []
    now = 0.0
    counted = 0.0
    for k in range(config.warmup + config.count):
        _, latency = tracker(k)
        if latency < 0:
            raise ValueError("latency must be >= 0")
        now += latency
        if k >= config.warmup:
            counted += latency
        records.append(FrameRecord(now, latency, True, 100.0, ThermalState.NOMINAL))
    report = BenchReport(protocol="offline", records=records)
    report.aggregates = {
        "warmup": config.warmup,
        "count": config.count,
        "invocations": config.warmup + config.count,
        "measured_latency_total": counted,
        "achieved_fps": config.count / counted if counted > 0 else float("inf"),
    }
    return report


# ---------------------------------------------------------------------------
# Latency providers
# ---------------------------------------------------------------------------

def constant_latency(seconds: float) -> TrackerCallable:
    def fn(_k: int):
        return None, seconds
    return fn


def scripted_latency(latencies: Sequence[float]) -> TrackerCallable:
    seq = list(latencies)

    def fn(k: int):
        return None, seq[k % len(seq)]
    return fn


def stochastic_latency(mean: float, jitter: float, seed: int = 0) -> TrackerCallable:
    rng = np.random.default_rng(seed)

    def fn(_k: int):
        return None, max(1e-6, mean + rng.uniform(-jitter, jitter))
    return fn


def wall_clock_adapter(fn: Callable[[int], object]) -> TrackerCallable:
    """Measure a real callable's wall time; for host measurement only, no
    acceptance criteria depend on it."""
    def wrapped(k: int):
        t0 = time.perf_counter()
        result = fn(k)
        return result, time.perf_counter() - t0
    return wrapped


# ---------------------------------------------------------------------------
# Named device/latency profiles
# ---------------------------------------------------------------------------

def efficient_profile() -> tuple[DeviceModel, float]:
    """Cool-running tracker: 5 ms latency, low per-inference energy."""
    latency = 0.005
    device = DeviceModel(
        energy_per_inference=0.05,
        heat_rate=0.05,
        cool_rate=0.01,
        throttle_factor=1.5,
        reference_latency=latency,
    )
    return device, latency


def inefficient_profile() -> tuple[DeviceModel, float]:
    """Hot-running tracker: 30 ms latency saturates the 30 FPS budget and the
    device crosses the serious-thermal threshold mid-run."""
    latency = 0.030
    device = DeviceModel(
        energy_per_inference=0.5,
        heat_rate=0.05,
        cool_rate=0.01,
        throttle_factor=1.5,
        reference_latency=latency,
    )
    return device, latency


PROFILES = {"efficient": efficient_profile, "inefficient": inefficient_profile}


def load_device_profile(path: str | Path) -> tuple[DeviceModel, float]:
    """Custom profile: DeviceModel fields plus a "latency" entry, as JSON."""
    data = json.loads(Path(path).read_text())
    latency = float(data.pop("latency", 0.02))
    return DeviceModel(**data), latency
