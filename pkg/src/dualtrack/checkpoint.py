"""Checkpoint archive: config echo plus one named array per layer (.npz)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TrackerNet

CONFIG_KEY = "__config__"
EXTRA_KEY = "__extra__"


def save_checkpoint(
    path: str | Path, net: TrackerNet, extra: dict | None = None
) -> Path:
    """Write every state-dict tensor under its layer name, plus JSON metadata."""
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in net.state_dict().items()}
    arrays[CONFIG_KEY] = np.frombuffer(
        json.dumps(net.config.to_dict()).encode(), dtype=np.uint8
    )
    arrays[EXTRA_KEY] = np.frombuffer(json.dumps(extra or {}).encode(), dtype=np.uint8)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    np.savez(p, **arrays)
    return p


def _decode_json(arr: np.ndarray) -> dict:
    return json.loads(arr.tobytes().decode())


def load_checkpoint(
    path: str | Path, dtype: torch.dtype | None = None
) -> tuple[TrackerNet, dict]:
    """Rebuild the network from the archive; optionally cast float weights."""
    with np.load(path) as data:
        config = ModelConfig.from_dict(_decode_json(data[CONFIG_KEY]))
        extra = _decode_json(data[EXTRA_KEY])
        net = TrackerNet(config)
        state = {}
        for name in data.files:
            if name in (CONFIG_KEY, EXTRA_KEY):
                continue
            tensor = torch.from_numpy(data[name].copy())
            if dtype is not None and tensor.is_floating_point():
                tensor = tensor.to(dtype)
            state[name] = tensor
    if dtype is not None:
        net = net.to(dtype)
    else:
        sample = next(v for v in state.values() if v.is_floating_point())
        net = net.to(sample.dtype)
    net.load_state_dict(state)
    net.eval()
    return net, extra
