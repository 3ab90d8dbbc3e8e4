"""Session-scoped artifacts shared by the acceptance suite.

The toy model is trained once per session (the overfit protocol: 200 fixed
pairs, at most 500 steps, double precision) and reused by every criterion
that needs trained weights.
"""
import time

import pytest

from dualtrack.checkpoint import save_checkpoint
from dualtrack.datapipe import SamplerConfig, generate_synthetic
from dualtrack.losses import LossConfig
from dualtrack.model import ModelConfig
from dualtrack.trainer import TrainConfig, fit

TOY_MODEL = ModelConfig(backbone_channels=(8, 16, 32, 32), adjusted_channels=32)

OVERFIT_TRAIN = TrainConfig(
    learning_rate=2e-3,
    batch_size=8,
    epochs=20,
    fixed_pairs=200,
    max_steps=500,
    seed=0,
    precision="float64",
)

TRAIN_VIDEO_SEEDS = tuple(range(100, 108))
HOLDOUT_VIDEO_SEEDS = tuple(range(200, 210))
HOLDOUT_FRAMES = 300


@pytest.fixture(scope="session")
def train_videos():
    return [generate_synthetic(seed=s, n_frames=100, size=(320, 320))
            for s in TRAIN_VIDEO_SEEDS]


@pytest.fixture(scope="session")
def trained_toy(train_videos, tmp_path_factory):
    """Overfit run shared by A2/A3/A12: returns net, pair bank, checkpoint, timing."""
    out = tmp_path_factory.mktemp("acceptance_train")
    t0 = time.monotonic()
    result = fit(train_videos, [], OVERFIT_TRAIN, LossConfig(), TOY_MODEL,
                 SamplerConfig(), out_dir=out)
    elapsed = time.monotonic() - t0
    checkpoint = save_checkpoint(out / "final.npz", result.net)
    return {
        "result": result,
        "net": result.net,
        "samples": result.samples,
        "checkpoint": checkpoint,
        "train_seconds": elapsed,
    }
