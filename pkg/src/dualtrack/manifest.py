"""Run manifests: every artifact-producing run records its provenance first."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: Optional[str]
    seed: Optional[int]
    out_dir: str
    config_hash: str

    def write(self) -> Path:
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def config_hash(resolved_config: dict) -> str:
    """Content hash of the fully resolved configuration."""
    blob = json.dumps(resolved_config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(
    command: str, out_dir: str | Path, resolved_config: dict,
    config_path: Optional[str] = None, seed: Optional[int] = None,
) -> RunManifest:
    manifest = RunManifest(
        command=command,
        config_path=str(config_path) if config_path else None,
        seed=seed,
        out_dir=str(out_dir),
        config_hash=config_hash(resolved_config),
    )
    manifest.write()
    return manifest
