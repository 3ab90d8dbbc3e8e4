"""Command-line client for the service.

Every subcommand talks HTTP to the service layer. With ``--server`` it targets
a running instance; otherwise the app is hosted in-process over an ASGI
transport, so single-machine use needs no separate daemon. Exit codes: 0 on
success, 2 on config validation errors, 1 otherwise.
"""
from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import httpx


class Client:
    def __init__(self, server: str | None):
        self._server = server.rstrip("/") if server else None
        self._client = httpx.Client(base_url=self._server, timeout=None) if server else None

    def _send(self, method: str, path: str, payload: dict | None) -> httpx.Response:
        if self._client is not None:
            return self._client.request(method, path, json=payload)
        # no server given: host the app in-process over an ASGI transport
        import asyncio

        from .service import app

        async def go():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://dualtrack.local", timeout=None
            ) as client:
                return await client.request(method, path, json=payload)

        return asyncio.run(go())

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        resp = self._send(method, path, payload)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            click.echo(f"error: {detail}", err=True)
            sys.exit(2 if resp.status_code == 422 else 1)
        return resp.json()

    def post(self, path: str, payload: dict) -> dict:
        return self.request("POST", path, payload)

    def get(self, path: str) -> dict:
        return self.request("GET", path)


pass_client = click.make_pass_decorator(Client)


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Running service URL; default hosts the service in-process.")
@click.pass_context
def main(ctx, server):
    """Dual-template tracker: data, training, tracking, benchmarking, metrics."""
    ctx.obj = Client(server)


def _overrides(stride: int | None, extra: dict | None = None) -> dict:
    overrides: dict = dict(extra or {})
    if stride is not None:
        overrides.setdefault("model", {})
        overrides["model"]["final_stride"] = stride
    return overrides


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset output directory.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--n-videos", default=4, show_default=True, type=int)
@click.option("--frames", default=100, show_default=True, type=int)
@click.option("--size", default=320, show_default=True, type=int, help="Frame side, pixels.")
@click.option("--drift", default="mild", show_default=True,
              type=click.Choice(["none", "mild", "occluder"]))
@click.option("--config", "config_path", default=None, type=click.Path())
@pass_client
def synth(client: Client, out, seed, n_videos, frames, size, drift, config_path):
    """Generate a deterministic synthetic video dataset."""
    drift_fields = {
        "none": {"color_drift": 0.0, "scale_amplitude": 0.0, "speed": 0.0, "wobble": 0.0},
        "mild": None,
        "occluder": {"occluder": True},
    }[drift]
    resp = client.post("/synth", {
        "out_dir": out, "seed": seed, "n_videos": n_videos, "n_frames": frames,
        "height": size, "width": size, "drift": drift_fields, "config_path": config_path,
    })
    click.echo(json.dumps(resp, indent=2))


@main.command()
@click.option("--data", "dataset_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--stride", default=None, type=click.Choice(["8", "16"]))
@click.option("--epochs", default=None, type=int)
@click.option("--resume-from", default=None, type=click.Path(),
              help="Checkpoint to continue from; epoch numbering carries on.")
@click.option("--poll", default=2.0, show_default=True, help="Status poll period, seconds.")
@pass_client
def train(client: Client, dataset_dir, out, config_path, seed, stride, epochs,
          resume_from, poll):
    """Train on a dataset directory; waits for the job and streams progress."""
    overrides = _overrides(int(stride) if stride else None)
    if epochs is not None:
        overrides.setdefault("train", {})["epochs"] = epochs
    job = client.post("/train", {
        "dataset_dir": dataset_dir, "out_dir": out, "config_path": config_path,
        "overrides": overrides, "seed": seed, "resume_from": resume_from,
    })
    job_id = job["job_id"]
    last_epoch = 0
    while True:
        status = client.get(f"/train/{job_id}")
        row = status.get("last_row")
        if row and row["epoch"] > last_epoch:
            last_epoch = row["epoch"]
            click.echo(json.dumps(row))
        if status["status"] == "done":
            click.echo(json.dumps({
                "checkpoint": status["checkpoint_path"],
                "metrics": status["metrics_path"],
                "best_metric": status["best_metric"],
            }, indent=2))
            return
        if status["status"] == "failed":
            click.echo(f"training failed: {status.get('error')}", err=True)
            sys.exit(1)
        time.sleep(poll)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--video", "video_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--init-box", default=None, metavar="X0,Y0,X1,Y1",
              help="Init box; defaults to the video's first annotation.")
@click.option("--precision", default="float32", show_default=True,
              type=click.Choice(["float32", "float64"]))
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@pass_client
def track(client: Client, checkpoint, video_dir, out, init_box, precision,
          config_path, seed):
    """Track one video directory; writes one result line per frame."""
    box = None
    if init_box:
        vals = [float(v) for v in init_box.split(",")]
        if len(vals) != 4:
            click.echo("error: --init-box needs four comma-separated values", err=True)
            sys.exit(2)
        box = {"x_min": vals[0], "y_min": vals[1], "x_max": vals[2], "y_max": vals[3]}
    resp = client.post("/track", {
        "checkpoint": checkpoint, "video_dir": video_dir, "out_dir": out,
        "init_box": box, "precision": precision, "config_path": config_path,
        "seed": seed,
    })
    click.echo(json.dumps(resp, indent=2))


@main.command("eval")
@click.option("--results", required=True, type=click.Path())
@click.option("--annotations", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@pass_client
def eval_cmd(client: Client, results, annotations, out):
    """Score a results file against annotations (mean IoU, success, precision)."""
    resp = client.post("/eval", {
        "results_path": results, "annotations_path": annotations, "out_dir": out,
    })
    click.echo(json.dumps(resp["metrics"], indent=2))


@main.command()
@click.option("--protocol", required=True, type=click.Choice(["online", "offline"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--device", default="efficient", show_default=True, metavar="NAME",
              help="efficient | inefficient | custom:PATH")
@click.option("--latency-ms", default=None, type=float,
              help="Constant synthetic latency instead of the profile's.")
@click.option("--checkpoint", default=None, type=click.Path(),
              help="Wall-clock measure a real model (machine-dependent).")
@click.option("--duration", default=None, type=float, help="Online duration, seconds.")
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@pass_client
def bench(client: Client, protocol, out, device, latency_ms, checkpoint, duration,
          config_path, seed):
    """Run the efficiency benchmark (virtual-clock online stream or offline count)."""
    overrides = {}
    if duration is not None:
        overrides["online"] = {"duration": duration}
    resp = client.post("/bench", {
        "protocol": protocol, "out_dir": out, "device": device,
        "latency_ms": latency_ms, "checkpoint": checkpoint,
        "config_path": config_path, "overrides": overrides, "seed": seed,
    })
    click.echo(json.dumps({"aggregates": resp["aggregates"],
                           "records_csv": resp["records_csv"]}, indent=2))


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--stride", default=None, type=click.Choice(["8", "16"]))
@click.option("--out", default=None, type=click.Path(), help="Write the report JSON here.")
@pass_client
def cost(client: Client, config_path, stride, out):
    """Analytic parameter/FLOP report for a model configuration."""
    model_overrides = {}
    if config_path:
        import yaml

        raw = yaml.safe_load(Path(config_path).read_text()) or {}
        model_overrides = raw.get("model", {})
    if stride is not None:
        model_overrides["final_stride"] = int(stride)
    resp = client.post("/cost", {"model": model_overrides})
    text = json.dumps(resp, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    click.echo(text)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
