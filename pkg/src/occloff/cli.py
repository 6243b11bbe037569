"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import itertools
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import click
import numpy as np
import yaml

from .config import ConfigError, RunConfig, load_config, with_overrides

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageFailure(click.ClickException):
    exit_code = EXIT_USAGE


def _load(path) -> RunConfig:
    try:
        return load_config(path)
    except ConfigError as exc:
        raise UsageFailure(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageFailure(f"config file not found: {path}") from exc


def _dataset(path):
    from .synthdata import Dataset

    try:
        return Dataset(path)
    except FileNotFoundError as exc:
        raise UsageFailure(str(exc)) from exc


def _report_table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Desk-scale multi-modal occupancy prediction."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def dataset_specs(cfg: RunConfig):
    specs, splits = [], []
    for i in range(cfg.data.n_train):
        specs.append(cfg.scene_spec(cfg.seed + i))
        splits.append("train")
    for i in range(cfg.data.n_val):
        specs.append(cfg.scene_spec(cfg.seed + cfg.data.val_seed_offset + i))
        splits.append("val")
    return specs, splits


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def gen(config_path, out):
    """Generate the synthetic dataset (train + val sequences)."""
    from .synthdata import write_dataset

    cfg = _load(config_path)
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise click.ClickException(f"output directory {out} is not writable: {exc}") from exc
    specs, splits = dataset_specs(cfg)
    path = write_dataset(out, specs, splits, {"config": cfg.to_dict(), "config_hash": cfg.config_hash()})
    click.echo(f"wrote {len(specs)} sequences ({cfg.data.n_train} train, {cfg.data.n_val} val) -> {path}")


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


def _epoch_line(r: dict) -> str:
    val = r.get("val_loss")
    miou = r.get("miou")
    return (f"epoch {r['epoch']:3d}  train_loss {r['train_loss']:.4f}  "
            f"val_loss {'-' if val is None else f'{val:.4f}'}  "
            f"mIoU {'-' if miou is None else f'{miou:.4f}'}  participants {r['participants']}  "
            f"time {r['epoch_seconds']:.1f}s")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to resume from.")
def train(config_path, data, out, resume):
    """Train a model; writes one checkpoint per epoch and metrics.jsonl."""
    from .trainer import train as run_train

    cfg = _load(config_path)
    _dataset(data)
    result = run_train(data, cfg, out, resume=resume, on_epoch=lambda r: click.echo(_epoch_line(r)))
    click.echo(f"checkpoints: {len(result.checkpoints)}; metrics: {Path(out) / 'metrics.jsonl'}")


@cli.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path())
@click.option("--split", default="val", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the report as JSON.")
def eval_cmd(checkpoint, data, split, out):
    """Evaluate a checkpoint: IoU, per-category IoU and mIoU."""
    from .trainer import evaluate_checkpoint

    _dataset(data)
    if not Path(checkpoint).is_file():
        raise UsageFailure(f"checkpoint not found: {checkpoint}")
    rep = evaluate_checkpoint(checkpoint, data, split)
    d = rep.to_dict()
    rows = [{"category": k, "iou": v} for k, v in sorted(rep.metrics.per_class.items())]
    click.echo(_report_table(rows, ["category", "iou"]))
    click.echo(f"IoU {rep.metrics.iou:.4f}  mIoU {rep.metrics.miou:.4f}  samples {rep.n_samples}")
    if out:
        Path(out).write_text(json.dumps(d, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def parse_grid(specs) -> list[tuple[str, list]]:
    axes = []
    for spec in specs:
        if "=" not in spec:
            raise UsageFailure(f"grid axis must look like key=v1,v2: {spec!r}")
        key, values = spec.split("=", 1)
        axes.append((key.strip(), [yaml.safe_load(v) for v in values.split(",")]))
    return axes


def fusion_timing(model, seq, k_percent: float | None = None, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall time of the fusion layers for the last frame."""
    import torch

    geom = model.frame_geometry((seq.name, len(seq.poses) - 1), seq.points[-1])
    best = float("inf")
    with torch.no_grad():
        for _ in range(repeats):
            best = min(best, model.encode_frame(seq.images[-1], geom, k_percent)[3])
    return best


def run_ablation(cfg: RunConfig, data, out, axes, epochs: int | None = None, echo=click.echo) -> list[dict]:
    from .trainer import count_fusion_work, evaluate, train as run_train

    ds = _dataset(data)
    out = Path(out)
    rows = []
    keys = [k for k, _ in axes]
    for n, combo in enumerate(itertools.product(*(v for _, v in axes))):
        overrides = dict(zip(keys, combo))
        if epochs is not None:
            overrides["train.epochs"] = epochs
        try:
            run_cfg = with_overrides(cfg, overrides)
        except ConfigError as exc:
            raise UsageFailure(str(exc)) from exc
        t0 = time.perf_counter()
        result = run_train(data, run_cfg, out / f"run_{n:02d}")
        wall = time.perf_counter() - t0
        model = result.model.eval()
        rep = evaluate(model, ds, ds.names("val"), with_loss=False)
        probe = ds.load((ds.names("val") or ds.names("train"))[0])
        work = count_fusion_work(model, probe)
        row = {"run": n, **{k: v for k, v in zip(keys, combo)},
               "miou": rep.metrics.miou, "iou": rep.metrics.iou,
               "attn_calls_per_layer": work[0]["gsca_calls"] + work[0]["ssca_calls"] if work else 0,
               "fusion_seconds": fusion_timing(model, probe), "train_seconds": wall,
               "per_class": {str(k): v for k, v in rep.metrics.per_class.items()}}
        rows.append(row)
        echo(f"run {n}: {overrides} mIoU {row['miou']:.4f}")
    base = rows[0]["miou"] if rows else 0.0
    for r in rows:
        r["delta_miou"] = r["miou"] - base
    return rows


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--grid", "grid_specs", multiple=True, required=True,
              help="Axis as dotted.key=v1,v2 (repeatable); runs the cross product.")
@click.option("--epochs", type=int, default=None, help="Override train.epochs for every run.")
def ablate(config_path, data, out, grid_specs, epochs):
    """Train and evaluate every combination of the given settings."""
    cfg = _load(config_path)
    axes = parse_grid(grid_specs)
    rows = run_ablation(cfg, data, out, axes, epochs)
    cols = ["run", *[k for k, _ in axes], "miou", "delta_miou", "iou", "attn_calls_per_layer",
            "fusion_seconds", "train_seconds"]
    table = _report_table(rows, cols)
    click.echo(table)
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    (Path(out) / "ablation.txt").write_text(table + "\n")


# ---------------------------------------------------------------------------
# viz
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--sample", required=True, type=click.Path(file_okay=False),
              help="Sequence directory inside a generated dataset.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--scale", default=4, show_default=True, type=click.IntRange(1, 32))
def viz(checkpoint, sample, out, scale):
    """Slice images of ground truth and prediction plus per-layer mask overlays."""
    import torch

    from .trainer import load_checkpoint
    from .viz import write_visualization

    sample = Path(sample)
    ds = _dataset(sample.parent)
    if sample.name not in ds.names():
        raise UsageFailure(f"{sample.name} is not a sequence of {sample.parent}")
    if not Path(checkpoint).is_file():
        raise UsageFailure(f"checkpoint not found: {checkpoint}")
    ck = load_checkpoint(checkpoint)
    seq = ds.load(sample.name)
    gt = np.asarray(seq.labels[-1])
    masks = []
    if ck.model is None:
        pred = gt
    else:
        with torch.no_grad():
            fwd = ck.model.eval().forward_sequence(seq)
        pred = fwd.logits.argmax(dim=1).numpy().reshape(gt.shape)
        ab = ck.cfg.ablation
        names = (["gsca"] if ab.gsca else []) + (["ssca"] if ab.ssca else [])
        masks = [list(zip(names, s.masks)) for s in fwd.stats]
    files = write_visualization(out, gt, pred, masks, ck.cfg.coarse_grid, scale)
    for f in files:
        click.echo(str(f))


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--float64/--no-float64", default=True, show_default=True,
              help="Run the checks at 64-bit precision (tolerances are loosened without it).")
@click.option("--instances", default=100, show_default=True, type=click.IntRange(1))
@click.option("--params", "n_params", default=16, show_default=True, type=click.IntRange(1))
@click.option("--skip-end-to-end", is_flag=True, help="Only run the proxy-gradient checks.")
@click.option("--inject-sign-error", is_flag=True, hidden=True,
              help="Flip the sign of the analytic proxy gradient (self-test of the harness).")
def gradcheck(config_path, float64, instances, n_params, skip_end_to_end, inject_sign_error):
    """Finite-difference checks of the proxy gradient and the full pipeline."""
    from .gradcheck import PrecisionWarning, run_gradcheck

    cfg = _load(config_path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", PrecisionWarning)
        results = run_gradcheck(cfg, float64, instances, n_params, inject_sign_error, not skip_end_to_end)
    for w in caught:
        if issubclass(w.category, PrecisionWarning):
            click.echo(f"WARNING: {w.message}", err=True)
    for r in results:
        click.echo(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise click.ClickException(f"gradient check failed: {', '.join(failed)}")
    click.echo("all checks passed")


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    from .losses import NonFiniteLossError

    try:
        rv = cli.main(args=argv, prog_name="occloff", standalone_mode=False)
    except UsageFailure as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.Abort) as exc:
        if isinstance(exc, click.UsageError):
            exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_RUNTIME
    except NonFiniteLossError as exc:
        click.echo(f"Error: training aborted: {exc}", err=True)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        click.echo(f"Error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
