"""Glue between config files and the library: runs, sweeps, benches, reports.

The CLI stays a thin argument parser; everything it does is callable from
here with plain Python objects, which is also how the test suite drives
full runs without spawning processes.
"""

from __future__ import annotations

import csv
import itertools
import json
import multiprocessing as mp
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .augment import (
    ColorJitter,
    GaussianBlur,
    GaussianNoise,
    Grayscale,
    HorizontalFlip,
    RandomResizedCrop,
    Solarization,
    parse_stage,
)
from .config import Config
from .container import open_dataset
from .errors import ConfigError, ExitEmpty, ViewforgeError
from .loader import InstanceViews, LoaderConfig, MultiViewLoader, Traversal, bench_throughput
from .losses import BarlowParams, Reduction, SimClrParams, VicRegCoeffs
from .model import EncoderSpec, ProbeSpec, ProjectorSpec
from .train import Method, RunReport, TrainSettings, run_training

WORKERS_ENV = "VIEWFORGE_WORKERS"

# Published sweep grids: softmax-contrastive temperature x learning rate,
# the redundancy-reduction off-diagonal weight, and the EMA momentum values.
DEFAULT_GRIDS: dict[str, dict[str, list[str]]] = {
    "simclr-temp-lr": {
        "loss.temperature": ["0.10", "0.15", "0.25", "0.5"],
        "train.lr": ["0.3", "0.5", "0.7", "1.0", "1.2", "1.5", "2.0", "2.5", "3.0"],
    },
    "barlow-lambd": {
        "loss.barlow_alpha": ["0.0025", "0.0045", "0.0051", "0.0075", "0.01"],
    },
    "ema-momentum": {
        "ema.momentum": ["0.8", "0.9", "0.996"],
    },
}


def effective_workers(config: Config) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return config.get_int("loader.num_workers", 0)


def build_view_pipelines(config: Config) -> tuple[tuple, ...]:
    """Assemble per-view pipelines from augment.viewN.stageM lines."""
    views: dict[int, dict[int, str]] = {}
    for key, value in config.section("augment").items():
        parts = key.split(".")
        if len(parts) != 2 or not parts[0].startswith("view") or not parts[1].startswith("stage"):
            raise ConfigError(f"augment key must look like viewN.stageM, got augment.{key}")
        view_idx = int(parts[0][4:])
        stage_idx = int(parts[1][5:])
        views.setdefault(view_idx, {})[stage_idx] = value
    if not views:
        return ()
    pipelines = []
    for view_idx in sorted(views):
        stages = views[view_idx]
        pipelines.append(tuple(parse_stage(stages[i]) for i in sorted(stages)))
    return tuple(pipelines)


def build_loader_config(config: Config, seed: int) -> LoaderConfig:
    method = config.get_str("train.method", "simclr")
    instance = None
    pipelines = build_view_pipelines(config)
    if method == "instance_simclr":
        instance = InstanceViews(
            noise_std=config.get_float("instance.noise_std", 0.1),
            patch_scale=tuple(config.get_floats("instance.patch_scale", "0.05,0.2")),
            out_size=config.get_int("instance.out_size", 16),
        )
        pipelines = ()
    traversal = Traversal(config.get_str("loader.traversal", "random"))
    return LoaderConfig(
        batch_size=config.get_int("loader.batch_size", 64),
        view_pipelines=pipelines,
        num_workers=effective_workers(config),
        traversal=traversal,
        seed=seed,
        drop_last=config.get_bool("loader.drop_last", True),
        prefetch_depth=config.get_int("loader.prefetch_depth", 2),
        instance=instance,
    )


def _probe_view_dim(config: Config, loader_config: LoaderConfig, dataset_path: str) -> int:
    """Flattened input width the encoder will see."""
    if loader_config.instance is not None:
        side = loader_config.instance.out_size
        with open_dataset(dataset_path) as handle:
            channels = handle.header.channels
        return side * side * channels
    pipeline = loader_config.view_pipelines[0]
    out_size = None
    for stage in pipeline:
        if isinstance(stage, RandomResizedCrop):
            out_size = stage.out_size
    with open_dataset(dataset_path) as handle:
        channels = handle.header.channels
        if out_size is None:
            return handle.header.max_height * handle.header.max_width * channels
    return out_size * out_size * channels


def build_train_settings(config: Config, seed: int) -> TrainSettings:
    method = Method(config.get_str("train.method", "simclr"))
    reduction = (
        Reduction.MEAN_OVER_POSITIVES
        if config.get_str("loss.reduction", "sum") in ("mean", "mean_over_positives")
        else Reduction.SUM
    )
    ema = config.get_float("ema.momentum", None) if config.has("ema.momentum") else None
    return TrainSettings(
        method=method,
        steps=config.get_int("train.steps", 1000),
        lr=config.get_float("train.lr", 0.5),
        momentum=config.get_float("train.momentum", 0.9),
        weight_decay=config.get_float("train.weight_decay", 0.0),
        grad_clip=config.get_float("train.grad_clip", 0.0),
        simclr=SimClrParams(
            tau=config.get_float("loss.temperature", 0.15), reduction=reduction
        ),
        vicreg=VicRegCoeffs(
            alpha=config.get_float("loss.vicreg_alpha", 25.0),
            beta=config.get_float("loss.vicreg_beta", 1.0),
            gamma=config.get_float("loss.vicreg_gamma", 25.0),
            epsilon=config.get_float("loss.vicreg_epsilon", 1e-4),
        ),
        barlow=BarlowParams(alpha=config.get_float("loss.barlow_alpha", 0.0025)),
        probe_lr=config.get_float("probe.lr", 0.1),
        ema_momentum=ema,
        collapse_threshold=config.get_float("train.collapse_threshold", 1e-3),
        eval_every=config.get_int("train.eval_every", 250),
    )


def build_model_specs(config: Config, in_dim: int) -> tuple[EncoderSpec, ProjectorSpec]:
    widths = tuple(config.get_ints("model.encoder", "128,64"))
    encoder = EncoderSpec.from_dims(in_dim, widths)
    depth = config.get_int("model.projector_depth", 2)
    projector = ProjectorSpec(
        depth=depth,
        hidden=config.get_int("model.projector_hidden", encoder.out_dim if depth else 1),
        out_dim=config.get_int("model.projector_out", encoder.out_dim if depth else 1),
    )
    return encoder, projector


def build_probe_spec(config: Config) -> ProbeSpec:
    kind = config.get_str("probe.kind", "linear")
    hidden = tuple(config.get_ints("probe.hidden", "")) if kind == "mlp" else ()
    return ProbeSpec(
        num_classes=config.get_int("probe.classes"),
        kind=kind,
        hidden=hidden,
        mode="online",
    )


def run_from_config(
    config: Config,
    seed: int,
    metrics_sink=None,
    dataset_path: str | None = None,
) -> RunReport:
    path = dataset_path or config.get_str("data.path")
    loader_config = build_loader_config(config, seed)
    in_dim = _probe_view_dim(config, loader_config, path)
    encoder, projector = build_model_specs(config, in_dim)
    settings = build_train_settings(config, seed)
    probe_spec = build_probe_spec(config)
    return run_training(
        dataset_path=path,
        loader_config=loader_config,
        encoder=encoder,
        projector=projector,
        settings=settings,
        probe_spec=probe_spec,
        seed=seed,
        metrics_sink=metrics_sink,
        config_echo=config.echo(),
    )


# -----------------------------------------------------------------------------
# sweeps
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    axes: tuple[tuple[str, tuple[str, ...]], ...]  # (config key, values) in order
    seed_policy: str = "fixed"  # "fixed" or "per_point"
    parallel: int = 1

    def __post_init__(self):
        if not self.axes:
            raise ConfigError("sweep needs at least one axis")
        for key, values in self.axes:
            if not values:
                raise ConfigError(f"sweep axis {key!r} has no values")
        if self.seed_policy not in ("fixed", "per_point"):
            raise ConfigError(f"unknown seed policy {self.seed_policy!r}")

    @property
    def run_count(self) -> int:
        count = 1
        for _, values in self.axes:
            count *= len(values)
        return count

    def points(self):
        keys = [k for k, _ in self.axes]
        for combo in itertools.product(*(values for _, values in self.axes)):
            yield dict(zip(keys, combo))


def sweep_from_config(config: Config, grid_name: str | None = None) -> SweepConfig:
    if grid_name is not None:
        if grid_name not in DEFAULT_GRIDS:
            raise ConfigError(
                f"unknown grid {grid_name!r}; shipped grids: {sorted(DEFAULT_GRIDS)}"
            )
        grid = DEFAULT_GRIDS[grid_name]
        axes = tuple((key, tuple(values)) for key, values in grid.items())
    else:
        axis_keys = config.get_strs("sweep.axes")
        axes = tuple(
            (key, tuple(config.get_strs(f"sweep.values.{key}"))) for key in axis_keys
        )
    return SweepConfig(
        axes=axes,
        seed_policy=config.get_str("sweep.seed_policy", "fixed"),
        parallel=config.get_int("sweep.parallel", 1),
    )


def _execute_point(args):
    base_values, overrides, run_dir, seed, include_timing = args
    config = Config(base_values).with_overrides(overrides)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    row = {"run": run_dir.name, **overrides, "seed": seed}
    try:
        with open(metrics_path, "w") as metrics_file:
            def sink(record):
                metrics_file.write(json.dumps(record, sort_keys=True) + "\n")

            report = run_from_config(config, seed=seed, metrics_sink=sink)
        report_dict = report.to_dict(include_timing=include_timing)
        report_dict["grid_point"] = overrides
        (run_dir / "report.json").write_text(json.dumps(report_dict, indent=2, sort_keys=True))
        row.update(
            status="ok",
            best_probe_accuracy=report.best_probe_accuracy,
            final_probe_accuracy=report.final_probe_accuracy,
            final_loss=report.final_loss,
            collapsed=report.collapsed,
        )
        if include_timing:
            row["wall_seconds"] = report.wall_seconds
    except ViewforgeError as exc:
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        (run_dir / "report.json").write_text(
            json.dumps({"status": "failed", "error": row["error"], "grid_point": overrides},
                       indent=2, sort_keys=True)
        )
    return row


def run_sweep(
    config: Config,
    sweep: SweepConfig,
    out_dir: str | Path,
    seed: int,
    include_timing: bool = True,
) -> list[dict]:
    """Execute every grid point; failures are recorded and the sweep continues."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for i, overrides in enumerate(sweep.points()):
        run_seed = seed if sweep.seed_policy == "fixed" else seed + i
        tasks.append(
            (config.values, overrides, str(out_dir / f"run_{i:03d}"), run_seed, include_timing)
        )

    if sweep.parallel > 1:
        # each run keeps its loader inline to avoid nested worker pools
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=sweep.parallel) as pool:
            rows = pool.map(_execute_point, tasks)
    else:
        rows = [_execute_point(task) for task in tasks]

    axis_keys = [k for k, _ in sweep.axes]
    _write_sweep_csv(out_dir / "sweep.csv", rows, axis_keys, include_timing)
    summary = _sweep_summary(rows, axis_keys)
    (out_dir / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return rows


def _write_sweep_csv(path: Path, rows: list[dict], axis_keys: list[str], include_timing: bool):
    columns = ["run", *axis_keys, "seed", "status", "best_probe_accuracy",
               "final_probe_accuracy", "final_loss", "collapsed"]
    if include_timing:
        columns.append("wall_seconds")
    columns.append("error")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _sweep_summary(rows: list[dict], axis_keys: list[str]) -> dict:
    ok_rows = [r for r in rows if r.get("status") == "ok"]
    if not ok_rows:
        return {"runs": len(rows), "ok": 0}
    best = max(ok_rows, key=lambda r: (r["best_probe_accuracy"], -int(r["run"].split("_")[1])))
    return {
        "runs": len(rows),
        "ok": len(ok_rows),
        "best_run": best["run"],
        "best_probe_accuracy": best["best_probe_accuracy"],
        "best_point": {k: best[k] for k in axis_keys},
    }


# ----------------------------------------------------------------------------
# bench presets (cumulative augmentation ladder)
# ----------------------------------------------------------------------------

def bench_presets(out_size: int) -> list[tuple[str, tuple]]:
    crop = RandomResizedCrop(out_size=out_size, scale=(0.08, 1.0))
    flip = HorizontalFlip(p=0.5)
    ladder = [
        ("Crops", (crop, flip)),
        ("+Blur", (crop, flip, GaussianBlur(p=1.0, sigma=(0.1, 2.0)))),
        ("+Gray.", (crop, flip, GaussianBlur(p=1.0, sigma=(0.1, 2.0)), Grayscale(p=0.2))),
        (
            "+Sol.",
            (
                crop,
                flip,
                GaussianBlur(p=1.0, sigma=(0.1, 2.0)),
                Grayscale(p=0.2),
                Solarization(p=0.2, threshold=128),
            ),
        ),
        (
            "+Jitter",
            (
                crop,
                flip,
                GaussianBlur(p=1.0, sigma=(0.1, 2.0)),
                Grayscale(p=0.2),
                Solarization(p=0.2, threshold=128),
                ColorJitter(p=0.8, brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1),
            ),
        ),
    ]
    return ladder


def run_bench(
    dataset_path: str,
    config: Config,
    seed: int,
    include_timing: bool = True,
) -> dict:
    """Table of throughput reports, one per preset, in ladder order."""
    out_size = config.get_int("bench.out_size", 32)
    epochs = config.get_int("bench.epochs", 1)
    workers = effective_workers(config)
    results = []
    for name, pipeline in bench_presets(out_size):
        loader_config = LoaderConfig(
            batch_size=config.get_int("loader.batch_size", 64),
            view_pipelines=(pipeline, pipeline),
            num_workers=workers,
            traversal=Traversal(config.get_str("loader.traversal", "sequential")),
            seed=seed,
            drop_last=False,
            prefetch_depth=config.get_int("loader.prefetch_depth", 2),
        )
        report = bench_throughput(dataset_path, loader_config, epochs=epochs)
        entry = {"preset": name}
        entry.update(report.to_dict(include_timing=include_timing))
        results.append(entry)
    return {"presets": [name for name, _ in bench_presets(out_size)], "results": results}


# ----------------------------------------------------------------------------
# report aggregation
# ----------------------------------------------------------------------------

def collect_reports(run_dir: str | Path) -> list[dict]:
    run_dir = Path(run_dir)
    reports = []
    candidates = sorted(run_dir.glob("run_*/report.json"))
    if not candidates and (run_dir / "report.json").exists():
        candidates = [run_dir / "report.json"]
    for path in candidates:
        data = json.loads(path.read_text())
        data["_run"] = path.parent.name if path.parent != run_dir else run_dir.name
        reports.append(data)
    if not reports:
        raise ExitEmpty(f"no run reports found under {run_dir}")
    return reports


def write_report_outputs(reports: list[dict], out_dir: str | Path) -> tuple[Path, Path]:
    """Aggregate RunReports into a CSV plus plot-ready JSON series."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    axis_keys: list[str] = []
    for report in reports:
        for key in report.get("grid_point", {}):
            if key not in axis_keys:
                axis_keys.append(key)

    columns = ["run", "status", "method", *axis_keys,
               "best_probe_accuracy", "final_probe_accuracy", "final_loss", "collapsed"]
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for report in reports:
            row = {
                "run": report["_run"],
                "status": report.get("status", "ok"),
                "method": report.get("method", ""),
                "best_probe_accuracy": report.get("best_probe_accuracy", ""),
                "final_probe_accuracy": report.get("final_probe_accuracy", ""),
                "final_loss": report.get("final_loss", ""),
                "collapsed": report.get("collapsed", ""),
            }
            row.update(report.get("grid_point", {}))
            writer.writerow(row)

    series: dict[str, list[dict]] = {}
    for axis in axis_keys:
        points = []
        for report in reports:
            if report.get("status", "ok") != "ok":
                continue
            grid = report.get("grid_point", {})
            if axis not in grid:
                continue
            points.append(
                {
                    "value": float(grid[axis]),
                    "best_probe_accuracy": report["best_probe_accuracy"],
                    "run": report["_run"],
                }
            )
        series[axis] = sorted(points, key=lambda p: (p["value"], p["run"]))
    json_path = out_dir / "series.json"
    json_path.write_text(json.dumps(series, indent=2, sort_keys=True))
    return csv_path, json_path
