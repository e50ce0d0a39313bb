"""Command-line harness: pack, inspect, bench, train, sweep, report.

Exit codes: 0 success, 1 run failure (including aborted training), 2 usage
or config errors. All machine-readable output is JSON or CSV; ``--no-timing``
strips wall-clock fields so identical inputs give byte-identical outputs.
The ``VIEWFORGE_WORKERS`` environment variable overrides the configured
loader worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config
from .container import (
    EncodingMode,
    ImageRecord,
    PackOptions,
    open_dataset,
    pack_dataset,
    validate,
)
from .dump import write_batches
from .errors import ConfigError, ExitEmpty, InvalidParam, NanLoss, ViewforgeError
from .harness import (
    DEFAULT_GRIDS,
    build_loader_config,
    collect_reports,
    run_bench,
    run_from_config,
    run_sweep,
    sweep_from_config,
    write_report_outputs,
)
from .loader import MultiViewLoader
from .losses import BarlowParams, SimClrParams, VicRegCoeffs, barlow_loss, simclr_loss, vicreg_loss
from .relations import build_pair_relation
from .toydata import make_toy_class_dataset

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


def _load_directory(directory: Path) -> list[ImageRecord]:
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ConfigError(f"no image files found in {directory}")
    records = []
    for path in files:
        arr = np.asarray(Image.open(path).convert("RGB"))
        records.append(ImageRecord(pixels=np.ascontiguousarray(arr), label=0))
    return records


def _load_manifest(manifest: Path) -> list[ImageRecord]:
    records = []
    base = manifest.parent
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "," not in line:
            raise ConfigError(f"{manifest}:{lineno}: expected 'path,label'")
        rel, label = line.rsplit(",", 1)
        img_path = base / rel.strip()
        arr = np.asarray(Image.open(img_path).convert("RGB"))
        records.append(ImageRecord(pixels=np.ascontiguousarray(arr), label=int(label)))
    if not records:
        raise ConfigError(f"manifest {manifest} lists no images")
    return records


def cmd_pack(args) -> int:
    if args.synthetic_toy:
        records = make_toy_class_dataset(
            args.synthetic_toy,
            image_size=args.image_size,
            num_classes=args.classes,
            seed=args.seed,
        )
    else:
        source = Path(args.input)
        if not source.exists():
            raise ConfigError(f"input path {source} does not exist")
        records = _load_manifest(source) if source.is_file() else _load_directory(source)
    options = PackOptions(
        encoding_mode=EncodingMode.JPEG if args.mode == "jpeg" else EncodingMode.RAW,
        jpeg_quality=args.quality,
    )
    out = pack_dataset(records, args.out, options)
    size = Path(out).stat().st_size
    print(
        json.dumps(
            {"path": str(out), "samples": len(records), "bytes": size, "mode": args.mode},
            sort_keys=True,
        )
    )
    return 0


def cmd_inspect(args) -> int:
    with open_dataset(args.path) as handle:
        info = {
            "path": str(args.path),
            "sample_count": handle.sample_count,
            "encoding_mode": handle.header.encoding_mode.name.lower(),
            "max_height": handle.header.max_height,
            "max_width": handle.header.max_width,
            "channels": handle.header.channels,
            "data_region_offset": handle.header.data_region_offset,
        }
        if args.validate:
            report = validate(handle)
            info["validation"] = {
                "checksum_passed": report.checksum_passed,
                "checksum_failed": report.checksum_failed,
                "failed_indices": report.failed_indices,
                "alignment_ok": report.alignment_ok,
                "offsets_monotonic": report.offsets_monotonic,
            }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    config = Config.load(args.config)
    dataset = args.data or config.get_str("data.path")
    result = run_bench(dataset, config, seed=args.seed, include_timing=not args.no_timing)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    config = Config.load(args.config)
    if args.dump_batches:
        # replay and dump the exact batch stream the trainer would consume
        loader_config = build_loader_config(config, seed=args.seed)
        steps = args.steps or config.get_int("train.steps", 100)
        with MultiViewLoader(config.get_str("data.path"), loader_config) as loader:
            frames = write_batches(args.dump_batches, loader.iter_steps(steps))
        print(json.dumps({"dumped_batches": frames, "path": args.dump_batches}, sort_keys=True))
        return 0

    out_dir = Path(args.out) if args.out else None
    metrics_file = None
    write_metric = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w")

        def write_metric(record, _f=metrics_file):
            _f.write(json.dumps(record, sort_keys=True) + "\n")

    overrides = {}
    if args.steps:
        overrides["train.steps"] = str(args.steps)
    if overrides:
        config = config.with_overrides(overrides)
    try:
        report = run_from_config(config, seed=args.seed, metrics_sink=write_metric)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    payload = report.to_dict(include_timing=not args.no_timing)
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    config = Config.load(args.config)
    sweep = sweep_from_config(config, grid_name=args.grid)
    out_dir = Path(args.out or "sweep_out")
    rows = run_sweep(config, sweep, out_dir, seed=args.seed, include_timing=not args.no_timing)
    ok = sum(1 for r in rows if r.get("status") == "ok")
    print(
        json.dumps(
            {"runs": len(rows), "ok": ok, "out_dir": str(out_dir)},
            sort_keys=True,
        )
    )
    return 0 if ok == len(rows) else 1


def cmd_report(args) -> int:
    reports = collect_reports(args.run_dir)
    out_dir = Path(args.out or args.run_dir)
    csv_path, json_path = write_report_outputs(reports, out_dir)
    print(json.dumps({"csv": str(csv_path), "series": str(json_path)}, sort_keys=True))
    return 0


def cmd_loss_eval(args) -> int:
    """Machine-facing loss evaluation for foreign-host bindings.

    Reads one JSON request on stdin with base64-encoded little-endian float64
    buffers; writes the value/gradient back the same way, preserving bits.
    """
    import base64

    request = json.loads(sys.stdin.read())

    def decode(field, rows, cols):
        raw = base64.b64decode(request[field])
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()

    def encode(arr):
        return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()

    kind = request["loss"]
    params = request.get("params", {})
    if kind == "barlow":
        n, k = request["n"], request["k"]
        left = decode("z_left", n, k)
        right = decode("z_right", n, k)
        out = barlow_loss(left, right, BarlowParams(alpha=params.get("alpha", 0.0025)))
        response = {
            "value": encode(np.array([out.value])),
            "grad": encode(out.grad),
            "grad_right": encode(out.grad_right),
            "terms": out.terms,
        }
    else:
        n, k = request["n"], request["k"]
        z = decode("z", n, k)
        g = build_pair_relation(n // 2)
        if kind == "simclr":
            out = simclr_loss(z, g, SimClrParams(tau=params.get("tau", 0.15)))
        elif kind == "vicreg":
            out = vicreg_loss(
                z,
                g,
                VicRegCoeffs(
                    alpha=params.get("alpha", 25.0),
                    beta=params.get("beta", 1.0),
                    gamma=params.get("gamma", 25.0),
                    epsilon=params.get("epsilon", 1e-4),
                ),
            )
        else:
            raise ConfigError(f"unknown loss {kind!r}")
        response = {
            "value": encode(np.array([out.value])),
            "grad": encode(out.grad),
            "terms": out.terms,
        }
    print(json.dumps(response, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewforge",
        description="Packed-dataset SSL pipeline and desk-scale training harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_pack = sub.add_parser("pack", help="pack images into a single dataset file")
    p_pack.add_argument("input", nargs="?", help="image directory or manifest CSV (path,label)")
    p_pack.add_argument("--out", required=True)
    p_pack.add_argument("--mode", choices=["raw", "jpeg"], default="raw")
    p_pack.add_argument("--quality", type=int, default=90)
    p_pack.add_argument("--synthetic-toy", type=int, default=0, metavar="N",
                        help="generate N synthetic class-colored images instead of reading files")
    p_pack.add_argument("--image-size", type=int, default=16)
    p_pack.add_argument("--classes", type=int, default=4)
    p_pack.add_argument("--seed", type=int, default=0)
    p_pack.set_defaults(func=cmd_pack)

    p_inspect = sub.add_parser("inspect", help="print header and optional validation")
    p_inspect.add_argument("path")
    p_inspect.add_argument("--validate", action="store_true")
    p_inspect.set_defaults(func=cmd_inspect)

    p_bench = sub.add_parser("bench", help="throughput ladder over augmentation presets")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--data", help="packed dataset (defaults to data.path)")
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--no-timing", action="store_true")
    p_bench.set_defaults(func=cmd_bench)

    p_train = sub.add_parser("train", help="one SSL training run with online probe")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", help="directory for metrics.jsonl and report.json")
    p_train.add_argument("--steps", type=int, default=0, help="override train.steps")
    p_train.add_argument("--no-timing", action="store_true")
    p_train.add_argument("--dump-batches", metavar="PATH",
                         help="write the batch stream to PATH instead of training")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="cartesian hyperparameter sweep")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", choices=sorted(DEFAULT_GRIDS),
                         help="use a shipped grid instead of sweep.* config keys")
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out", help="sweep output directory")
    p_sweep.add_argument("--no-timing", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="aggregate run reports to CSV + JSON series")
    p_report.add_argument("run_dir")
    p_report.add_argument("--out", help="output directory (defaults to run_dir)")
    p_report.set_defaults(func=cmd_report)

    p_loss = sub.add_parser("loss-eval", help="evaluate a loss kernel on stdin JSON (for bindings)")
    p_loss.set_defaults(func=cmd_loss_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidParam) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NanLoss as exc:
        print(f"error: NanLoss: {exc}", file=sys.stderr)
        return 1
    except ExitEmpty as exc:
        print(f"error: ExitEmpty: {exc}", file=sys.stderr)
        return 1
    except ViewforgeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
