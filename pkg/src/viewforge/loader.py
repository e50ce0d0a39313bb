"""Multi-worker batch loader producing V augmented views per sample.

The delivered batch stream is a pure function of (dataset, config, epoch):
augmentation draws are keyed by (seed, epoch, dataset index, view), the
epoch plan is keyed by (seed, epoch), and batches are reassembled in plan
order no matter which worker finishes first. Consequently the stream is
bitwise identical for any worker count or prefetch depth.

One coordinator owns the plan and hands batch tasks to a pool of stateless
workers (each opens its own mmap over the packed file); the consumer sees a
strictly ordered stream. A loader instance serves one consumer.
"""

from __future__ import annotations

import enum
import multiprocessing as mp
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .augment import Pipeline, RandomResizedCrop, apply_pipeline, format_pipeline
from .container import DatasetHandle, open_dataset
from .errors import InvalidParam, SampleReadError, ShapeMismatch
from .rng import RngStream, plan_stream


class Traversal(enum.Enum):
    SEQUENTIAL = "sequential"
    RANDOM = "random"
    QUASI_RANDOM = "quasi_random"


@dataclass(frozen=True)
class InstanceViews:
    """Per-instance view recipe: two noise-only positives plus one patch."""

    noise_std: float = 0.1
    patch_scale: tuple[float, float] = (0.05, 0.2)
    out_size: int = 16


@dataclass(frozen=True)
class LoaderConfig:
    batch_size: int
    view_pipelines: tuple[Pipeline, ...] = ()
    num_workers: int = 0
    traversal: Traversal = Traversal.RANDOM
    seed: int = 0
    drop_last: bool = False
    prefetch_depth: int = 2
    instance: InstanceViews | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParam(f"batch_size must be >= 1, got {self.batch_size}")
        if self.instance is None and len(self.view_pipelines) < 1:
            raise InvalidParam("need at least one view pipeline")
        if self.prefetch_depth < 1:
            raise InvalidParam(f"prefetch_depth must be >= 1, got {self.prefetch_depth}")
        if self.num_workers < 0:
            raise InvalidParam(f"num_workers must be >= 0, got {self.num_workers}")


@dataclass(frozen=True)
class ResolutionSchedule:
    """Linear side-length ramp across epochs, snapped down to multiples of 32."""

    start_res: int
    end_res: int
    start_epoch: int
    end_epoch: int

    def __post_init__(self):
        if self.start_res > self.end_res:
            raise InvalidParam("start_res must be <= end_res")
        if self.start_epoch > self.end_epoch:
            raise InvalidParam("start_epoch must be <= end_epoch")


def resolution_at(schedule: ResolutionSchedule, epoch: int) -> int:
    """Interpolated resolution for an epoch; constant end_res after the ramp."""
    if epoch <= schedule.start_epoch:
        return schedule.start_res
    if epoch >= schedule.end_epoch:
        return schedule.end_res
    span = schedule.end_epoch - schedule.start_epoch
    t = (epoch - schedule.start_epoch) / span
    raw = schedule.start_res + t * (schedule.end_res - schedule.start_res)
    snapped = int(raw // 32) * 32
    return max(schedule.start_res, min(schedule.end_res, snapped))


@dataclass
class Batch:
    views: list[np.ndarray]  # V arrays of shape (B, H, W, C)
    labels: np.ndarray  # (B,) int64
    epoch: int
    batch_index: int
    sample_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    timings_ms: dict[str, float] = field(default_factory=dict)


DEFAULT_GROUP_BYTES = 1 << 20  # quasi-random shuffles pages of about 1 MiB

_RESULT_TIMEOUT_S = 300.0  # a worker silent for this long is treated as dead


def build_epoch_plan(
    sample_count: int,
    traversal: Traversal,
    seed: int,
    epoch: int,
    group_size: int | None = None,
) -> np.ndarray:
    """Index order for one epoch.

    SEQUENTIAL is the identity; RANDOM is a uniform permutation keyed by
    (seed, epoch); QUASI_RANDOM shuffles contiguous groups and then shuffles
    within each group, preserving page locality for mapped reads.
    """
    if sample_count < 1:
        raise InvalidParam(f"sample_count must be >= 1, got {sample_count}")
    if traversal == Traversal.SEQUENTIAL:
        return np.arange(sample_count, dtype=np.int64)
    rng = plan_stream(seed, epoch)
    if traversal == Traversal.RANDOM:
        return rng.permutation(sample_count).astype(np.int64)
    # QUASI_RANDOM
    if group_size is None or group_size < 1:
        group_size = 1
    starts = np.arange(0, sample_count, group_size)
    group_order = rng.permutation(len(starts))
    out = np.empty(sample_count, dtype=np.int64)
    pos = 0
    for gi in group_order:
        start = int(starts[gi])
        members = np.arange(start, min(start + group_size, sample_count))
        members = members[rng.permutation(len(members))]
        out[pos : pos + len(members)] = members
        pos += len(members)
    return out


# ----------------------------------------------------------------------------
# worker side
# ----------------------------------------------------------------------------

_WORKER_HANDLE: DatasetHandle | None = None


def _worker_init(dataset_path: str):
    global _WORKER_HANDLE
    _WORKER_HANDLE = open_dataset(dataset_path)


def _produce_batch(args) -> tuple[int, list[np.ndarray], np.ndarray, dict[str, float]]:
    """Read, decode, and augment one batch worth of samples.

    Runs in a worker process (or inline). Returns stacked per-view arrays,
    labels, and stage timings in milliseconds. ``view_plan`` is either a
    tuple of pipelines or an InstanceViews recipe.
    """
    handle, seed, epoch, batch_index, indices, view_plan = args
    if handle is None:
        handle = _WORKER_HANDLE
    instance = view_plan if isinstance(view_plan, InstanceViews) else None
    n_views = 3 if instance is not None else len(view_plan)
    decode_s = 0.0
    augment_s = 0.0
    per_view: list[list[np.ndarray]] = [[] for _ in range(n_views)]
    labels = np.empty(len(indices), dtype=np.int64)
    for row, sample_index in enumerate(indices):
        try:
            t0 = time.perf_counter()
            record = handle.read_sample(int(sample_index))
            t1 = time.perf_counter()
            decode_s += t1 - t0
            labels[row] = record.label
            if instance is not None:
                from .losses import build_instance_batch

                stream = RngStream(seed, epoch=epoch, sample=int(sample_index), view=0)
                views, _ = build_instance_batch(
                    record.pixels,
                    instance.noise_std,
                    instance.patch_scale,
                    instance.out_size,
                    stream,
                )
                for view_index, image in enumerate(views):
                    per_view[view_index].append(image)
            else:
                for view_index, pipeline in enumerate(view_plan):
                    stream = RngStream(
                        seed, epoch=epoch, sample=int(sample_index), view=view_index
                    )
                    per_view[view_index].append(apply_pipeline(record.pixels, pipeline, stream))
            augment_s += time.perf_counter() - t1
        except Exception as exc:  # noqa: BLE001 - re-raised with sample context
            raise SampleReadError(int(sample_index), f"{type(exc).__name__}: {exc}") from exc

    t2 = time.perf_counter()
    views = []
    for view_index, images in enumerate(per_view):
        shapes = {im.shape for im in images}
        if len(shapes) > 1:
            raise ShapeMismatch(
                f"view {view_index} produced mixed shapes {sorted(shapes)}; "
                "add a resizing stage or pack same-size images"
            )
        views.append(np.stack(images))
    assemble_s = time.perf_counter() - t2
    timings = {
        "decode": decode_s * 1e3,
        "augment": augment_s * 1e3,
        "assemble": assemble_s * 1e3,
    }
    return batch_index, views, labels, timings


# ----------------------------------------------------------------------------
# coordinator side
# -----------------------------------------------------------------------------

class MultiViewLoader:
    """Ordered multi-view batch stream over a packed dataset."""

    def __init__(
        self,
        dataset_path: str | Path,
        config: LoaderConfig,
        schedule: ResolutionSchedule | None = None,
    ):
        self.dataset_path = str(dataset_path)
        self.config = config
        self.schedule = schedule
        self._handle = open_dataset(dataset_path)
        mean_bytes = self._handle.mean_payload_bytes()
        self._quasi_group = max(1, int(round(DEFAULT_GROUP_BYTES / max(1.0, mean_bytes))))

    @property
    def sample_count(self) -> int:
        return self._handle.sample_count

    def batches_per_epoch(self) -> int:
        n, b = self.sample_count, self.config.batch_size
        return n // b if self.config.drop_last else (n + b - 1) // b

    def close(self):
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _effective_view_plan(self, epoch: int):
        if self.config.instance is not None:
            return self.config.instance
        if self.schedule is None:
            return self.config.view_pipelines
        res = resolution_at(self.schedule, epoch)
        updated = []
        for pipeline in self.config.view_pipelines:
            updated.append(
                tuple(
                    replace(stage, out_size=res) if isinstance(stage, RandomResizedCrop) else stage
                    for stage in pipeline
                )
            )
        return tuple(updated)

    def _batch_tasks(self, epoch: int):
        plan = build_epoch_plan(
            self.sample_count,
            self.config.traversal,
            self.config.seed,
            epoch,
            group_size=self._quasi_group,
        )
        b = self.config.batch_size
        view_plan = self._effective_view_plan(epoch)
        n_full = len(plan) // b
        limit = n_full * b if self.config.drop_last else len(plan)
        for batch_index, start in enumerate(range(0, limit, b)):
            indices = plan[start : start + b]
            if len(indices) == 0:
                break
            yield (epoch, batch_index, indices, view_plan)

    def iter_epoch(self, epoch: int) -> Iterator[Batch]:
        """Yield the epoch's batches in plan order."""
        if self.config.num_workers == 0:
            for task in self._batch_tasks(epoch):
                e, bi, idx, pipes = task
                _, views, labels, timings = _produce_batch(
                    (self._handle, self.config.seed, e, bi, idx, pipes)
                )
                yield Batch(
                    views=views,
                    labels=labels,
                    epoch=e,
                    batch_index=bi,
                    sample_indices=idx,
                    timings_ms=timings,
                )
            return

        ctx = mp.get_context("fork")
        in_flight = self.config.num_workers + self.config.prefetch_depth
        with ctx.Pool(
            processes=self.config.num_workers,
            initializer=_worker_init,
            initargs=(self.dataset_path,),
        ) as pool:
            pending: list = []
            tasks = self._batch_tasks(epoch)
            exhausted = False

            def submit_next():
                nonlocal exhausted
                if exhausted:
                    return
                task = next(tasks, None)
                if task is None:
                    exhausted = True
                    return
                e, bi, idx, pipes = task
                pending.append(
                    (e, bi, idx, pool.apply_async(_produce_batch, ((None, self.config.seed, e, bi, idx, pipes),)))
                )

            try:
                for _ in range(in_flight):
                    submit_next()
                while pending:
                    e, bi, idx, result = pending.pop(0)
                    try:
                        _, views, labels, timings = result.get(timeout=_RESULT_TIMEOUT_S)
                    except mp.TimeoutError as exc:
                        raise SampleReadError(
                            int(idx[0]), "worker pool stalled; no batch within timeout"
                        ) from exc
                    submit_next()
                    yield Batch(
                        views=views,
                        labels=labels,
                        epoch=e,
                        batch_index=bi,
                        sample_indices=idx,
                        timings_ms=timings,
                    )
            finally:
                # drain in-flight work before the pool context terminates:
                # SIGTERM on a worker mid-result-write can wedge the result
                # pipe and deadlock terminate() (observed rarely in practice)
                for _, _, _, result in pending:
                    try:
                        result.wait(timeout=_RESULT_TIMEOUT_S)
                    except Exception:
                        pass
                pool.close()
                pool.join()

    def iter_steps(self, total_steps: int, start_epoch: int = 0) -> Iterator[Batch]:
        """Stream batches across consecutive epochs until total_steps yielded."""
        produced = 0
        epoch = start_epoch
        while produced < total_steps:
            for batch in self.iter_epoch(epoch):
                yield batch
                produced += 1
                if produced >= total_steps:
                    break
            epoch += 1


# ----------------------------------------------------------------------------
# throughput benchmarking
# ----------------------------------------------------------------------------

@dataclass
class ThroughputReport:
    images_per_sec: float
    images: int
    wall_seconds: float
    stage_ms: dict[str, float]
    config_echo: dict

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {"images": self.images, "config": self.config_echo}
        if include_timing:
            out["images_per_sec"] = self.images_per_sec
            out["wall_seconds"] = self.wall_seconds
            out["stage_ms"] = self.stage_ms
        return out


def bench_throughput(
    dataset_path: str | Path,
    config: LoaderConfig,
    epochs: int = 1,
    warmup: bool = True,
) -> ThroughputReport:
    """Measure a full no-model pass; the warm-up epoch is excluded.

    Stage shares come from worker-side timers (decode, augment, assemble);
    wall time covers the orchestrated pass end to end.
    """
    stage_totals = {"decode": 0.0, "augment": 0.0, "assemble": 0.0}
    images = 0
    with MultiViewLoader(dataset_path, config) as loader:
        if warmup:
            for _ in loader.iter_epoch(0):
                pass
        t0 = time.perf_counter()
        for epoch in range(epochs):
            for batch in loader.iter_epoch(epoch):
                images += batch.labels.shape[0]
                for key in stage_totals:
                    stage_totals[key] += batch.timings_ms.get(key, 0.0)
        wall = time.perf_counter() - t0

    echo = {
        "batch_size": config.batch_size,
        "num_workers": config.num_workers,
        "traversal": config.traversal.value,
        "seed": config.seed,
        "drop_last": config.drop_last,
        "prefetch_depth": config.prefetch_depth,
        "views": [format_pipeline(p) for p in config.view_pipelines],
        "epochs": epochs,
    }
    return ThroughputReport(
        images_per_sec=images / wall if wall > 0 else float("inf"),
        images=images,
        wall_seconds=wall,
        stage_ms={k: round(v, 3) for k, v in stage_totals.items()},
        config_echo=echo,
    )
