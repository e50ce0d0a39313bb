"""Desk-scale SSL training loop with an online probe and collapse monitor.

One thread drives everything: consume an ordered batch stream, embed the
views, evaluate the chosen loss, backpropagate its analytic gradient, step,
then give the probe one cross-entropy step on gradient-detached backbone
features. Per-dimension embedding std is reported every step; a run whose
mean std drops below the collapse threshold is flagged but not aborted. A
non-finite loss aborts immediately with diagnostics.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .augment import Pipeline, RandomResizedCrop, ToFloatNormalize, resize_bilinear, to_float_normalize
from .container import DatasetHandle
from .errors import NanLoss, ViewCountMismatch
from .loader import Batch, MultiViewLoader
from .losses import (
    BarlowParams,
    LossOutput,
    SimClrParams,
    VicRegCoeffs,
    barlow_loss,
    simclr_loss,
    vicreg_loss,
)
from .model import (
    EncoderProjector,
    EncoderSpec,
    Mlp,
    ProbeSpec,
    ProjectorSpec,
    SgdMomentum,
    backward_and_step,
    build_probe,
    ema_update,
    online_probe_step,
    probe_accuracy,
)
from .relations import RelationMatrix, build_pair_relation


class Method(enum.Enum):
    SIMCLR = "simclr"
    VICREG = "vicreg"
    BARLOW = "barlow"
    INSTANCE_SIMCLR = "instance_simclr"


_INSTANCE_RELATION = RelationMatrix.from_pairs(3, [(0, 1)])


@dataclass(frozen=True)
class TrainSettings:
    method: Method
    steps: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    simclr: SimClrParams = SimClrParams()
    vicreg: VicRegCoeffs = VicRegCoeffs()
    barlow: BarlowParams = BarlowParams()
    probe_lr: float = 0.1
    ema_momentum: float | None = None
    collapse_threshold: float = 1e-3
    eval_every: int = 250


@dataclass
class StepMetrics:
    step: int
    loss: float
    terms: dict[str, float]
    embed_std: float  # mean over dimensions; the collapse flag reads this
    embed_std_dims: list[float]  # per-dimension std of Z, reported every step
    probe_loss: float
    probe_accuracy: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "loss": self.loss,
            "terms": self.terms,
            "embed_std": self.embed_std,
            "embed_std_dims": self.embed_std_dims,
            "probe_loss": self.probe_loss,
            "probe_accuracy": self.probe_accuracy,
        }


@dataclass
class RunReport:
    method: str
    steps: int
    seed: int
    final_loss: float
    final_embed_std: float
    best_probe_accuracy: float
    final_probe_accuracy: float
    collapsed: bool
    per_epoch: list[dict] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    wall_seconds: float | None = None
    status: str = "ok"

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "method": self.method,
            "steps": self.steps,
            "seed": self.seed,
            "final_loss": self.final_loss,
            "final_embed_std": self.final_embed_std,
            "best_probe_accuracy": self.best_probe_accuracy,
            "final_probe_accuracy": self.final_probe_accuracy,
            "collapsed": self.collapsed,
            "per_epoch": self.per_epoch,
            "config": self.config_echo,
            "status": self.status,
        }
        if include_timing and self.wall_seconds is not None:
            out["wall_seconds"] = self.wall_seconds
        return out


def _flatten_views(views: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    for v in views:
        arr = v.astype(np.float64) / 255.0 if v.dtype == np.uint8 else v
        out.append(arr.reshape(arr.shape[0], -1))
    return out


def _interleave(z_views: list[np.ndarray]) -> np.ndarray:
    v = len(z_views)
    rows, k = z_views[0].shape
    out = np.empty((v * rows, k))
    for i, z in enumerate(z_views):
        out[i::v] = z
    return out


def _deinterleave(grad: np.ndarray, n_views: int) -> list[np.ndarray]:
    return [grad[i::n_views] for i in range(n_views)]


class Trainer:
    """Owns the model, optimizers, probe, and the per-step bookkeeping."""

    def __init__(
        self,
        encoder: EncoderSpec,
        projector: ProjectorSpec,
        settings: TrainSettings,
        probe_spec: ProbeSpec,
        seed: int,
    ):
        self.settings = settings
        self.seed = seed
        self.model = EncoderProjector(encoder, projector, seed=seed)
        self.optimizer = SgdMomentum(
            lr=settings.lr, momentum=settings.momentum, weight_decay=settings.weight_decay
        )
        self.probe = build_probe(probe_spec, encoder.out_dim, seed=seed)
        self.probe_optimizer = SgdMomentum(lr=settings.probe_lr, momentum=0.9)
        self.step_count = 0
        self.ema_params = None
        if settings.ema_momentum is not None:
            self.ema_params = [p.copy() for p in self.model.params]

    # -- loss dispatch ------------------------------------------------------

    def _pair_loss(self, z_views: list[np.ndarray]) -> tuple[LossOutput, list[np.ndarray]]:
        b = z_views[0].shape[0]
        z = _interleave(z_views)
        g = build_pair_relation(b)
        if self.settings.method == Method.SIMCLR:
            out = simclr_loss(z, g, self.settings.simclr)
        else:
            out = vicreg_loss(z, g, self.settings.vicreg)
        return out, _deinterleave(out.grad, len(z_views))

    def _barlow(self, z_views: list[np.ndarray]) -> tuple[LossOutput, list[np.ndarray]]:
        out = barlow_loss(z_views[0], z_views[1], self.settings.barlow)
        return out, [out.grad, out.grad_right]

    def _instance(self, z_views: list[np.ndarray]) -> tuple[LossOutput, list[np.ndarray]]:
        # one contrastive problem per source: positives against their own
        # patch only, so the batch's other images never act as negatives
        b, k = z_views[0].shape
        grads = [np.zeros((b, k)) for _ in range(3)]
        total = 0.0
        for i in range(b):
            z = np.stack([z_views[0][i], z_views[1][i], z_views[2][i]])
            out = simclr_loss(z, _INSTANCE_RELATION, self.settings.simclr)
            total += out.value
            for v in range(3):
                grads[v][i] = out.grad[v]
        scale = 1.0 / b
        value = total * scale
        for g in grads:
            g *= scale
        summary = LossOutput(value=value, grad=np.concatenate(grads), terms={"nll": value})
        return summary, grads

    # -- one step -------------------------------------------------------------

    def train_step(self, batch: Batch) -> StepMetrics:
        method = self.settings.method
        needed = 3 if method == Method.INSTANCE_SIMCLR else 2
        if len(batch.views) != needed:
            raise ViewCountMismatch(
                f"{method.value} needs {needed} views, batch has {len(batch.views)}"
            )

        flat = _flatten_views(batch.views)
        record = self.model.forward(flat)
        for z in record.z_views:
            if not np.all(np.isfinite(z)):
                raise NanLoss(
                    f"non-finite embeddings at step {self.step_count}; "
                    "the run has diverged (try a lower learning rate or grad_clip)"
                )

        if method == Method.BARLOW:
            loss_out, d_views = self._barlow(record.z_views)
        elif method == Method.INSTANCE_SIMCLR:
            loss_out, d_views = self._instance(record.z_views)
        else:
            loss_out, d_views = self._pair_loss(record.z_views)

        if not np.isfinite(loss_out.value):
            raise NanLoss(
                f"non-finite loss at step {self.step_count}: "
                f"value={loss_out.value}, terms={loss_out.terms}"
            )

        z_all = np.concatenate(record.z_views, axis=0)
        std_dims = np.std(z_all, axis=0)
        embed_std = float(std_dims.mean())

        grads = self.model.backward(record, d_views)
        if self.settings.grad_clip > 0:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if total > self.settings.grad_clip:
                scale = self.settings.grad_clip / total
                for g in grads:
                    g *= scale
        self.optimizer.step(self.model.params, grads)
        if self.ema_params is not None:
            ema_update(self.ema_params, self.model.params, self.settings.ema_momentum)

        probe_stats = online_probe_step(
            record.h_views[0], batch.labels, self.probe, self.probe_optimizer
        )
        self.step_count += 1
        return StepMetrics(
            step=self.step_count,
            loss=loss_out.value,
            terms=loss_out.terms,
            embed_std=embed_std,
            embed_std_dims=[float(s) for s in std_dims],
            probe_loss=probe_stats["ce_loss"],
            probe_accuracy=probe_stats["accuracy"],
        )

    # -- evaluation -----------------------------------------------------------

    def eval_probe_accuracy(self, handle: DatasetHandle, pipeline: Pipeline, batch_size: int = 256) -> float:
        """Probe accuracy over the whole dataset on deterministic eval views."""
        n = handle.sample_count
        correct = 0
        for start in range(0, n, batch_size):
            idx = range(start, min(start + batch_size, n))
            imgs, labels = [], []
            for i in idx:
                rec = handle.read_sample(i)
                imgs.append(eval_view(rec.pixels, pipeline))
                labels.append(rec.label)
            x = _flatten_views([np.stack(imgs)])[0]
            record = self.model.forward([x])
            acc = probe_accuracy(self.probe, record.h_views[0], np.asarray(labels))
            correct += acc * len(labels)
        return correct / n


def eval_view(img: np.ndarray, pipeline: Pipeline) -> np.ndarray:
    """Deterministic stand-in for a training view: resize + normalize only."""
    out = img
    for stage in pipeline:
        if isinstance(stage, RandomResizedCrop):
            out = resize_bilinear(out, stage.out_size, stage.out_size)
        elif isinstance(stage, ToFloatNormalize):
            out = to_float_normalize(out, stage)
    return out


def eval_pipeline_for(loader_config) -> Pipeline:
    """Deterministic eval recipe matching what the loader feeds the model."""
    if loader_config.instance is not None:
        side = loader_config.instance.out_size
        return (RandomResizedCrop(out_size=side, scale=(1.0, 1.0), ratio=(1.0, 1.0)),)
    return loader_config.view_pipelines[0]


def run_training(
    dataset_path: str,
    loader_config,
    encoder: EncoderSpec,
    projector: ProjectorSpec,
    settings: TrainSettings,
    probe_spec: ProbeSpec,
    seed: int,
    metrics_sink: Callable[[dict], None] | None = None,
    config_echo: dict | None = None,
) -> RunReport:
    """Run the full desk-scale protocol and summarize it as a RunReport."""
    trainer = Trainer(encoder, projector, settings, probe_spec, seed=seed)
    t0 = time.perf_counter()
    epoch_acc: dict[int, list[StepMetrics]] = {}
    best_probe = 0.0
    final_metrics: StepMetrics | None = None

    with MultiViewLoader(dataset_path, loader_config) as loader:
        # a NanLoss abort propagates to the caller; the context still closes
        for batch in loader.iter_steps(settings.steps):
            metrics = trainer.train_step(batch)
            final_metrics = metrics
            epoch_acc.setdefault(batch.epoch, []).append(metrics)
            if metrics_sink is not None:
                metrics_sink(metrics.to_dict())
            if settings.eval_every and metrics.step % settings.eval_every == 0:
                acc = trainer.eval_probe_accuracy(
                    loader._handle, eval_pipeline_for(loader_config)
                )
                best_probe = max(best_probe, acc)
        final_accuracy = trainer.eval_probe_accuracy(
            loader._handle, eval_pipeline_for(loader_config)
        )
    best_probe = max(best_probe, final_accuracy)
    wall = time.perf_counter() - t0

    per_epoch = []
    for epoch in sorted(epoch_acc):
        steps = epoch_acc[epoch]
        per_epoch.append(
            {
                "epoch": epoch,
                "steps": len(steps),
                "mean_loss": float(np.mean([m.loss for m in steps])),
                "mean_embed_std": float(np.mean([m.embed_std for m in steps])),
                "mean_probe_accuracy": float(np.mean([m.probe_accuracy for m in steps])),
            }
        )

    assert final_metrics is not None
    collapsed = final_metrics.embed_std < settings.collapse_threshold
    return RunReport(
        method=settings.method.value,
        steps=settings.steps,
        seed=seed,
        final_loss=final_metrics.loss,
        final_embed_std=final_metrics.embed_std,
        best_probe_accuracy=best_probe,
        final_probe_accuracy=final_accuracy,
        collapsed=collapsed,
        per_epoch=per_epoch,
        config_echo=config_echo or {},
        wall_seconds=wall,
    )
