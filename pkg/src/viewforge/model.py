"""Desk-scale encoder/projector stack with explicit reverse-mode gradients.

Affine layers with optional ReLU, float64 throughout. The forward pass
records a single-use tape; the backward pass accumulates exact parameter
gradients from a loss gradient dL/dZ. Probes get the backbone output H,
losses get the projected output Z, and nothing ever crosses that line: a
probe step cannot touch encoder parameters because it only ever sees H as a
constant array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidLabel, ShapeMismatch, StaleTape
from .rng import init_stream


@dataclass(frozen=True)
class AffineSpec:
    in_dim: int
    out_dim: int
    relu: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeMismatch(f"affine dims must be >= 1, got {self.in_dim}->{self.out_dim}")


@dataclass(frozen=True)
class EncoderSpec:
    """Backbone: affine stack, ReLU after every layer except the last."""

    layers: tuple[AffineSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeMismatch(
                    f"encoder dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @classmethod
    def from_dims(cls, in_dim: int, widths: tuple[int, ...]) -> "EncoderSpec":
        dims = (in_dim, *widths)
        layers = tuple(
            AffineSpec(dims[i], dims[i + 1], relu=i < len(widths) - 1)
            for i in range(len(widths))
        )
        return cls(layers=layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass(frozen=True)
class ProjectorSpec:
    """MLP appended for the loss and cut afterwards; depth 0 is the identity."""

    depth: int
    hidden: int
    out_dim: int

    def __post_init__(self):
        if self.depth < 0:
            raise ShapeMismatch(f"projector depth must be >= 0, got {self.depth}")
        if self.depth > 0 and (self.hidden < 1 or self.out_dim < 1):
            raise ShapeMismatch("projector hidden/out dims must be >= 1")

    def build(self, in_dim: int) -> tuple[AffineSpec, ...]:
        if self.depth == 0:
            return ()
        if self.depth == 1:
            return (AffineSpec(in_dim, self.out_dim, relu=False),)
        mids = [AffineSpec(in_dim, self.hidden, relu=True)]
        mids += [AffineSpec(self.hidden, self.hidden, relu=True) for _ in range(self.depth - 2)]
        mids.append(AffineSpec(self.hidden, self.out_dim, relu=False))
        return tuple(mids)


@dataclass
class Tape:
    """Per-layer inputs and ReLU masks from one forward pass; single use."""

    xs: list[np.ndarray]
    masks: list[np.ndarray | None]
    owner: "Mlp"
    used: bool = False


class Mlp:
    """Plain affine/ReLU stack; the building block for models and probes."""

    def __init__(self, layers: tuple[AffineSpec, ...], seed: int, init_lane: int = 0):
        self.layers = layers
        self.params: list[np.ndarray] = []
        for i, spec in enumerate(layers):
            g = init_stream(seed, lane=init_lane * 1024 + i)
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            w = g.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim))
            self.params.append(w)
            self.params.append(np.zeros(spec.out_dim))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or (self.layers and x.shape[1] != self.layers[0].in_dim):
            raise ShapeMismatch(
                f"input shape {x.shape} does not feed a {self.layers[0].in_dim}-dim stack"
            )
        xs, masks = [], []
        for i, spec in enumerate(self.layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            xs.append(x)
            a = x @ w + b
            if spec.relu:
                mask = a > 0
                masks.append(mask)
                x = np.where(mask, a, 0.0)
            else:
                masks.append(None)
                x = a
        return x, Tape(xs=xs, masks=masks, owner=self)

    def forward_nograd(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def backward(self, tape: Tape, d_out: np.ndarray) -> list[np.ndarray]:
        """Exact parameter gradients; also consumes the tape."""
        if tape.used or tape.owner is not self:
            raise StaleTape("backward needs the tape from this model's latest forward")
        tape.used = True
        grads: list[np.ndarray] = [np.empty(0)] * len(self.params)
        g = np.asarray(d_out, dtype=np.float64)
        for i in reversed(range(len(self.layers))):
            w = self.params[2 * i]
            if tape.masks[i] is not None:
                g = np.where(tape.masks[i], g, 0.0)
            grads[2 * i] = tape.xs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ w.T
        return grads


@dataclass
class ForwardRecord:
    """Per-view backbone and projected outputs plus the backward tape."""

    h_views: list[np.ndarray]
    z_views: list[np.ndarray]
    tape: Tape
    h_split: int  # layer count belonging to the encoder
    view_rows: int


class EncoderProjector:
    """Backbone + projector trained jointly; H and Z are reported separately."""

    def __init__(self, encoder: EncoderSpec, projector: ProjectorSpec, seed: int):
        self.encoder = encoder
        self.projector = projector
        proj_layers = projector.build(encoder.out_dim)
        self.net = Mlp(encoder.layers + proj_layers, seed=seed)
        self.encoder_layer_count = len(encoder.layers)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    @property
    def encoder_params(self) -> list[np.ndarray]:
        return self.net.params[: 2 * self.encoder_layer_count]

    def forward(self, views: list[np.ndarray]) -> ForwardRecord:
        """Run all views through the stack in one pass.

        Views are flattened to (B, D) rows and concatenated view-major; the
        record hands back per-view H (backbone, for probes) and Z (projected,
        for losses).
        """
        if not views:
            raise ShapeMismatch("forward needs at least one view")
        flat = [v.reshape(v.shape[0], -1).astype(np.float64) for v in views]
        rows = flat[0].shape[0]
        for f in flat:
            if f.shape != flat[0].shape:
                raise ShapeMismatch(f"view shapes differ: {f.shape} vs {flat[0].shape}")
        if flat[0].shape[1] != self.encoder.in_dim:
            raise ShapeMismatch(
                f"flattened view width {flat[0].shape[1]} does not match "
                f"encoder input dim {self.encoder.in_dim}"
            )
        x = np.concatenate(flat, axis=0)

        # manual split pass so H is captured mid-stack
        xs, masks = [], []
        h = None
        for i, spec in enumerate(self.net.layers):
            w, b = self.net.params[2 * i], self.net.params[2 * i + 1]
            xs.append(x)
            a = x @ w + b
            if spec.relu:
                mask = a > 0
                masks.append(mask)
                x = np.where(mask, a, 0.0)
            else:
                masks.append(None)
                x = a
            if i + 1 == self.encoder_layer_count:
                h = x
        z = x
        tape = Tape(xs=xs, masks=masks, owner=self.net)
        n_views = len(views)
        h_views = [h[v * rows : (v + 1) * rows] for v in range(n_views)]
        z_views = [z[v * rows : (v + 1) * rows] for v in range(n_views)]
        return ForwardRecord(
            h_views=h_views,
            z_views=z_views,
            tape=tape,
            h_split=self.encoder_layer_count,
            view_rows=rows,
        )

    def backward(self, record: ForwardRecord, d_z_views: list[np.ndarray]) -> list[np.ndarray]:
        if len(d_z_views) != len(record.z_views):
            raise ShapeMismatch("gradient views do not match forward views")
        d_out = np.concatenate(
            [np.asarray(d, dtype=np.float64) for d in d_z_views], axis=0
        )
        return self.net.backward(record.tape, d_out)


class SgdMomentum:
    """SGD with momentum and decoupled weight decay."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers: dict[int, np.ndarray] = {}

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ShapeMismatch("params/grads length mismatch")
        for idx, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeMismatch(f"param {idx} shape {p.shape} vs grad {g.shape}")
            buf = self._buffers.get(idx)
            if buf is None:
                buf = np.zeros_like(p)
                self._buffers[idx] = buf
            buf *= self.momentum
            buf += g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * buf


def backward_and_step(
    model: EncoderProjector,
    record: ForwardRecord,
    d_z_views: list[np.ndarray],
    optimizer: SgdMomentum,
) -> list[np.ndarray]:
    """Backpropagate dL/dZ through projector and encoder, then step."""
    grads = model.backward(record, d_z_views)
    optimizer.step(model.params, grads)
    return grads


def ema_update(
    target_params: list[np.ndarray], online_params: list[np.ndarray], m: float
) -> list[np.ndarray]:
    """target <- m * target + (1 - m) * online, elementwise and in place."""
    if not 0.0 <= m <= 1.0:
        raise ShapeMismatch(f"momentum must be in [0, 1], got {m}")
    if len(target_params) != len(online_params):
        raise ShapeMismatch("parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ShapeMismatch(f"parameter shapes differ: {t.shape} vs {o.shape}")
        t *= m
        t += (1.0 - m) * o
    return target_params


# ----------------------------------------------------------------------------
# probes
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeSpec:
    num_classes: int
    kind: str = "linear"  # "linear" or "mlp"
    hidden: tuple[int, ...] = ()
    mode: str = "online"  # "online" or "offline"

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ShapeMismatch(f"unknown probe kind {self.kind!r}")
        if self.kind == "mlp" and not self.hidden:
            raise ShapeMismatch("mlp probe needs at least one hidden width")
        if self.num_classes < 2:
            raise ShapeMismatch("probe needs >= 2 classes")


def build_probe(spec: ProbeSpec, in_dim: int, seed: int) -> Mlp:
    widths = (*spec.hidden, spec.num_classes) if spec.kind == "mlp" else (spec.num_classes,)
    dims = (in_dim, *widths)
    layers = tuple(
        AffineSpec(dims[i], dims[i + 1], relu=i < len(widths) - 1)
        for i in range(len(widths))
    )
    return Mlp(layers, seed=seed, init_lane=7)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Mean CE loss, dL/dlogits, and batch accuracy; log-space for stability."""
    n, c = logits.shape
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= c):
        raise InvalidLabel(f"labels must be in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    nll = np.log(total[:, 0]) - shifted[np.arange(n), labels]
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return float(nll.mean()), grad, accuracy


def online_probe_step(
    h: np.ndarray, labels: np.ndarray, probe: Mlp, optimizer: SgdMomentum
) -> dict[str, float]:
    """One CE step on the probe only; H is a constant input (gradient cut)."""
    logits, tape = probe.forward(h)
    loss, d_logits, accuracy = softmax_cross_entropy(logits, labels)
    grads = probe.backward(tape, d_logits)
    optimizer.step(probe.params, grads)
    return {"ce_loss": loss, "accuracy": accuracy}


def probe_accuracy(probe: Mlp, h: np.ndarray, labels: np.ndarray) -> float:
    logits = probe.forward_nograd(h)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


@dataclass
class OfflineProbeResult:
    best_accuracy: float
    best_epoch: int
    curve: list[float]  # validation accuracy per epoch


def offline_probe(
    representations: np.ndarray,
    labels: np.ndarray,
    spec: ProbeSpec,
    epochs: int,
    seed: int = 0,
    lr: float = 0.1,
    batch_size: int = 128,
    val_fraction: float = 0.2,
) -> OfflineProbeResult:
    """Train a probe on frozen representations; report the best epoch.

    Fixed 80/20 train/val split derived from the seed. Nonlinear probes
    overfit quickly, so the best validation epoch is tracked rather than the
    last one.
    """
    reps = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels)
    if reps.size == 0:
        from .errors import EmptyInput

        raise EmptyInput("offline probe needs a non-empty representation table")

    n = reps.shape[0]
    perm = init_stream(seed, lane=11).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    probe = build_probe(spec, reps.shape[1], seed=seed)
    opt = SgdMomentum(lr=lr, momentum=0.9)

    curve: list[float] = []
    best_acc, best_epoch = -1.0, -1
    for epoch in range(epochs):
        order = init_stream(seed, lane=13 + epoch).permutation(len(train_idx))
        shuffled = train_idx[order]
        for start in range(0, len(shuffled), batch_size):
            batch = shuffled[start : start + batch_size]
            logits, tape = probe.forward(reps[batch])
            _, d_logits, _ = softmax_cross_entropy(logits, labels[batch])
            grads = probe.backward(tape, d_logits)
            opt.step(probe.params, grads)
        val_acc = probe_accuracy(probe, reps[val_idx], labels[val_idx])
        curve.append(val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
    return OfflineProbeResult(best_accuracy=best_acc, best_epoch=best_epoch, curve=curve)
