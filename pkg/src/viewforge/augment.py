"""Deterministic, seeded image transforms.

Every kernel is a pure function of (image, stage, generator): no hidden
state, no global RNG. Images are H*W*C uint8 arrays until ToFloatNormalize
converts to float64; GaussianNoise accepts either and works on the [0, 1]
scale. Draw order inside each kernel is fixed and documented so results are
reproducible across runs and worker schedules.

A pipeline is an ordered list of stages. ``apply_pipeline`` gives stage i the
sub-stream with lane i, so extending a pipeline never changes what earlier
stages drew. The plain-text serialization (one stage per line) is implemented
by ``parse_pipeline`` / ``format_pipeline``; grammar in docs/pipeline_format.md.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence, Union

import numpy as np

from .errors import InvalidParam, ShapeMismatch
from .rng import RngStream

LUMA = np.array([0.299, 0.587, 0.114])


# --------------------------------------------------------------------------
# stage declarations
# --------------------------------------------------------------------------

def _check_prob(p: float, name: str):
    if not 0.0 <= p <= 1.0:
        raise InvalidParam(f"{name}: probability must be in [0, 1], got {p}")


def _check_range(rng: tuple, name: str):
    lo, hi = rng
    if lo > hi:
        raise InvalidParam(f"{name}: range lo must be <= hi, got ({lo}, {hi})")


@dataclass(frozen=True)
class RandomResizedCrop:
    out_size: int
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        _check_range(self.scale, "RandomResizedCrop.scale")
        _check_range(self.ratio, "RandomResizedCrop.ratio")
        if not 0.0 < self.scale[0] <= 1.0 or self.scale[1] > 1.0:
            raise InvalidParam(f"RandomResizedCrop.scale must lie in (0, 1], got {self.scale}")
        if self.out_size < 1:
            raise InvalidParam(f"RandomResizedCrop.out_size must be >= 1, got {self.out_size}")


@dataclass(frozen=True)
class HorizontalFlip:
    p: float = 0.5

    def __post_init__(self):
        _check_prob(self.p, "HorizontalFlip.p")


@dataclass(frozen=True)
class Grayscale:
    p: float = 0.2

    def __post_init__(self):
        _check_prob(self.p, "Grayscale.p")


@dataclass(frozen=True)
class ColorJitter:
    p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1

    def __post_init__(self):
        _check_prob(self.p, "ColorJitter.p")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise InvalidParam(f"ColorJitter.{name} must be >= 0")


@dataclass(frozen=True)
class Solarization:
    p: float = 0.2
    threshold: int = 128

    def __post_init__(self):
        _check_prob(self.p, "Solarization.p")
        if not 0 <= self.threshold <= 255:
            raise InvalidParam(f"Solarization.threshold must be in [0, 255], got {self.threshold}")


@dataclass(frozen=True)
class GaussianBlur:
    p: float = 1.0
    sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        _check_prob(self.p, "GaussianBlur.p")
        _check_range(self.sigma, "GaussianBlur.sigma")
        if self.sigma[0] <= 0:
            raise InvalidParam(f"GaussianBlur.sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class GaussianNoise:
    std: float = 0.1

    def __post_init__(self):
        if self.std < 0:
            raise InvalidParam(f"GaussianNoise.std must be >= 0, got {self.std}")


@dataclass(frozen=True)
class ToFloatNormalize:
    mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise InvalidParam("ToFloatNormalize: mean and std lengths differ")
        if any(s == 0 for s in self.std):
            raise InvalidParam("ToFloatNormalize: std entries must be nonzero")


Stage = Union[
    RandomResizedCrop,
    HorizontalFlip,
    Grayscale,
    ColorJitter,
    Solarization,
    GaussianBlur,
    GaussianNoise,
    ToFloatNormalize,
]

Pipeline = Sequence[Stage]


# ---------------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; exact copy when sizes match."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    src = img.astype(np.float64)

    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(img.dtype)


# -----------------------------------------------------------------------------
# kernels (one per stage); draw order inside each kernel is part of the contract
# -----------------------------------------------------------------------------

def random_resized_crop(img: np.ndarray, stage: RandomResizedCrop, rng: np.random.Generator) -> np.ndarray:
    """Sample an area fraction and log-uniform aspect, crop, resize.

    Draws per attempt: area fraction, log-aspect, then (top, left) on success.
    After 10 failed attempts falls back to the largest centered crop whose
    aspect is clamped to the requested range.
    """
    h, w = img.shape[:2]
    area = h * w
    for _ in range(10):
        target_area = area * rng.uniform(stage.scale[0], stage.scale[1])
        aspect = math.exp(rng.uniform(math.log(stage.ratio[0]), math.log(stage.ratio[1])))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[top : top + ch, left : left + cw]
            return resize_bilinear(crop, stage.out_size, stage.out_size)
    # center-crop fallback: clamp aspect, use the largest fitting rectangle
    in_ratio = w / h
    if in_ratio < stage.ratio[0]:
        cw = w
        ch = min(h, int(round(cw / stage.ratio[0])))
    elif in_ratio > stage.ratio[1]:
        ch = h
        cw = min(w, int(round(ch * stage.ratio[1])))
    else:
        cw, ch = w, h
    top = (h - ch) // 2
    left = (w - cw) // 2
    crop = img[top : top + ch, left : left + cw]
    return resize_bilinear(crop, stage.out_size, stage.out_size)


def horizontal_flip(img: np.ndarray, stage: HorizontalFlip, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < stage.p:
        return img[:, ::-1].copy()
    return img.copy()


def _luma(img_f: np.ndarray) -> np.ndarray:
    return img_f @ LUMA


def grayscale(img: np.ndarray, stage: Grayscale, rng: np.random.Generator) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"grayscale needs a 3-channel image, got shape {img.shape}")
    if rng.random() >= stage.p:
        return img.copy()
    luma = np.rint(_luma(img.astype(np.float64)))
    gray = np.clip(luma, 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def solarize(img: np.ndarray, stage: Solarization, rng: np.random.Generator) -> np.ndarray:
    if img.dtype != np.uint8:
        raise ShapeMismatch(f"solarize needs an 8-bit image, got {img.dtype}")
    if rng.random() >= stage.p:
        return img.copy()
    out = img.copy()
    mask = out >= stage.threshold
    out[mask] = 255 - out[mask]
    return out


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    # rgb float64 in [0, 1]; h in turns [0, 1), s and v in [0, 1]
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        safe = np.where(delta > 0, delta, 1.0)
        rc = (maxc - r) / safe
        gc = (maxc - g) / safe
        bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    rgb = np.empty(hsv.shape, dtype=np.float64)
    masks = [i == k for k in range(6)]
    comps = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    for mask, (rr, gg, bb) in zip(masks, comps):
        rgb[..., 0] = np.where(mask, rr, rgb[..., 0])
        rgb[..., 1] = np.where(mask, gg, rgb[..., 1])
        rgb[..., 2] = np.where(mask, bb, rgb[..., 2])
    return rgb


def color_jitter(img: np.ndarray, stage: ColorJitter, rng: np.random.Generator) -> np.ndarray:
    """Brightness/contrast/saturation scalings and a hue rotation, shuffled.

    Draw order: gate, four factors (brightness, contrast, saturation, hue),
    then the order permutation. All arithmetic runs in float64 on the [0, 255]
    scale with one final round+clamp, so unit factors are exact identities.
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"color_jitter needs a 3-channel image, got shape {img.shape}")
    if rng.random() >= stage.p:
        return img.copy()

    fb = rng.uniform(1 - stage.brightness, 1 + stage.brightness)
    fc = rng.uniform(1 - stage.contrast, 1 + stage.contrast)
    fs = rng.uniform(1 - stage.saturation, 1 + stage.saturation)
    fh = rng.uniform(-stage.hue, stage.hue)
    order = rng.permutation(4)

    out = img.astype(np.float64)
    for op in order:
        if op == 0:
            if fb != 1.0:
                out = out * fb
        elif op == 1:
            if fc != 1.0:
                mean = _luma(out).mean()
                out = mean + (out - mean) * fc
        elif op == 2:
            if fs != 1.0:
                luma = _luma(out)[:, :, None]
                out = luma + (out - luma) * fs
        else:
            if fh != 0.0:
                hsv = _rgb_to_hsv(np.clip(out, 0.0, 255.0) / 255.0)
                hsv[..., 0] = (hsv[..., 0] + fh) % 1.0
                out = _hsv_to_rgb(hsv) * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, stage: GaussianBlur, rng: np.random.Generator) -> np.ndarray:
    """Separable Gaussian with sigma ~ U(sigma_range) and mirror padding.

    Draws: gate, then sigma. Kernel radius is ceil(3*sigma); edges reflect
    without repeating the border pixel (numpy 'reflect').
    """
    if rng.random() >= stage.p:
        return img.copy()
    sigma = rng.uniform(stage.sigma[0], stage.sigma[1])
    kernel = _gaussian_kernel(sigma)
    radius = len(kernel) // 2
    src = img.astype(np.float64)
    padded = np.pad(src, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    tmp = np.zeros_like(src)
    for i, kv in enumerate(kernel):
        tmp += kv * padded[i : i + src.shape[0]]
    padded = np.pad(tmp, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(src)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + src.shape[1]]
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(img.dtype)


def gaussian_noise(img: np.ndarray, stage: GaussianNoise, rng: np.random.Generator) -> np.ndarray:
    """Additive N(0, std^2) on the [0, 1] scale, clamped to the valid range."""
    if stage.std == 0:
        return img.copy()
    noise = rng.normal(0.0, stage.std, size=img.shape)
    if img.dtype == np.uint8:
        scaled = img.astype(np.float64) / 255.0 + noise
        return np.clip(np.rint(np.clip(scaled, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return np.clip(img + noise, 0.0, 1.0)


def to_float_normalize(img: np.ndarray, stage: ToFloatNormalize) -> np.ndarray:
    c = img.shape[2]
    if len(stage.mean) != c:
        raise ShapeMismatch(
            f"normalize has {len(stage.mean)} channel stats but image has {c} channels"
        )
    mean = np.asarray(stage.mean, dtype=np.float64)
    std = np.asarray(stage.std, dtype=np.float64)
    return (img.astype(np.float64) / 255.0 - mean) / std


# ----------------------------------------------------------------------------
# dispatch + pipelines
# ----------------------------------------------------------------------------

def apply_stage(img: np.ndarray, stage: Stage, rng: np.random.Generator) -> np.ndarray:
    if isinstance(stage, RandomResizedCrop):
        return random_resized_crop(img, stage, rng)
    if isinstance(stage, HorizontalFlip):
        return horizontal_flip(img, stage, rng)
    if isinstance(stage, Grayscale):
        return grayscale(img, stage, rng)
    if isinstance(stage, ColorJitter):
        return color_jitter(img, stage, rng)
    if isinstance(stage, Solarization):
        return solarize(img, stage, rng)
    if isinstance(stage, GaussianBlur):
        return gaussian_blur(img, stage, rng)
    if isinstance(stage, GaussianNoise):
        return gaussian_noise(img, stage, rng)
    if isinstance(stage, ToFloatNormalize):
        return to_float_normalize(img, stage)
    raise InvalidParam(f"unknown stage {stage!r}")


def apply_pipeline(img: np.ndarray, pipeline: Pipeline, stream: RngStream) -> np.ndarray:
    """Apply stages in order; stage i draws only from sub-stream lane i."""
    if len(pipeline) == 0:
        raise InvalidParam("pipeline must contain at least one stage")
    out = img
    for lane, stage in enumerate(pipeline):
        out = apply_stage(out, stage, stream.substream(lane))
    return out


# The default two-view recipe: crop plus flip, jitter at 80%, grayscale at
# 20%, blur always, solarization at 20%.
def default_ssl_pipeline(out_size: int) -> list[Stage]:
    return [
        RandomResizedCrop(out_size=out_size, scale=(0.08, 1.0)),
        HorizontalFlip(p=0.5),
        ColorJitter(p=0.8, brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1),
        Grayscale(p=0.2),
        GaussianBlur(p=1.0, sigma=(0.1, 2.0)),
        Solarization(p=0.2, threshold=128),
    ]


# ----------------------------------------------------------------------------
# plain-text serialization: one stage per line, "name key=value ..."
# ----------------------------------------------------------------------------

_STAGE_NAMES: dict[str, type] = {
    "random_resized_crop": RandomResizedCrop,
    "horizontal_flip": HorizontalFlip,
    "grayscale": Grayscale,
    "color_jitter": ColorJitter,
    "solarize": Solarization,
    "gaussian_blur": GaussianBlur,
    "gaussian_noise": GaussianNoise,
    "to_float_normalize": ToFloatNormalize,
}
_STAGE_TYPES = {cls: name for name, cls in _STAGE_NAMES.items()}


def _parse_value(text: str, target_type):
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    # tuple-valued fields: comma-separated floats
    return tuple(float(part) for part in text.split(","))


def parse_stage(line: str) -> Stage:
    parts = line.split()
    name, args = parts[0], parts[1:]
    if name not in _STAGE_NAMES:
        raise InvalidParam(f"unknown stage name {name!r}")
    cls = _STAGE_NAMES[name]
    field_types = {f.name: f.type for f in fields(cls)}
    # dataclass field annotations are strings under future-annotations
    type_map = {"int": int, "float": float}
    kwargs = {}
    for arg in args:
        if "=" not in arg:
            raise InvalidParam(f"stage argument {arg!r} is not key=value")
        key, value = arg.split("=", 1)
        if key not in field_types:
            raise InvalidParam(f"stage {name!r} has no parameter {key!r}")
        kwargs[key] = _parse_value(value, type_map.get(field_types[key], tuple))
    return cls(**kwargs)


def parse_pipeline(text: str) -> list[Stage]:
    stages = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        stages.append(parse_stage(line))
    return stages


def format_stage(stage: Stage) -> str:
    name = _STAGE_TYPES[type(stage)]
    parts = [name]
    for f in fields(stage):
        value = getattr(stage, f.name)
        if isinstance(value, tuple):
            rendered = ",".join(repr(v) for v in value)
        else:
            rendered = repr(value)
        parts.append(f"{f.name}={rendered}")
    return " ".join(parts)


def format_pipeline(pipeline: Pipeline) -> str:
    return "\n".join(format_stage(s) for s in pipeline)
