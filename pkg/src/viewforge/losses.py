"""Exact joint-embedding SSL losses with analytic gradients.

Three objectives over an N x K embedding batch Z (rows are projected views):

* variance/covariance/invariance triplet: hinge on per-dimension std,
  squared off-diagonal covariance, and relation-weighted pair distances;
* softmax contrastive: an estimated relation matrix from temperature-scaled
  pairwise cosine similarities, scored by cross entropy against G;
* cross-correlation redundancy reduction over a left/right view split.

All math is float64. Gradients are exact derivatives of the stated values,
not autodiff products; tests check them against central finite differences
and every value against an independent scalar-loop oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .augment import GaussianNoise, gaussian_noise, resize_bilinear
from .errors import DegenerateEmbedding, InsufficientBatch, InvalidParam
from .relations import RelationMatrix, as_dense_relation
from .rng import RngStream


class Reduction(Enum):
    SUM = "sum"
    MEAN_OVER_POSITIVES = "mean"


@dataclass(frozen=True)
class VicRegCoeffs:
    alpha: float = 25.0  # variance hinge weight
    beta: float = 1.0  # covariance weight
    gamma: float = 25.0  # invariance weight
    epsilon: float = 1e-4  # inside the sqrt; the hinge is not differentiable at 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise InvalidParam("vicreg coefficients must be >= 0")
        if self.epsilon <= 0:
            raise InvalidParam(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class SimClrParams:
    tau: float = 0.15
    reduction: Reduction = Reduction.SUM

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidParam(f"temperature must be > 0, got {self.tau}")


@dataclass(frozen=True)
class BarlowParams:
    alpha: float = 0.0025  # off-diagonal weight

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidParam(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    terms: dict[str, float] = field(default_factory=dict)
    grad_right: np.ndarray | None = None  # second input's gradient (left/right losses)
    g_hat: np.ndarray | None = None  # estimated relation matrix, when the loss builds one


def _check_embeddings(z: np.ndarray, name: str = "Z") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidParam(f"{name} must be N x K, got shape {z.shape}")
    if z.shape[0] < 2:
        raise InsufficientBatch(f"{name} needs N >= 2 rows, got {z.shape[0]}")
    if not np.all(np.isfinite(z)):
        raise InvalidParam(f"{name} contains non-finite entries")
    return z


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateEmbedding("cosine similarity of a zero vector is undefined")
    return float(u @ v / (nu * nv))


# -----------------------------------------------------------------------------
# variance / covariance / invariance triplet
# -----------------------------------------------------------------------------

def vicreg_loss(
    z: np.ndarray, g: RelationMatrix | np.ndarray, coeffs: VicRegCoeffs = VicRegCoeffs()
) -> LossOutput:
    """Triplet of variance hinge, covariance penalty, relation-weighted pull.

    value = alpha * sum_k relu(1 - sqrt(Cov_kk + eps))
          + beta * sum_{j != k} Cov_kj^2
          + (gamma / N) * sum_{i,j} G_ij * ||Z_i - Z_j||^2

    with the covariance estimated with 1/(N-1) normalization. The reported
    terms are named var / cov / inv and sum exactly to the value.
    """
    z = _check_embeddings(z)
    dense_g = as_dense_relation(g)
    n, k = z.shape
    if dense_g.shape[0] != n:
        raise InvalidParam(f"relation size {dense_g.shape[0]} does not match N={n}")

    mu = z.mean(axis=0)
    zc = z - mu
    cov = zc.T @ zc / (n - 1)

    std = np.sqrt(np.diag(cov) + coeffs.epsilon)
    hinge_active = std < 1.0
    l_var = coeffs.alpha * float(np.sum(np.where(hinge_active, 1.0 - std, 0.0)))

    off = cov.copy()
    np.fill_diagonal(off, 0.0)
    l_cov = coeffs.beta * float(np.sum(off**2))

    sq_norms = np.sum(z * z, axis=1)
    sq_dists = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (z @ z.T)
    l_inv = coeffs.gamma / n * float(np.sum(dense_g * sq_dists))

    value = l_var + l_cov + l_inv

    # variance hinge: d/dZ [-alpha * sqrt(Cov_kk + eps)] on active dims; the
    # centering projector vanishes because centered columns sum to zero
    grad = np.zeros_like(z)
    active_scale = np.where(hinge_active, -coeffs.alpha / ((n - 1) * std), 0.0)
    grad += zc * active_scale[None, :]

    # covariance: dCov_kj/dZ_il = (delta_lk * Zc_ij + delta_lj * Zc_ik)/(N-1)
    grad += 4.0 * coeffs.beta / (n - 1) * (zc @ off)

    # invariance: graph-Laplacian form, using G's symmetry
    degrees = dense_g.sum(axis=1)
    grad += 4.0 * coeffs.gamma / n * (degrees[:, None] * z - dense_g @ z)

    return LossOutput(
        value=value,
        grad=grad,
        terms={"var": l_var, "cov": l_cov, "inv": l_inv},
    )


# ----------------------------------------------------------------------------
# softmax contrastive over cosine similarities
# ----------------------------------------------------------------------------

def simclr_loss(
    z: np.ndarray, g: RelationMatrix | np.ndarray, params: SimClrParams = SimClrParams()
) -> LossOutput:
    """Cross entropy between G and the estimated relation matrix.

    G_hat[i, j] = exp(cos(z_i, z_j)/tau) / sum_{j' != i} exp(cos(z_i, z_j')/tau)
    with a zero diagonal; value = -sum_ij G_ij log G_hat[i, j], optionally
    divided by sum(G). Row-wise max subtraction keeps the log-sum-exp stable.
    """
    z = _check_embeddings(z)
    dense_g = as_dense_relation(g)
    n, k = z.shape
    if dense_g.shape[0] != n:
        raise InvalidParam(f"relation size {dense_g.shape[0]} does not match N={n}")

    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbedding("zero-norm embedding row")
    unit = z / norms[:, None]
    cos = unit @ unit.T
    s = cos / params.tau

    offdiag = ~np.eye(n, dtype=bool)
    s_masked = np.where(offdiag, s, -np.inf)
    row_max = s_masked.max(axis=1, keepdims=True)
    exp_shifted = np.where(offdiag, np.exp(s_masked - row_max), 0.0)
    denom = exp_shifted.sum(axis=1, keepdims=True)
    g_hat = exp_shifted / denom
    log_g_hat = np.where(offdiag, (s - row_max) - np.log(denom), 0.0)

    total_pos = float(dense_g.sum())
    raw = -float(np.sum(dense_g * log_g_hat))
    if params.reduction == Reduction.MEAN_OVER_POSITIVES:
        if total_pos == 0:
            raise InvalidParam("mean reduction needs at least one positive entry")
        value = raw / total_pos
        scale = 1.0 / total_pos
    else:
        value = raw
        scale = 1.0

    # sensitivity of the value to each score s_ij (i != j):
    #   A_ij = row_sum_i(G) * G_hat_ij - G_ij
    row_sums = dense_g.sum(axis=1, keepdims=True)
    a = scale * (row_sums * g_hat - dense_g)
    m = a + a.T  # cos_ij == cos_ji feeds both orderings

    # d cos_ij / d z_i = (unit_j - cos_ij * unit_i) / ||z_i||
    coef = (m * cos).sum(axis=1)
    grad = (m @ unit - coef[:, None] * unit) / (params.tau * norms[:, None])

    return LossOutput(
        value=value,
        grad=grad,
        terms={"nll": value, "positives": total_pos},
        g_hat=g_hat,
    )


# ----------------------------------------------------------------------------
# cross-correlation redundancy reduction
# ----------------------------------------------------------------------------

def barlow_loss(
    z_left: np.ndarray, z_right: np.ndarray, params: BarlowParams = BarlowParams()
) -> LossOutput:
    """Push the left/right correlation matrix toward the identity.

    Columns of both inputs are mean-centered; C[k, k'] is the cosine
    similarity of centered column k of the left view with column k' of the
    right view (a genuine cross-correlation). value = sum_k (C_kk - 1)^2 +
    alpha * sum_{k != k'} C_kk'^2. Gradients are returned for both inputs.
    """
    zl = _check_embeddings(z_left, "Z_left")
    zr = _check_embeddings(z_right, "Z_right")
    if zl.shape != zr.shape:
        raise InvalidParam(f"left/right shapes differ: {zl.shape} vs {zr.shape}")

    lc = zl - zl.mean(axis=0)
    rc = zr - zr.mean(axis=0)
    ln = np.linalg.norm(lc, axis=0)
    rn = np.linalg.norm(rc, axis=0)
    if np.any(ln == 0) or np.any(rn == 0):
        raise DegenerateEmbedding("zero-variance column after centering")

    lu = lc / ln[None, :]
    ru = rc / rn[None, :]
    c = lu.T @ ru

    diag = np.diag(c)
    k = c.shape[0]
    off_mask = ~np.eye(k, dtype=bool)
    l_diag = float(np.sum((diag - 1.0) ** 2))
    l_off = params.alpha * float(np.sum(c[off_mask] ** 2))
    value = l_diag + l_off

    w = np.where(off_mask, 2.0 * params.alpha * c, 2.0 * (diag - 1.0)[None, :] * np.eye(k))
    # dC_kk'/dLc_:,k = (ru_:,k' - C_kk' * lu_:,k) / ||lc_k||; centered unit
    # columns keep the gradient column-mean-free, so no extra projection
    grad_left = (ru @ w.T - lu * (w * c).sum(axis=1)[None, :]) / ln[None, :]
    grad_right = (lu @ w - ru * (w * c).sum(axis=0)[None, :]) / rn[None, :]

    return LossOutput(
        value=value,
        grad=grad_left,
        grad_right=grad_right,
        terms={"diag": l_diag, "off_diag": l_off},
    )


# -----------------------------------------------------------------------------
# per-instance positives and the single-patch negative
# -----------------------------------------------------------------------------

def build_instance_batch(
    image: np.ndarray,
    noise_std: float,
    patch_scale_range: tuple[float, float],
    out_size: int,
    stream: RngStream,
) -> tuple[list[np.ndarray], RelationMatrix]:
    """Noise-only positive pair plus one small same-image patch as negative.

    Views are [pos_a, pos_b, patch_neg]: the full image resized to out_size
    with two independent noise draws, and a random small crop (area fraction
    in patch_scale_range) resized to out_size with its own noise. The 3 x 3
    relation links only the positives, so the patch can enter the contrastive
    loss only through the denominator.
    """
    lo, hi = patch_scale_range
    if not (0.0 < lo <= hi < 1.0):
        raise InvalidParam(f"patch_scale_range must lie inside (0, 1), got {patch_scale_range}")
    h, w = image.shape[:2]
    base = resize_bilinear(image, out_size, out_size)
    noise = GaussianNoise(std=noise_std)

    pos_a = gaussian_noise(base, noise, stream.substream(0))
    pos_b = gaussian_noise(base, noise, stream.substream(1))

    patch_rng = stream.substream(2)
    frac = patch_rng.uniform(lo, hi)
    side_h = max(1, int(round(np.sqrt(frac) * h)))
    side_w = max(1, int(round(np.sqrt(frac) * w)))
    top = int(patch_rng.integers(0, h - side_h + 1))
    left = int(patch_rng.integers(0, w - side_w + 1))
    patch = resize_bilinear(image[top : top + side_h, left : left + side_w], out_size, out_size)
    patch_neg = gaussian_noise(patch, noise, stream.substream(3))

    g = RelationMatrix.from_pairs(3, [(0, 1)])
    return [pos_a, pos_b, patch_neg], g
