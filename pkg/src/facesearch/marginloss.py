"""Scale-aware combined-margin softmax loss.

For a sample with embedding x, label y and class weight rows w_k, let
theta_k be the angle between the normalized x and w_k.  The target logit is

    s_p * (cos(m1 * theta_y + m2) - m3)

while every non-target logit is s_n * cos(theta_k).  The per-sample loss is
the negative log-softmax of the target logit and the batch loss is the mean.
m1 is a multiplicative angular margin, m2 an additive angular margin, m3 an
additive cosine margin; s_p and s_n scale positive and negative logits
independently.

Both the value and the exact analytic gradients (through normalization,
arccos, the margin transform and the softmax) are implemented here in f64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# cosine is clamped before arccos because d(arccos)/dx diverges at +-1
_COS_CLAMP = 1.0 - 1e-12
# backward clamps theta_y away from the interval ends before differentiating
_THETA_EPS = 1e-6


class DegenerateEmbeddingError(ValueError):
    """An embedding or weight row has zero norm; cosines are undefined."""


@dataclass(frozen=True)
class LossParams:
    m1: float
    m2: float
    m3: float
    s_p: float
    s_n: float

    def __post_init__(self) -> None:
        vals = (self.m1, self.m2, self.m3, self.s_p, self.s_n)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss parameters must be finite")
        if self.m1 < 0.0 or self.m2 < 0.0 or self.m3 < 0.0:
            raise ValueError("margins must be nonnegative")
        if self.s_p <= 0.0 or self.s_n <= 0.0:
            raise ValueError("scales must be positive")


def margin_fn(p: LossParams, theta: float | np.ndarray) -> float | np.ndarray:
    """Combined margin transform cos(m1*theta + m2) - m3 for theta in [0, pi]."""
    t = np.asarray(theta, dtype=float)
    if np.any(t < -1e-12) or np.any(t > np.pi + 1e-12):
        raise ValueError("theta must lie in [0, pi]")
    out = np.cos(p.m1 * t + p.m2) - p.m3
    return float(out) if np.isscalar(theta) else out


def margin_condition_holds(p: LossParams, theta_max: float | None = None) -> bool:
    """Whether the transform stays below cos(theta) on a dense angle grid.

    The comparison is restricted to the range where the transformed angle
    m1*theta + m2 stays within [0, pi]; past that point the cosine wraps
    around and the inequality cannot hold for any aggressive margin.
    """
    limit = (np.pi - p.m2) / p.m1 if p.m1 > 0 else np.pi
    limit = min(np.pi, limit if theta_max is None else min(limit, theta_max))
    if limit <= 0:
        return True
    grid = np.linspace(0.0, limit, 2001)
    return bool(np.all(margin_fn(p, grid) <= np.cos(grid) + 1e-12))


def _normalize(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError(f"zero-norm {what} row")
    return m / norms[:, None], norms


def _logits(
    x: np.ndarray, y: np.ndarray, weights: np.ndarray, p: LossParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Shared forward plumbing; returns (logits, C, theta_y, xh, wh, norms)."""
    if x.ndim != 2 or weights.ndim != 2:
        raise ValueError("x and weights must be 2-d")
    b, k = x.shape[0], weights.shape[0]
    if b < 1:
        raise ValueError("batch must contain at least one sample")
    if k < 2:
        raise ValueError("need at least 2 classes")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError("labels out of range")
    xh, xn = _normalize(x, "embedding")
    wh, wn = _normalize(weights, "weight")
    cos = xh @ wh.T  # (b, K)
    rows = np.arange(b)
    cy = np.clip(cos[rows, y], -_COS_CLAMP, _COS_CLAMP)
    theta = np.arccos(cy)
    logits = p.s_n * cos
    logits[rows, y] = p.s_p * (np.cos(p.m1 * theta + p.m2) - p.m3)
    return logits, cos, theta, xh, wh, (xn, wn)


def loss_forward(
    x: np.ndarray, y: np.ndarray, weights: np.ndarray, p: LossParams
) -> tuple[float, np.ndarray]:
    """Mean margin-softmax loss over the batch, plus the raw logits."""
    y = np.asarray(y, dtype=np.int64)
    logits, _, _, _, _, _ = _logits(x, y, weights, p)
    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    per_sample = lse - logits[np.arange(len(y)), y]
    return float(per_sample.mean()), logits


def loss_backward(
    x: np.ndarray, y: np.ndarray, weights: np.ndarray, p: LossParams
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the mean loss w.r.t. embeddings and class weights."""
    y = np.asarray(y, dtype=np.int64)
    logits, cos, theta, xh, wh, (xn, wn) = _logits(x, y, weights, p)
    b, k = cos.shape
    rows = np.arange(b)

    clamped = (theta < _THETA_EPS) | (theta > np.pi - _THETA_EPS)
    if np.any(clamped):
        logger.warning(
            "clamped %d target angle(s) away from the [0, pi] endpoints", clamped.sum()
        )
        theta = np.clip(theta, _THETA_EPS, np.pi - _THETA_EPS)

    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    probs = e / e.sum(axis=1, keepdims=True)
    g = probs.copy()
    g[rows, y] -= 1.0
    g /= b  # gradient of the mean loss w.r.t. the logits

    # d(logit)/d(cos): s_n off-target; margin chain on the target
    slope = np.full_like(cos, p.s_n)
    sin_theta = np.sin(theta)
    slope[rows, y] = p.s_p * p.m1 * np.sin(p.m1 * theta + p.m2) / sin_theta

    h = g * slope  # (b, K): gradient w.r.t. the cosine matrix
    hc = (h * cos).sum(axis=1)
    grad_x = (h @ wh - hc[:, None] * xh) / xn[:, None]
    grad_w = (h.T @ xh - (h * cos).sum(axis=0)[:, None] * wh) / wn[:, None]
    return grad_x, grad_w
