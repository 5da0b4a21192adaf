"""Laplace mechanisms for everything a device releases: activity centroids,
category visit counts, and model weights.

Noise scale is always sensitivity / epsilon. Disabling the budget turns
every perturbation into the identity (the no-privacy ablation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .exceptions import ContractError

DEFAULT_CENTROID_FLOOR_DEG = 0.01


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float = 0.1
    enabled: bool = True
    centroid_floor: float = DEFAULT_CENTROID_FLOOR_DEG

    def __post_init__(self):
        if self.enabled and self.epsilon <= 0:
            raise ContractError("epsilon must be > 0 when privacy is enabled")

    @classmethod
    def disabled(cls) -> "PrivacyBudget":
        return cls(epsilon=1.0, enabled=False)


def laplace_sample(scale: float, rng: np.random.Generator) -> float:
    """One draw from Laplace(0, scale) via inverse CDF of one uniform."""
    if scale <= 0:
        raise ContractError(f"Laplace scale must be > 0, got {scale}")
    u = rng.random() - 0.5
    return float(-scale * np.sign(u) * np.log1p(-2.0 * abs(u)))


def _laplace_array(scale: float, shape, rng: np.random.Generator) -> np.ndarray:
    """Vectorized form of laplace_sample (same inverse-CDF transform)."""
    u = rng.random(shape) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def centroid_sensitivity(centroids: np.ndarray, floor: float) -> float:
    """L1 sensitivity: |dlon| + |dlat| between the two farthest centroids."""
    c = np.asarray(centroids, dtype=float)
    if len(c) < 1:
        raise ContractError("need at least one centroid")
    if len(c) == 1:
        return floor
    span = np.abs(c[:, None, :] - c[None, :, :]).sum(axis=2)
    return max(float(span.max()), floor)


def perturb_centroids(centroids: np.ndarray, budget: PrivacyBudget,
                      rng: np.random.Generator) -> np.ndarray:
    """Independent Laplace noise on every coordinate of every centroid."""
    c = np.asarray(centroids, dtype=float)
    if not budget.enabled:
        return c.copy()
    scale = centroid_sensitivity(c, budget.centroid_floor) / budget.epsilon
    return c + _laplace_array(scale, c.shape, rng)


def perturb_counts(counts, budget: PrivacyBudget, rng: np.random.Generator) -> np.ndarray:
    """Noisy category distribution from raw visit counts.

    Counting queries have sensitivity 1, so each count gets Laplace(1/eps),
    negatives clamp to zero, and the result renormalizes; if everything
    clamps away, fall back to uniform.
    """
    c = np.asarray(counts, dtype=float)
    if np.any(c < 0) or not np.any(c > 0):
        raise ContractError("counts must be >= 0 with at least one positive")
    if budget.enabled:
        c = c + _laplace_array(1.0 / budget.epsilon, c.shape, rng)
        c = np.maximum(c, 0.0)
    total = c.sum()
    if total <= 0:
        return np.full(c.shape, 1.0 / c.size)
    return c / total


def weight_noise_scale(value_range: float, n_pos: int, epsilon: float) -> float:
    """Laplace scale for weight release: 2*eta / (N_pos * eps)."""
    if n_pos < 1:
        raise ContractError("n_pos must be >= 1")
    return 2.0 * value_range / (n_pos * epsilon)


def perturb_weights(params: nm.ParamStore, budget: PrivacyBudget, n_pos: int,
                    rng: np.random.Generator) -> nm.ParamStore:
    """Noisy copy of the full exchanged parameter set.

    eta is the spread (max - min) over every scalar entry of the store; a
    constant store (eta = 0) short-circuits to the identity.
    """
    if not budget.enabled:
        return params
    lo, hi = params.value_range()
    eta = hi - lo
    if eta == 0.0:
        return params
    scale = weight_noise_scale(eta, n_pos, budget.epsilon)
    return params.map(lambda a: a + _laplace_array(scale, a.shape, rng))
