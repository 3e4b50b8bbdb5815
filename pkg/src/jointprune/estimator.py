"""Gaussian-smoothing gradient estimates over pruning vectors.

The error of a pruned network is piecewise constant in the pruning vector, so
it is smoothed with an isotropic Gaussian and differentiated through the
log-likelihood trick::

    grad ~= 1 / (M * sigma^2) * sum_i (E(mu + n_i) - b) * n_i

with ``b`` the mean sampled error (``baseline=True``) or 0.  ``sigma`` may be
a scalar or a per-entry vector (``sigma_units="absolute"`` configs scale it by
each entry's maximum).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .rng import Stream
from .space import ArchitectureSpace, clamp

Sigma = Union[float, np.ndarray]


@dataclass(frozen=True)
class GaussianPolicy:
    mu: np.ndarray
    sigma: Sigma

    def __post_init__(self):
        object.__setattr__(self, "mu", np.array(self.mu, dtype=float))
        if not np.all(np.asarray(self.sigma) > 0):
            raise ValueError("sigma must be positive")


@dataclass
class EvaluatedSample:
    error: float
    loss: float = 0.0
    cost: float = 0.0
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class Schedule:
    """Linear interpolation from ``initial`` to ``final`` over ``total_steps``."""

    initial: float
    final: float
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def schedule_value(s: Schedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    return s.initial + (s.final - s.initial) * step / s.total_steps


def sample_noises(dim: int, sigma: Sigma, count: int, seed: Union[int, Stream]) -> np.ndarray:
    """``count`` i.i.d. noise vectors with coordinates ~ N(0, sigma^2), shape ``(count, dim)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not np.all(np.asarray(sigma) > 0):
        raise ValueError("sigma must be positive")
    stream = seed if isinstance(seed, Stream) else Stream(seed)
    return stream.normal((count, dim)) * np.asarray(sigma, dtype=float)


def estimate_gradient(samples: Sequence[EvaluatedSample], sigma: Sigma, baseline: bool = True) -> np.ndarray:
    if not samples:
        raise ValueError("need at least one sample")
    noises = [np.asarray(s.noise, dtype=float) for s in samples]
    if len({n.shape for n in noises}) != 1:
        raise ValueError("noise vectors differ in length")
    noise = np.stack(noises)
    errors = np.array([s.error for s in samples], dtype=float)
    if baseline:
        # shifted mean: equal errors give exactly zero deviations
        errors = errors - (errors[0] + (errors - errors[0]).mean())
    weighted = errors[:, None] * noise
    # exactly rounded sums so mirrored noise pairs cancel
    total = np.array([math.fsum(col) for col in weighted.T])
    return total / (len(samples) * np.asarray(sigma, dtype=float) ** 2)


def update_mu(policy: GaussianPolicy, gradient: np.ndarray, alpha: float,
              space: Optional[ArchitectureSpace] = None) -> GaussianPolicy:
    """One descent step on the mean.  ``space=None`` skips clamping."""
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != policy.mu.shape:
        raise ValueError(f"gradient shape {gradient.shape} != mu shape {policy.mu.shape}")
    if not np.all(np.isfinite(gradient)):
        raise FloatingPointError("non-finite gradient")
    mu = policy.mu - alpha * gradient
    if space is not None:
        mu = clamp(mu, space)
    return GaussianPolicy(mu, policy.sigma)


def lipschitz_lower_bound(samples: Sequence[EvaluatedSample], error_at_mu: float) -> float:
    """max_i |E(mu + n_i) - E(mu)| / ||n_i||, skipping zero-norm noise."""
    if not samples:
        return 0.0
    norms = np.linalg.norm(np.stack([np.asarray(s.noise, dtype=float) for s in samples]), axis=1)
    diffs = np.abs(np.array([s.error for s in samples], dtype=float) - error_at_mu)
    keep = norms > 0
    return float((diffs[keep] / norms[keep]).max()) if keep.any() else 0.0


class LipschitzTracker:
    """Running maximum of the difference quotient over a whole run."""

    def __init__(self, value: float = 0.0):
        self.value = value

    def update(self, samples: Sequence[EvaluatedSample], error_at_mu: float) -> float:
        bound = lipschitz_lower_bound(samples, error_at_mu)
        if not np.isfinite(bound):
            raise FloatingPointError("non-finite Lipschitz bound")
        self.value = max(self.value, bound)
        return bound
