"""Minimal-norm additive interventions on an observed feature.

Given an observer zeta = W^T x + b and a target interval [lo, hi], the
smallest u with W^T (x + u) + b in [lo, hi] moves x straight along W by
the distance to the nearer face of the slab, or not at all when zeta is
already inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import ConfigurationError
from .observer import Observer


class UnobservableError(ValueError):
    """Raised when the observer direction W is zero."""


@dataclass(frozen=True)
class TargetInterval:
    """Closed interval on the observer's zeta scale (normalized units, or logits for binary features)."""

    zeta_min: float
    zeta_max: float

    def __post_init__(self):
        lo, hi = float(self.zeta_min), float(self.zeta_max)
        if math.isnan(lo) or math.isnan(hi):
            raise ConfigurationError("target bounds must not be NaN")
        if lo > hi:
            raise ConfigurationError(f"zeta_min {lo} exceeds zeta_max {hi}")
        if math.isinf(lo) and math.isinf(hi):
            raise ConfigurationError("at most one target bound may be infinite")
        if lo == math.inf or hi == -math.inf:
            raise ConfigurationError("target interval is empty")

    def contains(self, z: float, tol: float = 0.0) -> bool:
        return self.zeta_min - tol <= z <= self.zeta_max + tol


def physical_target(obs: Observer, low: float = -math.inf, high: float = math.inf) -> TargetInterval:
    """Convert bounds in physical feature units to the observer's zeta scale.

    Binary observers take bounds as probabilities of the positive class
    and are steered in logit space.
    """
    if obs.kind == "binary":

        def to_logit(p):
            if p <= 0.0:
                return -math.inf
            if p >= 1.0:
                return math.inf
            return math.log(p / (1.0 - p))

        return TargetInterval(to_logit(low), to_logit(high))
    f = obs.feature
    lo = -math.inf if low == -math.inf else (low - f.shift) / f.scale
    hi = math.inf if high == math.inf else (high - f.shift) / f.scale
    return TargetInterval(lo, hi)


@dataclass(frozen=True)
class Intervention:
    layer: int
    u: np.ndarray
    pre_zeta: float
    post_zeta: float
    active: bool


def _check_w(obs: Observer) -> float:
    n2 = float(obs.W @ obs.W)
    if not n2 > 0.0:
        raise UnobservableError(f"observer {obs.feature_id} at layer {obs.layer} has W = 0")
    return n2


def minimal_intervention(obs: Observer, x, target: TargetInterval) -> Intervention:
    x = np.asarray(x, dtype=np.float64)
    n2 = _check_w(obs)
    z = float(obs.W @ x + obs.b)
    if z > target.zeta_max:
        c = (target.zeta_max - z) / n2
    elif z < target.zeta_min:
        c = (target.zeta_min - z) / n2
    else:
        return Intervention(obs.layer, np.zeros_like(x), z, z, False)
    u = c * obs.W
    post = float(obs.W @ (x + u) + obs.b)
    return Intervention(obs.layer, u, z, post, True)


def projection_oracle(
    obs: Observer,
    x,
    target: TargetInterval,
    iters: int = 10_000,
    u0: np.ndarray | None = None,
    step: float = 0.5,
) -> np.ndarray:
    """Numerical argmin ||u|| s.t. zeta(x + u) in target, by projected gradient descent.

    Each iteration takes a gradient step of size ``step`` on ||u||^2 / 2
    (whose gradient is 1-Lipschitz, so any step in (0, 2) converges) and
    projects back onto the feasible slab by clipping zeta to the interval.
    Starts from a deliberately non-optimal point so convergence is
    actually exercised; stops early once the iterates stop moving. Test
    use only.
    """
    x = np.asarray(x, dtype=np.float64)
    n2 = _check_w(obs)
    if not 0.0 < step < 2.0:
        raise ConfigurationError(f"step must lie in (0, 2), got {step}")
    u = np.ones_like(x) if u0 is None else np.array(u0, dtype=np.float64)
    lo, hi = target.zeta_min, target.zeta_max

    def project(v):
        z = float(obs.W @ (x + v) + obs.b)
        zc = min(max(z, lo), hi)
        return v + ((zc - z) / n2) * obs.W

    u = project(u)
    for _ in range(iters):
        nxt = project(u - step * u)
        if np.max(np.abs(nxt - u)) <= 1e-15 * (1.0 + float(np.max(np.abs(u)))):
            return nxt
        u = nxt
    return u


def fixed_offset(obs: Observer, x, alpha: float) -> np.ndarray:
    """alpha times the unit observer direction; shifts zeta by alpha * ||W||."""
    _check_w(obs)
    return (alpha / obs.w_norm) * obs.W


def slab_distance(obs: Observer, x, target: TargetInterval) -> float:
    """Exact distance from x to the slab {x : zeta(x) in target}."""
    z = float(obs.W @ np.asarray(x, dtype=np.float64) + obs.b)
    n = obs.w_norm
    return max(0.0, (z - target.zeta_max) / n, (target.zeta_min - z) / n)
