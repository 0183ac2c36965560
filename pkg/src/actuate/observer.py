"""Per-layer linear observers: feature extraction, training and evaluation.

An observer reads one scalar feature from the readout activation at one
layer, ``zeta = W @ x + b``. Continuous features are fitted by ridge
regression on normalized labels; binary features by ridge-penalized
logistic regression (IRLS), where ``zeta`` is the logit.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .numkit import ConfigurationError, Rng, ridge_solve, rng_normal
from .polnet import Episode
from .simworld import angle_diff


class ObserverError(RuntimeError):
    """Training failed (single-class data, IRLS non-convergence) or a bound check failed."""


class MissingLayerError(LookupError):
    pass


# ---------------------------------------------------------------- features


def _state_pos(i):
    return lambda ep, t: ep.states[t].robot.position[i]


def _state_ang(i):
    return lambda ep, t: angle_diff(ep.states[t].robot.orientation[i], 0.0)


def _action(i):
    return lambda ep, t: ep.actions[t].delta[i]


def _gripper_closed(ep, t):
    return 1.0 if ep.states[t].robot.gripper >= 0.5 else 0.0


def _gripper_closing(ep, t):
    return 1.0 if ep.actions[t].delta[6] > 0.0 else 0.0


def _speed(ep, t):
    a = ep.states[t].robot.position
    b = ep.states[t + 1].robot.position
    return math.sqrt(sum((q - p) ** 2 for p, q in zip(a, b))) / ep.dt


EXTRACTORS: dict[str, Callable[[Episode, int], float]] = {
    "state_x": _state_pos(0),
    "state_y": _state_pos(1),
    "state_z": _state_pos(2),
    "state_roll": _state_ang(0),
    "state_pitch": _state_ang(1),
    "state_yaw": _state_ang(2),
    "gripper": _gripper_closed,
    "action_dx": _action(0),
    "action_dy": _action(1),
    "action_dz": _action(2),
    "action_droll": _action(3),
    "action_dpitch": _action(4),
    "action_dyaw": _action(5),
    "action_gripper": _gripper_closing,
    "speed": _speed,
}
BINARY = frozenset({"gripper", "action_gripper"})


@dataclass(frozen=True)
class FeatureSpec:
    """A named feature with the affine map raw -> normalized, (v - shift) / scale."""

    feature_id: str
    kind: str
    extractor: str
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("continuous", "binary"):
            raise ConfigurationError(f"feature kind must be continuous or binary, got {self.kind!r}")
        if self.extractor not in EXTRACTORS:
            raise ConfigurationError(f"unknown extractor {self.extractor!r}")
        if not (self.scale > 0 and math.isfinite(self.scale) and math.isfinite(self.shift)):
            raise ConfigurationError(f"bad normalization for {self.feature_id}: shift={self.shift} scale={self.scale}")

    def raw(self, ep: Episode, t: int) -> float:
        return float(EXTRACTORS[self.extractor](ep, t))

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.shift) / self.scale

    def denormalize(self, v):
        return np.asarray(v, dtype=np.float64) * self.scale + self.shift

    def fitted(self, values: np.ndarray) -> "FeatureSpec":
        """Copy with normalization fitted to ``values`` (identity for binary features)."""
        if self.kind == "binary":
            return replace(self, shift=0.0, scale=1.0)
        values = np.asarray(values, dtype=np.float64)
        std = float(values.std())
        return replace(self, shift=float(values.mean()), scale=std if std > 1e-12 else 1.0)

    def to_json(self) -> dict:
        return {"feature_id": self.feature_id, "kind": self.kind, "extractor": self.extractor,
                "shift": self.shift, "scale": self.scale}

    @classmethod
    def from_json(cls, rec: dict) -> "FeatureSpec":
        return cls(rec["feature_id"], rec["kind"], rec["extractor"], float(rec["shift"]), float(rec["scale"]))


def feature(name: str) -> FeatureSpec:
    """The un-normalized spec for a built-in feature name."""
    if name not in EXTRACTORS:
        raise ConfigurationError(f"unknown feature {name!r}; known: {sorted(EXTRACTORS)}")
    return FeatureSpec(name, "binary" if name in BINARY else "continuous", name)


ALL_FEATURES = tuple(EXTRACTORS)


def raw_labels(episodes: Iterable[Episode], spec: FeatureSpec) -> np.ndarray:
    return np.array([spec.raw(ep, t) for ep in episodes for t in range(ep.n_steps)], dtype=np.float64)


def collect_pairs(episodes: Sequence[Episode], layer: int, spec: FeatureSpec) -> tuple[np.ndarray, np.ndarray]:
    """One (x_layer, normalized zeta) pair per episode step, stacked as arrays."""
    xs = []
    for i, ep in enumerate(episodes):
        if layer not in ep.activations:
            raise MissingLayerError(f"layer {layer} was not recorded in episode {i} (have {sorted(ep.activations)})")
        xs.append(ep.activations[layer][: ep.n_steps])
    if not xs:
        return np.zeros((0, 0)), np.zeros(0)
    return np.concatenate(xs), spec.normalize(raw_labels(episodes, spec))


def split_episodes(n: int, seed: int, holdout: float = 0.2) -> tuple[list[int], list[int]]:
    """Deterministic episode-level train/validation index split."""
    rng = Rng(seed)
    keys = rng.uniforms(n)
    order = sorted(range(n), key=lambda i: (keys[i], i))
    n_val = min(n - 1, max(1, int(round(holdout * n)))) if n >= 2 else 0
    return sorted(order[n_val:]), sorted(order[:n_val])


# ---------------------------------------------------------------- observers


@dataclass(frozen=True)
class Observer:
    layer: int
    feature: FeatureSpec
    W: np.ndarray
    b: float
    kind: str

    def __post_init__(self):
        if not np.linalg.norm(self.W) > 0:
            raise ObserverError(f"observer for {self.feature.feature_id} at layer {self.layer} has W = 0")

    @property
    def feature_id(self) -> str:
        return self.feature.feature_id

    @property
    def w_norm(self) -> float:
        return float(np.linalg.norm(self.W))

    def zeta(self, x):
        """The linear read-out W^T x + b (a logit for binary features)."""
        return np.asarray(x, dtype=np.float64) @ self.W + self.b

    def predict(self, x):
        """Physical-unit prediction, or the 0/1 class for binary features."""
        z = self.zeta(x)
        if self.kind == "binary":
            return (z >= 0.0).astype(np.float64) if np.ndim(z) else float(z >= 0.0)
        return self.feature.denormalize(z)

    def proba(self, x):
        return 1.0 / (1.0 + np.exp(-self.zeta(x)))

    def to_json(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "kind": self.kind,
            "layer": self.layer,
            "b": self.b,
            "norm_params": self.feature.to_json(),
            "W": [float(v) for v in self.W],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Observer":
        spec = FeatureSpec.from_json(rec["norm_params"])
        if spec.feature_id != rec["feature_id"] or spec.kind != rec["kind"]:
            raise ConfigurationError("observer JSON: feature_id/kind disagree with norm_params")
        return cls(int(rec["layer"]), spec, np.array(rec["W"], dtype=np.float64), float(rec["b"]), rec["kind"])


def save_observer(obs: Observer, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obs.to_json(), indent=1) + "\n")


def load_observer(path: str | Path) -> Observer:
    return Observer.from_json(json.loads(Path(path).read_text()))


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (x - mu) / sd, mu, sd


def _irls(xs: np.ndarray, y: np.ndarray, lam: float, max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Ridge-penalized logistic regression by Newton/IRLS; returns [w..., b].

    Objective: sum of log-losses + lam/2 * ||w||^2 (the intercept is free).
    """
    n, d = xs.shape
    xa = np.hstack([xs, np.ones((n, 1))])
    pen = np.full(d + 1, lam)
    pen[-1] = 0.0
    theta = np.zeros(d + 1)
    p0 = min(max(y.mean(), 1e-6), 1 - 1e-6)
    theta[-1] = math.log(p0 / (1 - p0))

    def loss(th):
        z = xa @ th
        return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(pen * th * th))

    cur = loss(theta)
    gnorm = float("inf")
    for _ in range(max_iter):
        z = xa @ theta
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = xa.T @ (p - y) + pen * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return theta
        wts = p * (1.0 - p)
        hess = (xa * wts[:, None]).T @ xa + np.diag(pen) + 1e-12 * np.eye(d + 1)
        stepv = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * stepv
            new = loss(cand)
            if new <= cur + 1e-12 * abs(cur):
                break
            t *= 0.5
        theta, cur = cand, new
    z = xa @ theta
    grad = xa.T @ (0.5 * (1.0 + np.tanh(0.5 * z)) - y) + pen * theta
    gnorm = float(np.linalg.norm(grad))
    if gnorm < tol:
        return theta
    raise ObserverError(f"IRLS did not converge in {max_iter} iterations; final gradient norm {gnorm:.3e}")


def train_observer(
    pairs: tuple[np.ndarray, np.ndarray],
    kind: str,
    lam: float = 1e-2,
    layer: int = 0,
    spec: FeatureSpec | None = None,
) -> Observer:
    """Fit an observer on (activations, normalized labels).

    Activations are standardized per dimension for the fit, and the
    solution is folded back so the observer acts on raw activations.
    """
    x, z = (np.asarray(a, dtype=np.float64) for a in pairs)
    if x.ndim != 2 or len(x) != len(z):
        raise ConfigurationError(f"pairs mismatch: X {x.shape}, labels {z.shape}")
    if len(x) < 2:
        raise ConfigurationError("need at least 2 pairs to train an observer")
    if spec is None:
        spec = FeatureSpec("feature", kind, "gripper" if kind == "binary" else "state_x")
    xs, mu, sd = _standardize(x)
    if kind == "continuous":
        zm = float(z.mean())
        w = ridge_solve(xs, z - zm, lam)
        bias = zm
    elif kind == "binary":
        if not np.all((z == 0.0) | (z == 1.0)):
            raise ConfigurationError("binary labels must be 0 or 1")
        if z.min() == z.max():
            raise ObserverError(f"binary labels for {spec.feature_id} contain a single class ({int(z[0])})")
        theta = _irls(xs, z, lam)
        w, bias = theta[:-1], float(theta[-1])
    else:
        raise ConfigurationError(f"unknown observer kind {kind!r}")
    W = w / sd
    b = float(bias - mu @ W)
    return Observer(layer, spec, W, b, kind)


def evaluate_observer(obs: Observer, pairs: tuple[np.ndarray, np.ndarray]) -> dict[str, float]:
    """Held-out metrics against the trivial baselines.

    Continuous: mean absolute error in physical units (plus the maximum),
    against always predicting the training mean. Binary: accuracy against
    always predicting the majority class of the evaluated labels.
    """
    x, z = (np.asarray(a, dtype=np.float64) for a in pairs)
    if len(z) == 0:
        raise ConfigurationError("cannot evaluate on an empty pair set")
    if obs.kind == "continuous":
        truth = obs.feature.denormalize(z)
        err = np.abs(obs.predict(x) - truth)
        base = np.abs(truth - obs.feature.shift)
        return {
            "mae": float(err.mean()),
            "baseline_mae": float(base.mean()),
            "max_abs_error": float(err.max()),
            "baseline_max_abs_error": float(base.max()),
        }
    acc = float(np.mean(obs.predict(x) == z))
    pos = float(z.mean())
    return {"accuracy": acc, "baseline_accuracy": max(pos, 1.0 - pos)}


def robustness_check(obs: Observer, activations: np.ndarray, epsilon: float, trials: int, seed: int = 0) -> float:
    """Largest |f(x + eps*d) - f(x)| over random unit directions d.

    Raises ObserverError if it exceeds eps * ||W|| (it cannot, for a
    linear map, beyond rounding).
    """
    if epsilon < 0 or trials < 1:
        raise ConfigurationError("robustness_check needs epsilon >= 0 and trials >= 1")
    x = np.atleast_2d(np.asarray(activations, dtype=np.float64))
    d = x.shape[1]
    rng = Rng(seed)
    dirs = rng_normal(rng, trials * d).reshape(trials, d)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    base = x[np.arange(trials) % len(x)]
    delta = float(np.max(np.abs(obs.zeta(base + epsilon * dirs) - obs.zeta(base))))
    bound = epsilon * obs.w_norm
    if delta > bound + 1e-12:
        raise ObserverError(f"Lipschitz bound violated: delta={delta!r} > eps*||W||={bound!r}")
    return delta


def best_layer(metrics: dict[int, float], kind: str) -> int:
    """Layer with the lowest MAE (continuous) or highest accuracy (binary); ties go to the smaller index."""
    if not metrics:
        raise ConfigurationError("best_layer needs at least one evaluated layer")
    sign = 1.0 if kind == "continuous" else -1.0
    return min(sorted(metrics), key=lambda l: (sign * metrics[l], l))


# ---------------------------------------------------------------- reports


@dataclass
class ProbeReport:
    feature_id: str
    kind: str
    metrics: dict[int, dict[str, float]]
    best_layer: int
    robustness: list[tuple[float, float]]

    def rows(self) -> list[tuple[int, str, str, float, float]]:
        """(layer, feature_id, metric, value, baseline) rows."""
        out = []
        for layer in sorted(self.metrics):
            m = self.metrics[layer]
            if self.kind == "continuous":
                out.append((layer, self.feature_id, "mae", m["mae"], m["baseline_mae"]))
                out.append((layer, self.feature_id, "max_abs_error", m["max_abs_error"], m["baseline_max_abs_error"]))
            else:
                out.append((layer, self.feature_id, "accuracy", m["accuracy"], m["baseline_accuracy"]))
        return out

    @property
    def headline(self) -> str:
        return "mae" if self.kind == "continuous" else "accuracy"


def write_probe_csv(reports: Iterable[ProbeReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer", "feature_id", "metric", "value", "baseline"])
        for rep in reports:
            for layer, fid, metric, value, base in rep.rows():
                wr.writerow([layer, fid, metric, repr(value), repr(base)])
