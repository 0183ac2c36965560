"""Steered inference: observers and controllers wired into the layer loop.

A SteeringPlan lists entries (observer, target interval, layers, step
window). ``steered_forward`` runs the same layer recurrence as
``polnet.forward`` and, after each layer, reads zeta for every entry at
that layer and, inside the entry's window, applies the minimal
intervention (or a fixed offset) to the readout activation before the
next layer consumes it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg.blas import daxpy, ddot

from .numkit import ConfigurationError
from .observer import Observer
from .polnet import (
    READOUT,
    Episode,
    TransformerWeights,
    decode_action,
    embed_tokens,
    encode,
    _block,
)
from .simworld import DT, TaskSpec, is_success, reset, step
from .steer import TargetInterval, UnobservableError

MODES = ("minimal", "offset", "observe")


@dataclass(frozen=True)
class PlanEntry:
    observer: Observer
    target: TargetInterval | None = None
    layers: frozenset[int] | None = None  # defaults to the observer's own layer
    window_start: int = 0
    window_len: int | None = None  # None: until the end of the episode
    mode: str = "minimal"
    alpha: float = 0.0

    def __post_init__(self):
        layers = frozenset({self.observer.layer} if self.layers is None else self.layers)
        object.__setattr__(self, "layers", layers)
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown steering mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "minimal" and self.target is None:
            raise ConfigurationError("minimal-norm steering needs a target interval")
        if self.window_start < 0 or (self.window_len is not None and self.window_len < 0):
            raise ConfigurationError("steering window must have nonnegative start and length")
        if not layers:
            raise ConfigurationError("plan entry has an empty layer set")

    @property
    def controls(self) -> bool:
        return self.mode != "observe"

    def in_window(self, t: int) -> bool:
        if t < self.window_start:
            return False
        return self.window_len is None or t < self.window_start + self.window_len


@dataclass(frozen=True)
class SteeringPlan:
    entries: tuple[PlanEntry, ...] = ()
    observe_only: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "observe_only", frozenset(self.observe_only))
        seen = set()
        for e in self.entries:
            if not e.controls:
                continue
            for l in e.layers:
                key = (l, e.observer.feature_id)
                if key in seen:
                    raise ConfigurationError(f"two controllers for feature {key[1]} at layer {l}")
                seen.add(key)

    @property
    def controlled_layers(self) -> frozenset[int]:
        return frozenset(l for e in self.entries if e.controls for l in e.layers)

    @property
    def observed_layers(self) -> frozenset[int]:
        return self.observe_only | frozenset(l for e in self.entries for l in e.layers)

    def validate(self, weights: TransformerWeights) -> None:
        if not self.controlled_layers <= self.observed_layers:
            raise ConfigurationError("controlled layers must be observed (L_C within L_O)")
        for e in self.entries:
            bad = [l for l in e.layers if not 1 <= l <= weights.n_layers]
            if bad:
                raise ConfigurationError(f"entry {e.observer.feature_id}: layers {bad} outside [1, {weights.n_layers}]")
            if e.observer.W.shape != (weights.d,):
                raise ConfigurationError(
                    f"entry {e.observer.feature_id}: observer dim {e.observer.W.shape} does not match d={weights.d}"
                )
        bad = [l for l in self.observe_only if not 1 <= l <= weights.n_layers]
        if bad:
            raise ConfigurationError(f"observe-only layers {bad} outside [1, {weights.n_layers}]")


EMPTY_PLAN = SteeringPlan()


class EntryLog(NamedTuple):
    feature_id: str
    layer: int
    pre_zeta: float
    post_zeta: float
    u_norm: float
    active: bool


@dataclass(frozen=True)
class StepLog:
    step_index: int
    entries: tuple[EntryLog, ...]
    action: tuple[float, ...]
    forward_time: float
    steer_time: float


class _Compiled:
    """Per-layer controller constants, computed once per plan."""

    __slots__ = ("by_layer",)

    def __init__(self, plan: SteeringPlan):
        self.by_layer: dict[int, list[tuple]] = {}
        for e in plan.entries:
            W = np.ascontiguousarray(e.observer.W, dtype=np.float64)
            n2 = float(W @ W)
            if not n2 > 0.0:
                raise UnobservableError(f"observer {e.observer.feature_id} has W = 0")
            lo = hi = 0.0
            if e.target is not None:
                lo, hi = float(e.target.zeta_min), float(e.target.zeta_max)
            offset = (e.alpha / math.sqrt(n2)) * W
            start = e.window_start
            end = math.inf if e.window_len is None else start + e.window_len
            if e.mode == "observe":
                start, end = 0, -1  # never inside the window
            item = (e.observer.feature_id, W, float(e.observer.b), W / n2, lo, hi, math.sqrt(n2),
                    offset, e.mode == "offset", abs(e.alpha), start, end)
            for l in sorted(e.layers):
                self.by_layer.setdefault(l, []).append(item)


# NamedTuple's generated __new__ costs twice a plain tuple build on the hot path
_entry = tuple.__new__

_CACHE: dict[int, tuple[SteeringPlan, _Compiled]] = {}


def compile_plan(plan: SteeringPlan) -> _Compiled:
    hit = _CACHE.get(id(plan))
    if hit is not None and hit[0] is plan:
        return hit[1]
    comp = _Compiled(plan)
    _CACHE[id(plan)] = (plan, comp)
    return comp


def steered_forward(
    weights: TransformerWeights,
    tokens: np.ndarray,
    plan: SteeringPlan = EMPTY_PLAN,
    step_index: int = 0,
    record: dict[int, list] | None = None,
):
    """One forward pass with observation and control between layers.

    Returns (action, StepLog). If ``record`` maps layers to lists, the
    readout activation after each recorded layer (post-intervention) is
    appended.
    """
    t0 = time.perf_counter()
    steer_time = 0.0
    comp = compile_plan(plan)
    logs: list = []
    by_layer = comp.by_layer
    x = embed_tokens(weights, tokens)
    for idx, lw in enumerate(weights.layers, start=1):
        x = _block(lw, x, weights.n_heads)
        items = by_layer.get(idx)
        if items is not None:
            s0 = time.perf_counter()
            xr = x[READOUT]
            for fid, W, b, Wn, lo, hi, wn, offset, is_offset, alpha, start, end in items:
                z = ddot(W, xr) + b
                if not start <= step_index < end:
                    logs.append(_entry(EntryLog, (fid, idx, z, z, 0.0, False)))
                    continue
                if is_offset:
                    daxpy(offset, xr)
                    logs.append(_entry(EntryLog, (fid, idx, z, ddot(W, xr) + b, alpha, alpha != 0.0)))
                    continue
                if z > hi:
                    c = hi - z
                elif z < lo:
                    c = lo - z
                else:
                    logs.append(_entry(EntryLog, (fid, idx, z, z, 0.0, False)))
                    continue
                daxpy(Wn, xr, a=c)  # in place on the contiguous readout row
                logs.append(_entry(EntryLog, (fid, idx, z, ddot(W, xr) + b, abs(c) / wn, True)))
            steer_time += time.perf_counter() - s0
        if record is not None and idx in record:
            record[idx].append(x[READOUT].copy())
    a = decode_action(weights, x[READOUT])
    total = time.perf_counter() - t0
    return a, StepLog(step_index, tuple(logs), a.delta, total - steer_time, steer_time)


def steered_rollout(
    weights: TransformerWeights,
    env_seed: int,
    task: TaskSpec,
    plan: SteeringPlan = EMPTY_PLAN,
    dt: float = DT,
    init_gripper: float | None = None,
) -> Episode:
    """Closed-loop rollout with every forward pass steered per ``plan``.

    ``init_gripper`` overrides the start aperture (used for the
    favorable-initialization conditions of the gripper study).
    """
    if not weights.fitted:
        raise ConfigurationError("action head is not fitted")
    plan.validate(weights)
    w = reset(env_seed, task, gripper=0.0 if init_gripper is None else init_gripper)
    states, actions, logs = [w], [], []
    rec = {l: [] for l in sorted(plan.observed_layers)}
    while not w.done and not is_success(w):
        a, log = steered_forward(weights, encode(w), plan, w.step_index, rec)
        actions.append(a)
        logs.append(log)
        w = step(w, a, dt)
        states.append(w)
    acts = {l: (np.stack(v) if v else np.zeros((0, weights.d))) for l, v in rec.items()}
    return Episode(task, env_seed, states, actions, acts, is_success(w), logs, dt)


def overhead_benchmark(
    weights: TransformerWeights,
    plan: SteeringPlan,
    n_passes: int = 1000,
    tokens: np.ndarray | None = None,
) -> tuple[float, float]:
    """Median seconds per forward pass without and with steering, interleaved on the same input."""
    if n_passes < 100:
        raise ConfigurationError("overhead_benchmark needs at least 100 passes")
    from .polnet import forward
    from .simworld import canonical_tasks

    plan.validate(weights)
    if tokens is None:
        tokens = encode(reset(0, canonical_tasks()[0]))
    base, steered = [], []
    for _ in range(10):  # warm caches and the plan compilation
        forward(weights, tokens)
        steered_forward(weights, tokens, plan, 0)
    clock = time.perf_counter
    for i in range(n_passes):
        t0 = clock()
        forward(weights, tokens)
        t1 = clock()
        steered_forward(weights, tokens, plan, 0)
        t2 = clock()
        base.append(t1 - t0)
        steered.append(t2 - t1)
    return float(np.median(base)), float(np.median(steered))
