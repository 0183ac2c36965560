"""Toy transformer policy with hook points on the residual stream.

The trunk is a stack of pre-RMS-norm blocks (multi-head attention over the
five input tokens, then a GELU MLP) with frozen random weights. Only the
linear action head is fitted, by ridge regression on expert transitions.
The per-layer activation ``x_l`` is the residual stream at the readout
token, the last position of the sequence.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .numkit import ConfigurationError, Rng, ridge_solve, rng_normal
from .simworld import (
    APPROACH_SOFTNESS,
    DT,
    INSTRUCTIONS,
    TRANSPORT_SOFTNESS,
    Action,
    TaskSpec,
    WorldState,
    angle_diff,
    expert_action,
    is_success,
    reset,
    step,
)

N_TOKENS = 5
READOUT = N_TOKENS - 1
ACTION_DIM = 7

# token feature layout: each token owns a disjoint slot of the feature vector
_SLOTS = {
    "instruction": (0, len(INSTRUCTIONS)),
    "state": (8, 8),
    "object": (16, 4),
    "goal": (20, 4),
    "readout": (24, 1),
}
TOKEN_FEATURES = 25
_ORDER = ("instruction", "state", "object", "goal", "readout")

MAGIC = b"ACTUATE-WTS-v1\x00\x00"
assert len(MAGIC) == 16


@dataclass(frozen=True)
class LayerWeights:
    norm1: np.ndarray  # (d,)
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    norm2: np.ndarray  # (d,)
    w1: np.ndarray  # (d, 4d)
    w2: np.ndarray  # (4d, d)


@dataclass(frozen=True)
class TransformerWeights:
    d: int
    n_layers: int
    n_heads: int
    seed: int
    embed: np.ndarray  # (TOKEN_FEATURES, d)
    layers: tuple[LayerWeights, ...]
    head: np.ndarray  # (d, 7)
    head_bias: np.ndarray  # (7,)

    @property
    def fitted(self) -> bool:
        return bool(np.any(self.head != 0.0))

    def arrays(self) -> list[np.ndarray]:
        """All parameters in the persisted payload order."""
        out = [self.embed]
        for lw in self.layers:
            out += [lw.norm1, lw.wq, lw.wk, lw.wv, lw.wo, lw.norm2, lw.w1, lw.w2]
        out += [self.head, self.head_bias]
        return out


@dataclass(frozen=True)
class HookSet:
    """Layers to observe and control, with the callbacks run between layers.

    ``on_observe(layer, x)`` sees the readout activation at every layer in
    ``observers_at``; ``on_control(layer, x)`` returns the replacement
    activation at every layer in ``controllers_at``.
    """

    observers_at: frozenset[int] = frozenset()
    controllers_at: frozenset[int] = frozenset()
    on_observe: Callable[[int, np.ndarray], None] | None = None
    on_control: Callable[[int, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "observers_at", frozenset(self.observers_at))
        object.__setattr__(self, "controllers_at", frozenset(self.controllers_at))
        if not self.controllers_at <= self.observers_at:
            missing = sorted(self.controllers_at - self.observers_at)
            raise ConfigurationError(f"controller layers {missing} are not observed (need L_C within L_O)")
        if self.controllers_at and self.on_control is None:
            raise ConfigurationError("controllers_at given without an on_control callback")

    def validate(self, n_layers: int) -> None:
        bad = [l for l in self.observers_at if not 1 <= l <= n_layers]
        if bad:
            raise ConfigurationError(f"hook layers {sorted(bad)} outside [1, {n_layers}]")


NO_HOOKS = HookSet()


@dataclass
class LayerTrace:
    activations: list[np.ndarray]  # length T, each (d,)


@dataclass
class Episode:
    task: TaskSpec
    env_seed: int
    states: list[WorldState]
    actions: list[Action]
    activations: dict[int, np.ndarray]  # layer -> (steps, d)
    success: bool
    logs: list = field(default_factory=list)
    dt: float = DT

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    def tokens(self, t: int) -> np.ndarray:
        return encode(self.states[t])


OBJECT_SCALE = APPROACH_SOFTNESS
GOAL_SCALE = TRANSPORT_SOFTNESS
GOAL_GATE = 10.0


def encode(w: WorldState) -> np.ndarray:
    """Tokenize a world state into a (5, TOKEN_FEATURES) array.

    Robot position is absolute (already in [-1, 1]); angles are wrapped to
    (-pi, pi] and scaled to (-1, 1], which keeps the seam away from the
    poses the robot visits; gripper maps [0, 1] to [-1, 1].

    Object and goal positions are relative to the end-effector, each
    followed by a length scale c. After the RMS norm inside every block a
    token [r, c] reads as r / sqrt(|r|^2 + c^2), the same saturating shape
    the expert steers with. While nothing is grasped the goal token's scale
    is replaced by a large gate value, which squashes its direction part.
    """
    tok = np.zeros((N_TOKENS, TOKEN_FEATURES))
    tok[0, _SLOTS["instruction"][0] + len(INSTRUCTIONS)] = 1.0
    tok[0, INSTRUCTIONS.index(w.task.instruction)] = 1.0
    r = w.robot
    s = _SLOTS["state"][0]
    tok[1, s : s + 3] = r.position
    tok[1, s + 3 : s + 6] = [angle_diff(a, 0.0) / math.pi for a in r.orientation]
    tok[1, s + 6] = 2.0 * r.gripper - 1.0
    tok[1, s + 7] = 1.0
    o = _SLOTS["object"][0]
    tok[2, o : o + 3] = [(a - b) for a, b in zip(w.object_position, r.position)]
    tok[2, o + 3] = OBJECT_SCALE
    g = _SLOTS["goal"][0]
    tok[3, g : g + 3] = [(a - b) for a, b in zip(w.goal_center, r.position)]
    tok[3, g + 3] = GOAL_SCALE if w.object_grasped else GOAL_GATE
    tok[4, _SLOTS["readout"][0]] = 1.0
    return tok


def init_random(seed: int, d: int = 64, n_layers: int = 8, n_heads: int = 4) -> TransformerWeights:
    if d % n_heads:
        raise ConfigurationError(f"d={d} is not divisible by h={n_heads}")
    if n_layers < 2:
        raise ConfigurationError("need at least two layers")
    rng = Rng(seed)
    att = 1.0 / math.sqrt(d)
    mlp = 1.0 / math.sqrt(4 * d)

    def draw(shape, std):
        return rng_normal(rng, int(np.prod(shape)), 0.0, std).reshape(shape)

    embed = draw((TOKEN_FEATURES, d), 1.0)
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerWeights(
                norm1=np.ones(d),
                wq=draw((d, d), att),
                wk=draw((d, d), att),
                wv=draw((d, d), att),
                wo=draw((d, d), att),
                norm2=np.ones(d),
                w1=draw((d, 4 * d), mlp),
                w2=draw((4 * d, d), mlp),
            )
        )
    return TransformerWeights(
        d=d,
        n_layers=n_layers,
        n_heads=n_heads,
        seed=seed,
        embed=embed,
        layers=tuple(layers),
        head=np.zeros((d, ACTION_DIM)),
        head_bias=np.zeros(ACTION_DIM),
    )


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x * (gain / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6))


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _block(lw: LayerWeights, x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    dh = d // n_heads
    h = _rms_norm(x, lw.norm1)
    q = (h @ lw.wq).reshape(n, n_heads, dh).transpose(1, 0, 2)
    k = (h @ lw.wk).reshape(n, n_heads, dh).transpose(1, 0, 2)
    v = (h @ lw.wv).reshape(n, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    att = (p @ v).transpose(1, 0, 2).reshape(n, d)
    x = x + att @ lw.wo
    h = _rms_norm(x, lw.norm2)
    return x + _gelu(h @ lw.w1) @ lw.w2


def embed_tokens(weights: TransformerWeights, tokens: np.ndarray) -> np.ndarray:
    return tokens @ weights.embed


def trunk(weights: TransformerWeights, tokens: np.ndarray, hooks: HookSet = NO_HOOKS) -> LayerTrace:
    """Run the layer recurrence, returning readout activations after every layer."""
    x = embed_tokens(weights, tokens)
    acts = []
    observe = hooks.observers_at
    control = hooks.controllers_at
    for idx, lw in enumerate(weights.layers, start=1):
        x = _block(lw, x, weights.n_heads)
        if idx in observe:
            if hooks.on_observe is not None:
                hooks.on_observe(idx, x[READOUT])
            if idx in control:
                x = x.copy()
                x[READOUT] = hooks.on_control(idx, x[READOUT])
        acts.append(x[READOUT].copy())
    return LayerTrace(acts)


def decode_action(weights: TransformerWeights, x_final: np.ndarray) -> Action:
    return Action.clipped(x_final @ weights.head + weights.head_bias)


def forward(weights: TransformerWeights, tokens: np.ndarray, hooks: HookSet = NO_HOOKS) -> tuple[LayerTrace, Action]:
    hooks.validate(weights.n_layers)
    trace = trunk(weights, tokens, hooks)
    return trace, decode_action(weights, trace.activations[-1])


def readout_activations(weights: TransformerWeights, states: Iterable[WorldState]) -> np.ndarray:
    """Stack readout activations for many states: shape (n, T, d)."""
    return np.stack([np.stack(trunk(weights, encode(w)).activations) for w in states])


def fit_action_head(
    weights: TransformerWeights,
    demos: list[tuple[WorldState, Action]] | tuple[np.ndarray, np.ndarray],
    lam: float = 1e-2,
) -> TransformerWeights:
    """Fit the linear action head on (final readout activation, expert action) pairs.

    ``demos`` is either a list of (state, action) pairs or a pre-computed
    ``(X_final, actions)`` array pair. The bias is left unpenalized by
    centering both sides.
    """
    if isinstance(demos, tuple):
        x, y = (np.asarray(a, dtype=np.float64) for a in demos)
    else:
        x = readout_activations(weights, [s for s, _ in demos])[:, -1, :]
        y = np.array([a.delta for _, a in demos])
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    # C order so in-memory and reloaded weights take the same BLAS path
    head = np.ascontiguousarray(ridge_solve(x - mx, y - my, lam))
    return replace(weights, head=head, head_bias=my - mx @ head)


def relabel(weights: TransformerWeights, episodes: Iterable[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """Final-layer activations of every visited state paired with the expert's action there."""
    xs, ys = [], []
    last = weights.n_layers
    for ep in episodes:
        if ep.n_steps == 0:
            continue
        if last in ep.activations:
            xs.append(ep.activations[last])
        else:
            xs.append(readout_activations(weights, ep.states[: ep.n_steps])[:, -1, :])
        ys.append(np.array([expert_action(w).delta for w in ep.states[: ep.n_steps]]))
    d = weights.d
    if not xs:
        return np.zeros((0, d)), np.zeros((0, ACTION_DIM))
    return np.concatenate(xs), np.concatenate(ys)


@dataclass
class FitRound:
    round: int
    n_samples: int
    success_rate: float


def fit_policy(
    weights: TransformerWeights,
    demos: list[Episode],
    starts: list[tuple[TaskSpec, int]],
    rounds: int = 4,
    lam: float = 1e-2,
) -> tuple[TransformerWeights, list[FitRound]]:
    """Behavior cloning with dataset aggregation.

    The head is first fitted on the expert demonstrations. Each further
    round rolls the current policy out from ``starts`` (task, env seed),
    labels every visited state with the expert action and refits on the
    union, which teaches the head to recover from its own drift.
    """
    x, y = relabel(weights, demos)
    xs, ys = [x], [y]
    history = []
    for r in range(rounds + 1):
        weights = fit_action_head(weights, (np.concatenate(xs), np.concatenate(ys)), lam)
        if r == rounds:
            history.append(FitRound(r, int(sum(len(v) for v in ys)), float("nan")))
            break
        probe = HookSet(observers_at={weights.n_layers})
        eps = [policy_rollout(weights, seed, task, probe) for task, seed in starts]
        history.append(FitRound(r, int(sum(len(v) for v in ys)), sum(e.success for e in eps) / max(len(eps), 1)))
        x, y = relabel(weights, eps)
        xs.append(x)
        ys.append(y)
    return weights, history


def record_layers(trace: LayerTrace, layers: Iterable[int], sink: dict[int, list]) -> None:
    for l in layers:
        sink[l].append(trace.activations[l - 1])


def _finish(task, env_seed, states, actions, rec, success, logs=None, dt=DT, d=0) -> Episode:
    acts = {l: (np.stack(v) if v else np.zeros((0, d))) for l, v in rec.items()}
    return Episode(task, env_seed, states, actions, acts, success, logs or [], dt)


def policy_rollout(
    weights: TransformerWeights,
    env_seed: int,
    task: TaskSpec,
    hooks: HookSet = NO_HOOKS,
    dt: float = DT,
) -> Episode:
    """Closed-loop rollout of the fitted policy until success or the horizon."""
    if not weights.fitted:
        raise ConfigurationError("action head is not fitted")
    hooks.validate(weights.n_layers)
    w = reset(env_seed, task)
    states, actions = [w], []
    rec = {l: [] for l in sorted(hooks.observers_at)}
    while not w.done and not is_success(w):
        trace, a = forward(weights, encode(w), hooks)
        record_layers(trace, rec, rec)
        actions.append(a)
        w = step(w, a, dt)
        states.append(w)
    return _finish(task, env_seed, states, actions, rec, is_success(w), dt=dt, d=weights.d)


def expert_rollout(
    weights: TransformerWeights,
    env_seed: int,
    task: TaskSpec,
    layers: Iterable[int] | None = None,
    dt: float = DT,
) -> Episode:
    """Roll out the scripted expert, recording trunk activations along the way."""
    layers = range(1, weights.n_layers + 1) if layers is None else layers
    w = reset(env_seed, task)
    states, actions = [w], []
    rec = {l: [] for l in sorted(layers)}
    while not w.done and not is_success(w):
        trace = trunk(weights, encode(w))
        record_layers(trace, rec, rec)
        a = expert_action(w)
        actions.append(a)
        w = step(w, a, dt)
        states.append(w)
    return _finish(task, env_seed, states, actions, rec, is_success(w), dt=dt, d=weights.d)


class WeightsFormatError(ValueError):
    pass


def save_weights(weights: TransformerWeights, path: str | Path) -> None:
    """Flat binary: magic, int64 header (d, T, h, seed), float64 payload.

    Payload order: embed (TOKEN_FEATURES x d, row-major); per layer norm1, wq, wk, wv,
    wo, norm2, w1, w2; then head (d x 7) and head bias (7).
    """
    header = struct.pack("<4q", weights.d, weights.n_layers, weights.n_heads, weights.seed)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in weights.arrays())
    Path(path).write_bytes(MAGIC + header + payload)


def load_weights(path: str | Path) -> TransformerWeights:
    raw = Path(path).read_bytes()
    if len(raw) < 48 or raw[:16] != MAGIC:
        raise WeightsFormatError(f"{path}: not an actuate weights file (bad magic)")
    d, n_layers, n_heads, seed = struct.unpack("<4q", raw[16:48])
    if d <= 0 or n_layers < 2 or n_heads <= 0 or d % n_heads:
        raise WeightsFormatError(f"{path}: corrupt header d={d} T={n_layers} h={n_heads}")
    template = init_shapes(d, n_layers)
    need = sum(int(np.prod(s)) for s in template) * 8
    if len(raw) - 48 != need:
        raise WeightsFormatError(f"{path}: payload is {len(raw) - 48} bytes, expected {need}")
    flat = np.frombuffer(raw, dtype="<f8", offset=48).astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise WeightsFormatError(f"{path}: non-finite weights")
    arrays, pos = [], 0
    for shape in template:
        size = int(np.prod(shape))
        arrays.append(flat[pos : pos + size].reshape(shape))
        pos += size
    embed = arrays[0]
    layers = tuple(LayerWeights(*arrays[1 + 8 * i : 9 + 8 * i]) for i in range(n_layers))
    return TransformerWeights(d, n_layers, n_heads, seed, embed, layers, arrays[-2], arrays[-1])


def init_shapes(d: int, n_layers: int) -> list[tuple[int, ...]]:
    per_layer = [(d,), (d, d), (d, d), (d, d), (d, d), (d,), (d, 4 * d), (4 * d, d)]
    return [(TOKEN_FEATURES, d)] + per_layer * n_layers + [(d, ACTION_DIM), (ACTION_DIM,)]
