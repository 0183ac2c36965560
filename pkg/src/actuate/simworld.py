"""Kinematic pick-and-place world with a scripted expert.

Everything is a frozen dataclass over plain floats; ``step`` returns a new
``WorldState``. The expert is a proportional controller over a small set of
phases (approach, grasp, transport, place) and obeys the instruction token.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .numkit import Rng

DT = 0.1
MAX_STEP = 0.05
MAX_ROT_STEP = 0.1
GRASP_RADIUS = 0.05
HORIZON = 60
WORKSPACE = (-1.0, 1.0)
GRASP_ENGAGE = 0.8
GRASP_RELEASE = 0.2

INSTRUCTIONS = ("default", "slow", "fast", "low", "high", "open", "closed")

# start box: x, y, z, roll, pitch, yaw
START_BOX = (
    (-0.1, 0.1),
    (-0.1, 0.1),
    (0.10, 0.20),
    (0.1, 0.5),
    (0.1, 0.5),
    (1.2, 1.9),
)

# expert tuning
APPROACH_SOFTNESS = 0.2
TRANSPORT_SOFTNESS = 0.1
ROT_GAIN = 0.3
PLACE_XY = 0.10
TRANSPORT_ALT = 0.15
ALT_OFFSET = 0.15
EARLY_CLOSE_DIST = 0.2
GRIPPER_RATE = 0.5
RELEASE_ZONE = 0.75
ROLL_TARGET = 0.3
PITCH_TARGET = 0.2

_TWO_PI = 2.0 * math.pi


class FinishedEpisodeError(RuntimeError):
    """Raised when stepping a world whose step index reached the horizon."""


def wrap_angle(a: float) -> float:
    a = a % _TWO_PI
    return 0.0 if a >= _TWO_PI else a


def angle_diff(target: float, current: float) -> float:
    """Signed shortest difference target - current, in (-pi, pi]."""
    d = (target - current + math.pi) % _TWO_PI - math.pi
    return math.pi if d == -math.pi else d


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def _dist(a, b) -> float:
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def _dist_xy(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


@dataclass(frozen=True)
class RobotState:
    position: tuple[float, float, float]
    orientation: tuple[float, float, float]
    gripper: float

    def as_tuple(self) -> tuple[float, ...]:
        return (*self.position, *self.orientation, self.gripper)


@dataclass(frozen=True)
class Action:
    delta: tuple[float, float, float, float, float, float, float]

    @property
    def translation(self) -> tuple[float, float, float]:
        return self.delta[:3]

    @classmethod
    def clipped(cls, values, max_step: float = MAX_STEP, max_rot: float = MAX_ROT_STEP) -> "Action":
        v = [float(x) for x in values]
        if len(v) != 7:
            raise ValueError(f"action needs 7 components, got {len(v)}")
        out = (
            _clip(v[0], -max_step, max_step),
            _clip(v[1], -max_step, max_step),
            _clip(v[2], -max_step, max_step),
            _clip(v[3], -max_rot, max_rot),
            _clip(v[4], -max_rot, max_rot),
            _clip(v[5], -max_rot, max_rot),
            _clip(v[6], -1.0, 1.0),
        )
        return cls(out)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    object_start: tuple[float, float, float]
    goal_center: tuple[float, float, float]
    goal_radius: float
    horizon: int = HORIZON

    def __post_init__(self):
        if self.instruction not in INSTRUCTIONS:
            raise ValueError(f"unknown instruction {self.instruction!r}; expected one of {INSTRUCTIONS}")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.goal_radius <= 0:
            raise ValueError("goal radius must be positive")

    def with_instruction(self, instruction: str) -> "TaskSpec":
        return replace(self, instruction=instruction)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "object_start": list(self.object_start),
            "goal_center": list(self.goal_center),
            "goal_radius": self.goal_radius,
            "horizon": self.horizon,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "TaskSpec":
        return cls(
            task_id=str(rec["task_id"]),
            instruction=rec["instruction"],
            object_start=tuple(float(v) for v in rec["object_start"]),
            goal_center=tuple(float(v) for v in rec["goal_center"]),
            goal_radius=float(rec["goal_radius"]),
            horizon=int(rec["horizon"]),
        )


@dataclass(frozen=True)
class WorldState:
    robot: RobotState
    object_position: tuple[float, float, float]
    object_grasped: bool
    goal_center: tuple[float, float, float]
    goal_radius: float
    step_index: int
    task: TaskSpec = field(repr=False)

    @property
    def done(self) -> bool:
        return self.step_index >= self.task.horizon


def load_tasks(path: str | Path | None = None) -> list[TaskSpec]:
    """Read a task manifest; the packaged canonical manifest when ``path`` is None."""
    if path is None:
        text = resources.files("actuate").joinpath("tasks.json").read_text()
    else:
        text = Path(path).read_text()
    records = json.loads(text)
    if isinstance(records, dict):
        records = records["tasks"]
    tasks = [TaskSpec.from_json(r) for r in records]
    for t in tasks:
        if t.horizon < 20:
            raise ValueError(f"task {t.task_id}: manifest horizon must be >= 20, got {t.horizon}")
    return tasks


def canonical_tasks() -> list[TaskSpec]:
    return load_tasks(None)


def reset(seed: int, task: TaskSpec, gripper: float = 0.0) -> WorldState:
    """Start state: robot pose uniform in START_BOX, gripper open unless overridden."""
    if not 0.0 <= gripper <= 1.0:
        raise ValueError(f"initial gripper must lie in [0, 1], got {gripper}")
    rng = Rng(seed)
    draws = [rng.uniform(lo, hi) for lo, hi in START_BOX]
    robot = RobotState(
        position=(draws[0], draws[1], draws[2]),
        orientation=(draws[3], draws[4], draws[5]),
        gripper=float(gripper),
    )
    return WorldState(
        robot=robot,
        object_position=tuple(task.object_start),
        object_grasped=False,
        goal_center=tuple(task.goal_center),
        goal_radius=task.goal_radius,
        step_index=0,
        task=task,
    )


def step(w: WorldState, a: Action, dt: float = DT) -> WorldState:
    """Integrate one action. ``dt`` only scales derived rates; deltas are per step."""
    if w.step_index >= w.task.horizon:
        raise FinishedEpisodeError(f"episode finished at step {w.step_index} (horizon {w.task.horizon})")
    d = Action.clipped(a.delta).delta
    lo, hi = WORKSPACE
    r = w.robot
    pos = tuple(_clip(p + dp, lo, hi) for p, dp in zip(r.position, d[:3]))
    ori = tuple(wrap_angle(o + do) for o, do in zip(r.orientation, d[3:6]))
    grip = _clip(r.gripper + d[6], 0.0, 1.0)

    grasped = w.object_grasped
    obj = w.object_position
    if grasped and grip < GRASP_RELEASE:
        grasped = False
    elif not grasped and grip > GRASP_ENGAGE and _dist(pos, obj) < GRASP_RADIUS:
        grasped = True
    if grasped:
        obj = pos
    return replace(
        w,
        robot=RobotState(pos, ori, grip),
        object_position=obj,
        object_grasped=grasped,
        step_index=w.step_index + 1,
    )


def is_success(w: WorldState) -> bool:
    return (not w.object_grasped) and _dist(w.object_position, w.goal_center) < w.goal_radius


def speed_scale(instruction: str) -> float:
    return {"slow": 0.5, "fast": 2.0}.get(instruction, 1.0)


def transport_altitude(instruction: str) -> float:
    return TRANSPORT_ALT + {"low": -ALT_OFFSET, "high": ALT_OFFSET}.get(instruction, 0.0)


def _expert_targets(w: WorldState) -> tuple[tuple[float, float, float], float, float]:
    """Position target, yaw target and gripper command for the current phase."""
    instr = w.task.instruction
    pos = w.robot.position
    obj = w.object_position
    goal = w.goal_center
    if w.object_grasped:
        offset = transport_altitude(instr) - TRANSPORT_ALT
        blend = _clip(_dist_xy(goal, pos) / PLACE_XY, 0.0, 1.0)
        target = (goal[0], goal[1], goal[2] + offset * blend)
        yaw = 0.5 * math.pi + 0.5 * math.atan2(goal[1], goal[0])
        placed = _dist(pos, goal) < RELEASE_ZONE * w.goal_radius
        return target, yaw, 0.0 if placed else 1.0

    yaw = 0.5 * math.pi + 0.5 * math.atan2(obj[1], obj[0])
    dist = _dist(pos, obj)
    if instr == "closed" or dist < 0.8 * GRASP_RADIUS:
        g_cmd = 1.0
    elif instr == "open":
        g_cmd = 0.0
    else:
        g_cmd = 1.0 if dist < EARLY_CLOSE_DIST else 0.0
    return obj, yaw, g_cmd


def expert_action(w: WorldState) -> Action:
    """Saturating proportional step toward the phase target.

    The translation is ``v * rel / sqrt(|rel|^2 + c^2)``: full speed far
    away, a proportional gain of ``v / c`` close in. ``c`` differs between
    the approach and the transport phase.
    """
    target, yaw_target, g_cmd = _expert_targets(w)
    pos = w.robot.position
    rel = [t - p for t, p in zip(target, pos)]
    soft = TRANSPORT_SOFTNESS if w.object_grasped else APPROACH_SOFTNESS
    v = MAX_STEP * speed_scale(w.task.instruction)
    k = v / math.sqrt(sum(r * r for r in rel) + soft * soft)
    roll, pitch, yaw = w.robot.orientation
    rot = [
        ROT_GAIN * angle_diff(ROLL_TARGET, roll),
        ROT_GAIN * angle_diff(PITCH_TARGET, pitch),
        ROT_GAIN * angle_diff(yaw_target, yaw),
    ]
    dg = GRIPPER_RATE if g_cmd > 0.5 else -GRIPPER_RATE
    return Action.clipped([*(k * r for r in rel), *rot, dg])
