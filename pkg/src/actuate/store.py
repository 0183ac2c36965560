"""On-disk formats and pipeline configuration.

Episodes are stored as a JSONL file (one header line, then one record per
episode) next to a binary sidecar holding the per-layer activations as
little-endian float64. Every writer is deterministic, so rewriting a loaded
dataset reproduces the original bytes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .numkit import ConfigurationError
from .observer import ALL_FEATURES
from .polnet import Episode
from .runtime import EntryLog, StepLog
from .simworld import DT, HORIZON, INSTRUCTIONS, MAX_STEP, Action, RobotState, TaskSpec, WorldState

__version__ = "0.1.0"

ACT_MAGIC = b"ACTUATE-ACT-v1\x00\x00"
assert len(ACT_MAGIC) == 16
EPISODES_FILE = "episodes.jsonl"
ACTIVATIONS_FILE = "activations.bin"


class DatasetFormatError(ValueError):
    """A dataset file exists but its header or layout is not what we wrote."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs an output that an earlier stage has not produced."""


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- episodes


def _state_row(w: WorldState) -> list:
    r = w.robot
    return [*r.position, *r.orientation, r.gripper, *w.object_position, int(w.object_grasped), w.step_index]


def _state_from_row(row, task: TaskSpec) -> WorldState:
    v = [float(x) for x in row[:10]]
    return WorldState(
        robot=RobotState((v[0], v[1], v[2]), (v[3], v[4], v[5]), v[6]),
        object_position=(v[7], v[8], v[9]),
        object_grasped=bool(row[10]),
        goal_center=tuple(task.goal_center),
        goal_radius=task.goal_radius,
        step_index=int(row[11]),
        task=task,
    )


def _log_rows(logs) -> list:
    # timings are deliberately dropped: persisted outputs must not depend on the clock
    return [[lg.step_index, [list(e) for e in lg.entries], list(lg.action)] for lg in logs]


def _logs_from_rows(rows) -> list[StepLog]:
    out = []
    for step_index, entries, action in rows:
        ents = tuple(EntryLog(str(e[0]), int(e[1]), float(e[2]), float(e[3]), float(e[4]), bool(e[5])) for e in entries)
        out.append(StepLog(int(step_index), ents, tuple(float(a) for a in action), 0.0, 0.0))
    return out


def save_episodes(episodes: Iterable[Episode], directory: str | Path, meta: dict | None = None) -> Path:
    """Write ``episodes.jsonl`` and ``activations.bin`` under ``directory``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
    episodes = list(episodes)
    d = 0
    for ep in episodes:
        for a in ep.activations.values():
            if a.size:
                d = a.shape[1]
                break
        if d:
            break
    header = {"format": "actuate-episodes", "version": 1, "n_episodes": len(episodes), "d": d, "meta": meta or {}}
    lines = [_dumps(header)]
    chunks = []
    offset = 0
    for ep in episodes:
        layers = sorted(ep.activations)
        rows = [int(ep.activations[l].shape[0]) for l in layers]
        rec = {
            "task": ep.task.to_json(),
            "env_seed": ep.env_seed,
            "dt": ep.dt,
            "success": bool(ep.success),
            "states": [_state_row(w) for w in ep.states],
            "actions": [list(a.delta) for a in ep.actions],
            "layers": layers,
            "rows": rows,
            "offset": offset,
        }
        if ep.logs:
            rec["logs"] = _log_rows(ep.logs)
        for l in layers:
            arr = np.ascontiguousarray(ep.activations[l], dtype="<f8")
            chunks.append(arr.tobytes())
            offset += arr.size
        lines.append(_dumps(rec))
    (out / EPISODES_FILE).write_text("\n".join(lines) + "\n")
    payload = b"".join(chunks)
    (out / ACTIVATIONS_FILE).write_bytes(ACT_MAGIC + struct.pack("<2q", offset, d) + payload)
    return out


def load_episodes(directory: str | Path) -> tuple[list[Episode], dict]:
    """Read a dataset written by :func:`save_episodes`; returns (episodes, header)."""
    src = Path(directory)
    jpath, bpath = src / EPISODES_FILE, src / ACTIVATIONS_FILE
    if not jpath.exists() or not bpath.exists():
        raise MissingArtifactError(f"no dataset at {src} (need {EPISODES_FILE} and {ACTIVATIONS_FILE})")
    raw = bpath.read_bytes()
    if len(raw) < 32 or raw[:16] != ACT_MAGIC:
        raise DatasetFormatError(f"{bpath}: bad magic, not an actuate activation file")
    n_floats, d = struct.unpack("<2q", raw[16:32])
    if n_floats < 0 or d < 0 or len(raw) - 32 != 8 * n_floats:
        raise DatasetFormatError(f"{bpath}: header says {n_floats} floats but payload is {len(raw) - 32} bytes")
    flat = np.frombuffer(raw, dtype="<f8", offset=32).astype(np.float64)
    lines = jpath.read_text().splitlines()
    try:
        header = json.loads(lines[0]) if lines else {}
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{jpath}: unreadable header line") from exc
    if header.get("format") != "actuate-episodes" or header.get("version") != 1:
        raise DatasetFormatError(f"{jpath}: unexpected header {str(lines[0])[:80] if lines else ''!r}")
    if header.get("d") != d:
        raise DatasetFormatError(f"{jpath}: width d={header.get('d')} disagrees with sidecar d={d}")
    episodes = []
    for i, line in enumerate(lines[1:], start=1):
        try:
            rec = json.loads(line)
            task = TaskSpec.from_json(rec["task"])
            states = [_state_from_row(r, task) for r in rec["states"]]
            actions = [Action(tuple(float(v) for v in a)) for a in rec["actions"]]
            acts = {}
            pos = int(rec["offset"])
            for l, n in zip(rec["layers"], rec["rows"]):
                size = int(n) * d
                if pos + size > n_floats:
                    raise DatasetFormatError(f"{jpath}:{i + 1}: activation block runs past the sidecar")
                acts[int(l)] = flat[pos : pos + size].reshape(int(n), d)
                pos += size
            logs = _logs_from_rows(rec.get("logs", []))
            episodes.append(Episode(task, int(rec["env_seed"]), states, actions, acts, bool(rec["success"]), logs, float(rec["dt"])))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, DatasetFormatError):
                raise
            raise DatasetFormatError(f"{jpath}:{i + 1}: malformed episode record ({exc})") from exc
    if len(episodes) != header.get("n_episodes"):
        raise DatasetFormatError(f"{jpath}: header promises {header.get('n_episodes')} episodes, found {len(episodes)}")
    return episodes, header


# ---------------------------------------------------------------- config

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "model": {"d": 64, "n_layers": 8, "n_heads": 4},
    "env": {"dt": DT, "max_step": MAX_STEP, "horizon": HORIZON, "tasks": None},
    "data": {"seeds_per_task": 3, "instructions": list(INSTRUCTIONS)},
    "policy": {"lam": 1e-2, "dagger_rounds": 4, "holdout": 0.2, "eval_episodes_per_task": 10},
    "probes": {
        "lam": 1e-2,
        "holdout": 0.2,
        "features": list(ALL_FEATURES),
        "robustness_eps": [0.01, 0.1, 1.0],
        "robustness_trials": 1000,
    },
    "steer": {
        "episodes_per_task": 2,
        "instruction": "default",
        "init_gripper": None,
        "observe_only": [],
        "plan": [],
    },
    "studies": {
        "episodes_per_task": 10,
        "tasks": None,
        "gripper": {
            "closed": [{"feature": "action_gripper", "layer": 8, "low": 0.99, "high": 1.0}],
            "open": [{"feature": "action_gripper", "layer": 8, "low": 0.0, "high": 0.01}],
        },
        "height": {
            "window": 15,
            "below": [{"feature": "action_dz", "layer": 8, "high": -0.01}],
            "above": [{"feature": "action_dz", "layer": 8, "low": 0.01}],
        },
        "speed": {
            "window": 25,
            "box_margin": 0.8,
            "below": [{"feature": "speed_box", "layer": 8}],
            "above": [{"feature": "speed", "layer": 8, "low": "median"}],
        },
        "perturb_sweep": {
            "features": ["action_dyaw", "action_gripper"],
            "alphas": [0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            "episodes": 10,
        },
        "classifier_image": {"feature": "action_dz", "layer": "best", "alpha": 1.0, "episodes_per_task": 3},
    },
}

STUDY_NAMES = ("gripper", "height", "speed", "perturb_sweep", "classifier_image")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("gripper", "height", "speed"):
            out[k] = _merge(base[k], v, path + k + ".")
        elif isinstance(base[k], dict) and isinstance(v, dict):
            # study sections: conditions may be replaced wholesale
            merged = copy.deepcopy(base[k])
            merged.update(copy.deepcopy(v))
            out[k] = merged
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    data: dict
    config_hash: str
    source: str | None = None

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def section(self, name: str) -> dict:
        return self.data[name]

    def with_seed(self, seed: int) -> "PipelineConfig":
        d = copy.deepcopy(self.data)
        d["seed"] = int(seed)
        return PipelineConfig(d, self.config_hash, self.source)

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1) + "\n"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigurationError(msg)


def validate_config(data: dict, base_dir: Path | None = None) -> None:
    _require(isinstance(data.get("seed"), int) and not isinstance(data.get("seed"), bool), "config 'seed' must be an integer")
    m = data["model"]
    _require(all(isinstance(m[k], int) and m[k] > 0 for k in ("d", "n_layers", "n_heads")), "model dims must be positive integers")
    _require(m["d"] % m["n_heads"] == 0, f"model.d={m['d']} is not divisible by model.n_heads={m['n_heads']}")
    _require(m["n_layers"] >= 2, "model.n_layers must be at least 2")
    env = data["env"]
    _require(isinstance(env["dt"], (int, float)) and env["dt"] > 0 and math.isfinite(env["dt"]), "env.dt must be positive")
    _require(env["max_step"] == MAX_STEP, f"env.max_step is fixed at {MAX_STEP} (the clip lives in the action type)")
    _require(isinstance(env["horizon"], int) and env["horizon"] >= 20, "env.horizon must be an integer >= 20")
    if env["tasks"] is not None:
        p = Path(env["tasks"])
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        _require(p.exists(), f"env.tasks file {p} does not exist")
        env["tasks"] = str(p)
    dd = data["data"]
    _require(isinstance(dd["seeds_per_task"], int) and dd["seeds_per_task"] >= 1, "data.seeds_per_task must be >= 1")
    bad = [i for i in dd["instructions"] if i not in INSTRUCTIONS]
    _require(not bad and dd["instructions"], f"data.instructions has unknown entries {bad}")
    pol = data["policy"]
    _require(pol["lam"] > 0 and data["probes"]["lam"] > 0, "ridge penalties must be positive")
    _require(isinstance(pol["dagger_rounds"], int) and pol["dagger_rounds"] >= 0, "policy.dagger_rounds must be >= 0")
    _require(0 < pol["holdout"] < 1 and 0 < data["probes"]["holdout"] < 1, "holdout fractions must lie in (0, 1)")
    _require(pol["eval_episodes_per_task"] >= 1, "policy.eval_episodes_per_task must be >= 1")
    pr = data["probes"]
    bad = [f for f in pr["features"] if f not in ALL_FEATURES]
    _require(not bad, f"probes.features has unknown features {bad}; known: {list(ALL_FEATURES)}")
    _require(all(e >= 0 and math.isfinite(e) for e in pr["robustness_eps"]), "robustness_eps must be finite and nonnegative")
    st = data["studies"]
    _require(isinstance(st["episodes_per_task"], int) and st["episodes_per_task"] >= 1, "studies.episodes_per_task must be >= 1")
    alphas = st["perturb_sweep"]["alphas"]
    _require(bool(alphas) and all(isinstance(a, (int, float)) and math.isfinite(a) for a in alphas), "perturb_sweep.alphas must be finite numbers")
    n_layers = m["n_layers"]
    for name in ("gripper", "height", "speed"):
        for cond, entries in st[name].items():
            if not isinstance(entries, list):
                continue
            for e in entries:
                check_entry_spec(e, n_layers, f"studies.{name}.{cond}")
    steer = data["steer"]
    for e in steer["plan"]:
        check_entry_spec(e, n_layers, "steer.plan")
    _require(steer["instruction"] in INSTRUCTIONS, f"steer.instruction {steer['instruction']!r} is unknown")
    bad = [l for l in steer["observe_only"] if not (isinstance(l, int) and 1 <= l <= n_layers)]
    _require(not bad, f"steer.observe_only layers {bad} outside [1, {n_layers}]")


_SPECIAL_FEATURES = ("speed_box",)


def check_entry_spec(e: dict, n_layers: int, where: str) -> None:
    _require(isinstance(e, dict), f"{where}: plan entry must be an object")
    f = e.get("feature")
    _require(f in ALL_FEATURES or f in _SPECIAL_FEATURES, f"{where}: unknown feature {f!r}")
    layers = e.get("layers", [e.get("layer", "best")])
    for l in layers:
        _require(l == "best" or (isinstance(l, int) and 1 <= l <= n_layers), f"{where}: layer {l!r} outside [1, {n_layers}]")
    for k in ("window_start", "window_len"):
        v = e.get(k)
        _require(v is None or (isinstance(v, int) and v >= 0), f"{where}: {k} must be a nonnegative integer")
    mode = e.get("mode", "minimal")
    _require(mode in ("minimal", "offset", "observe"), f"{where}: unknown mode {mode!r}")
    for k in ("low", "high"):
        v = e.get(k)
        _require(v is None or v == "median" or (isinstance(v, (int, float)) and not math.isnan(v)), f"{where}: bad bound {k}={v!r}")


def load_config(path: str | Path | None = None, seed: int | None = None) -> PipelineConfig:
    """Read and validate a JSON config (defaults when ``path`` is None); ``seed`` overrides the file."""
    if path is None:
        text = json.dumps(DEFAULT_CONFIG, sort_keys=True, indent=1) + "\n"
        over: dict = {}
        base_dir = None
        source = None
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} does not exist")
        text = p.read_text()
        try:
            over = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(over, dict):
            raise ConfigurationError("config root must be a JSON object")
        base_dir = p.parent
        source = str(p)
    data = _merge(DEFAULT_CONFIG, over)
    if seed is not None:
        data["seed"] = int(seed)
    validate_config(data, base_dir)
    return PipelineConfig(data, hashlib.sha256(text.encode()).hexdigest(), source)


# ---------------------------------------------------------------- manifest


def update_manifest(out: Path, cfg: PipelineConfig, command: str, outputs: Iterable[Path]) -> dict:
    """Record config hash, seed and output digests for one command in ``manifest.json``."""
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["toolkit_version"] = __version__
    manifest["config_hash"] = cfg.config_hash
    manifest["seed"] = cfg.seed
    cmds = manifest.setdefault("commands", {})
    files = {}
    for f in sorted(set(Path(o) for o in outputs)):
        files[str(f.relative_to(out))] = sha256_file(f)
    cmds[command] = {"config_hash": cfg.config_hash, "seed": cfg.seed, "outputs": files}
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest
