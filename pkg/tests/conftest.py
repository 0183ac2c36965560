from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from actuate import cli
from actuate.numkit import derive_seed
from actuate.observer import Observer, feature
from actuate.polnet import expert_rollout, fit_policy, init_random
from actuate.simworld import INSTRUCTIONS, canonical_tasks

# a reduced pipeline that still fits a working policy in well under a minute
QUICK_CONFIG = {
    "data": {"seeds_per_task": 1},
    "policy": {"dagger_rounds": 2, "eval_episodes_per_task": 2},
    "probes": {"robustness_trials": 50},
    "steer": {"episodes_per_task": 1},
    "studies": {
        "episodes_per_task": 1,
        "tasks": ["spatial_00", "spatial_01", "spatial_02"],
        "perturb_sweep": {"episodes": 2, "alphas": [0.0, 1.0, 2.0]},
        "classifier_image": {"episodes_per_task": 1},
    },
}


@pytest.fixture(scope="session")
def quick_results(tmp_path_factory) -> Path:
    """Results directory after gen-data, fit-policy and train-probes on the quick config."""
    root = tmp_path_factory.mktemp("quick")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(QUICK_CONFIG, indent=1))
    out = root / "results"
    for cmd in ("gen-data", "fit-policy", "train-probes"):
        assert cli.main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def quick_config(quick_results) -> Path:
    return quick_results.parent / "config.json"


@pytest.fixture(scope="session")
def small_policy():
    """Weights fitted on one seed per (task, instruction), plus the demos."""
    tasks = canonical_tasks()
    w = init_random(3)
    demos = [
        expert_rollout(w, derive_seed(3, i, j) & 0xFFFF, t.with_instruction(ins))
        for i, t in enumerate(tasks)
        for j, ins in enumerate(INSTRUCTIONS)
    ]
    fitted, _ = fit_policy(w, demos, [(e.task, e.env_seed) for e in demos], rounds=2)
    return fitted, demos


def random_observer(rng: np.random.Generator, d: int = 16, layer: int = 1, kind: str = "continuous") -> Observer:
    spec = feature("gripper" if kind == "binary" else "state_x")
    return Observer(layer, spec, rng.normal(size=d) * rng.uniform(0.2, 3.0), float(rng.normal()), kind)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
