from __future__ import annotations

import csv
import io
import math
import re

import numpy as np
import pytest

from actuate.expharness import (
    ExperimentConfig,
    StudyEpisode,
    meets,
    observe_twin,
    resolve_entries,
    run_classifier_image,
    run_closed_loop_study,
    run_perturb_sweep,
    run_probe_report,
    summarize,
    sweep_statistics,
    training_median_speed,
    window_values,
)
from actuate.numkit import ConfigurationError
from actuate.observer import Observer, feature, raw_labels
from actuate.polnet import policy_rollout
from actuate.runtime import steered_rollout
from actuate.simworld import canonical_tasks

TASKS = tuple(canonical_tasks())


@pytest.fixture(scope="module")
def bundle(small_policy):
    _, demos = small_policy
    return run_probe_report(demos, ["state_z", "action_dz", "action_dyaw", "action_gripper", "gripper"],
                            range(1, 9), trials=50)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig("dance", TASKS)
    with pytest.raises(ConfigurationError):
        ExperimentConfig("perturb_sweep", TASKS, episodes_per_task=0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig("perturb_sweep", TASKS, alphas=(1.0, math.inf))
    with pytest.raises(ConfigurationError):
        ExperimentConfig("closed_loop_study", TASKS, methods=("none", "magic"))


def test_env_seeds_shared_and_distinct():
    cfg = ExperimentConfig("closed_loop_study", TASKS[:3], seed=4, episodes_per_task=2)
    slots = cfg.env_seeds(1)
    assert len(slots) == 6 and len({s for _, _, s in slots}) == 6
    assert slots == cfg.env_seeds(1)
    assert slots != cfg.env_seeds(2)


def test_probe_report_structure(bundle):
    assert set(bundle.best_layers) == {"state_z", "action_dz", "action_dyaw", "action_gripper", "gripper"}
    assert {k[1] for k in bundle.observers} == set(range(1, 9))
    for rep in bundle.reports:
        assert 1 <= rep.best_layer <= 8
    for fid, layer, eps, delta, bound in bundle.robustness:
        assert delta <= bound + 1e-12
    assert {s[0] for s in bundle.shuffled} == {"state_z", "action_dz", "action_dyaw"}


def test_position_probe_beats_baseline(bundle):
    rep = next(r for r in bundle.reports if r.feature_id == "state_z")
    m = rep.metrics[rep.best_layer]
    assert m["mae"] < m["baseline_mae"]
    grip = next(r for r in bundle.reports if r.feature_id == "gripper")
    g = grip.metrics[grip.best_layer]
    assert g["accuracy"] > g["baseline_accuracy"]
    # on this small set the shuffled control may overfit, but it never finds signal
    for fid, layer, mae, base in bundle.shuffled:
        assert mae > 0.9 * base


def test_window_values_and_meets(small_policy):
    w, _ = small_policy
    ep = policy_rollout(w, 3, TASKS[0])
    z = window_values("height", ep, 15)
    assert len(z) == min(15, ep.n_steps)
    assert z[0] == ep.states[1].robot.position[2] - ep.states[0].robot.position[2]
    sp = window_values("speed", ep, None)
    np.testing.assert_allclose(sp, raw_labels([ep], feature("speed")), rtol=1e-15)
    assert meets("gripper", "closed", 0.5) and not meets("gripper", "open", 0.5)
    assert meets("height", "below", -1e-9) and not meets("height", "above", 0.0)
    assert meets("speed", "below", 0.2, 0.2) and meets("speed", "above", 0.2, 0.2)
    with pytest.raises(ConfigurationError):
        window_values("weight", ep, 3)


def test_resolve_entries(bundle, small_policy):
    _, demos = small_policy
    med = training_median_speed(demos)
    specs = [{"feature": "action_dz", "layer": 8, "high": -0.01}, {"feature": "speed_box", "layer": 8}]
    with pytest.raises(ConfigurationError, match="median"):
        resolve_entries(specs, bundle.observers, bundle.best_layers)
    with pytest.raises(ConfigurationError, match="no trained observer"):
        resolve_entries(specs, bundle.observers, bundle.best_layers, median_speed=med)
    obs = dict(bundle.observers)
    for comp in ("action_dx", "action_dy"):
        obs[(comp, 8)] = Observer(8, feature(comp), bundle.observers[("action_dz", 8)].W, 0.0, "continuous")
    entries = resolve_entries(specs, obs, bundle.best_layers, 0, 25, median_speed=med, box_margin=0.8)
    assert len(entries) == 4
    box = entries[1]
    bound = 0.8 * med * 0.1 / math.sqrt(3)
    assert box.observer.feature.denormalize(box.target.zeta_max) == pytest.approx(bound)
    assert all(e.window_len == 25 for e in entries)
    best = resolve_entries([{"feature": "state_z", "layer": "best", "low": 0.1}], bundle.observers, bundle.best_layers)
    assert best[0].observer.layer == bundle.best_layers["state_z"]


def test_observe_twin_is_transparent(bundle, small_policy):
    w, _ = small_policy
    entries = resolve_entries([{"feature": "action_dz", "layer": 8, "high": -0.01}], bundle.observers,
                              bundle.best_layers, 0, 15)
    a = steered_rollout(w, 6, TASKS[3], observe_twin(entries))
    b = policy_rollout(w, 6, TASKS[3])
    assert a.actions == b.actions
    assert all(len(l.entries) == 1 for l in a.logs)


def test_closed_loop_study_shares_seeds_and_logs_zeta(bundle, small_policy):
    w, _ = small_policy
    cfg = ExperimentConfig("closed_loop_study", TASKS[:2], seed=1, episodes_per_task=1)
    plans = {
        "below": resolve_entries([{"feature": "action_dz", "layer": 8, "high": -0.01}], bundle.observers, bundle.best_layers, 0, 15),
        "above": resolve_entries([{"feature": "action_dz", "layer": 8, "low": 0.01}], bundle.observers, bundle.best_layers, 0, 15),
    }
    recs = run_closed_loop_study(w, "height", cfg, plans, window=15)
    assert len(recs) == 2 * 3 * 2
    seeds = {(r.condition, r.method): sorted(x.env_seed for x in recs if (x.condition, x.method) == (r.condition, r.method))
             for r in recs}
    assert len(set(map(tuple, seeds.values()))) == 1
    for r in recs:
        assert 0.0 <= r.satisfaction <= 1.0
        assert not math.isnan(r.observed_satisfaction)
        if r.method == "control":
            assert r.observed_satisfaction == 1.0
        assert StudyEpisode.from_json(r.to_json()) == r
    with pytest.raises(ConfigurationError):
        run_closed_loop_study(w, "height", cfg, {"below": plans["below"]})


def fake_records(rng):
    recs = []
    for cond in ("open", "closed"):
        for method in ("none", "prompting", "control"):
            for k in range(4):
                vals = tuple(float(v) for v in rng.uniform(size=rng.integers(3, 9)))
                recs.append(StudyEpisode("gripper", cond, method, f"t{k}", k, bool(k % 2), float(np.mean(vals)),
                                         1.0, 0.0, vals))
    return recs


def test_summarize_requires_inputs():
    with pytest.raises(ConfigurationError, match="missing inputs"):
        summarize({})
    with pytest.raises(ConfigurationError):
        summarize({"gripper": []})


def test_tradeoff_svg_has_one_ellipse_per_method():
    out = summarize({"gripper": fake_records(np.random.default_rng(0))})
    svg = out["plots/gripper_tradeoff.svg"]
    panels = svg.split('<g class="panel"')[1:]
    assert len(panels) == 2
    for p in panels:
        assert len(re.findall(r'<ellipse class="method"', p)) == 3
    assert svg.startswith("<svg") or svg.startswith("<?xml")


def test_violin_means_recomputed_from_raw_values():
    out = summarize({"gripper": fake_records(np.random.default_rng(1))})
    raw = list(csv.DictReader(io.StringIO(out["tables/gripper_values.csv"])))
    for row in csv.DictReader(io.StringIO(out["tables/gripper_violin.csv"])):
        vals = [float(r["value"]) for r in raw if (r["condition"], r["method"]) == (row["condition"], row["method"])]
        assert abs(float(row["mean"]) - float(np.mean(vals))) <= 1e-12
        assert int(row["n"]) == len(vals)


def test_summarize_is_pure():
    recs = fake_records(np.random.default_rng(2))
    assert summarize({"gripper": recs}) == summarize({"gripper": list(recs)})


def test_perturb_sweep_zero_alpha_and_monotone(bundle, small_policy):
    w, demos = small_policy
    rows = run_perturb_sweep(w, demos[:4], bundle.observers, ["action_dyaw"], [0.0, 0.5, 1.0, 2.0])
    for r in rows:
        if r.alpha == 0.0:
            assert r.mean_abs_change == 0.0
    rho, depth = sweep_statistics(rows)
    assert all(v > 0.8 for v in rho.values())
    assert depth > 0
    with pytest.raises(ConfigurationError):
        run_perturb_sweep(w, demos[:1], bundle.observers, ["state_z"], [1.0])
    with pytest.raises(ConfigurationError, match="no trained observer"):
        run_perturb_sweep(w, demos[:1], {}, ["action_dyaw"], [1.0])


def test_classifier_image(bundle, small_policy):
    w, _ = small_policy
    obs = bundle.observers[("action_dz", 6)]
    cfg = ExperimentConfig("classifier_image", TASKS[:2], seed=0, episodes_per_task=1)
    img = run_classifier_image(w, obs, cfg, alpha=1.5)
    t = img.target
    control = [p for p in img.points if p.condition == "control"]
    none = [p for p in img.points if p.condition == "none"]
    fixed = [p for p in img.points if p.condition == "fixed"]
    assert all(t.contains(p.zeta, 1e-9) for p in control)
    assert any(not t.contains(p.zeta) for p in none)
    for p in fixed:
        assert p.zeta - p.pre_zeta == pytest.approx(1.5 * obs.w_norm, rel=1e-9)
    out = summarize({"classifier_image": img})
    rows = list(csv.DictReader(io.StringIO(out["tables/classifier_image_summary.csv"])))
    assert rows[2]["condition"] == "control" and float(rows[2]["fraction_in_target"]) == 1.0
