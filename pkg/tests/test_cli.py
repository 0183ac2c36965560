from __future__ import annotations

import csv
import hashlib
import json
import shutil

import pytest

from actuate import cli
from actuate.polnet import load_weights, policy_rollout
from actuate.store import load_episodes


def run(*args):
    return cli.main([str(a) for a in args])


def test_dataset_counts_and_probe_outputs(quick_results):
    episodes, header = load_episodes(quick_results / "data")
    assert len(episodes) == 10 * 7 * 1
    assert all(sorted(e.activations) == list(range(1, 9)) for e in episodes)
    observers = sorted((quick_results / "probes" / "observers").glob("*.json"))
    assert len(observers) == 15 * 8
    with open(quick_results / "tables" / "probe_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {int(r["layer"]) for r in rows} == set(range(1, 9))
    summary = json.loads((quick_results / "probes" / "summary.json").read_text())
    assert set(summary["best_layers"]) == {p.stem.rsplit("_L", 1)[0] for p in observers}
    pol = json.loads((quick_results / "policy" / "summary.json").read_text())
    assert pol["heldout_action_mse"] < pol["mean_baseline_mse"]


def test_gen_data_rerun_is_byte_identical(quick_results, quick_config, tmp_path):
    assert run("gen-data", "--config", quick_config, "--out", tmp_path) == 0
    for name in ("episodes.jsonl", "activations.bin"):
        assert (tmp_path / "data" / name).read_bytes() == (quick_results / "data" / name).read_bytes()


def test_manifest_hash_matches_config(quick_results, quick_config):
    m = json.loads((quick_results / "manifest.json").read_text())
    assert m["config_hash"] == hashlib.sha256(quick_config.read_bytes()).hexdigest()
    for cmd in ("gen-data", "fit-policy", "train-probes"):
        for rel, digest in m["commands"][cmd]["outputs"].items():
            assert hashlib.sha256((quick_results / rel).read_bytes()).hexdigest() == digest


def test_exit_codes(tmp_path, quick_config):
    assert run("fit-policy", "--config", quick_config, "--out", tmp_path / "empty") == 3
    assert run("study", "gripper", "--config", quick_config, "--out", tmp_path / "empty") == 3
    assert run("report", "--out", tmp_path / "empty") == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"d": 30}}))
    assert run("gen-data", "--config", bad, "--out", tmp_path) == 2
    assert run("gen-data", "--config", tmp_path / "absent.json", "--out", tmp_path) == 2
    assert run("gen-data", "--threads", 0, "--out", tmp_path) == 2


def test_unknown_study_lists_available(quick_results, quick_config, capsys):
    assert run("study", "juggling", "--config", quick_config, "--out", quick_results) == 2
    err = capsys.readouterr().err
    assert "gripper" in err and "perturb_sweep" in err


def test_corrupt_dataset_is_a_format_error(quick_results, quick_config, tmp_path):
    shutil.copytree(quick_results / "data", tmp_path / "data")
    p = tmp_path / "data" / "activations.bin"
    p.write_bytes(b"\0" * 40)
    assert run("fit-policy", "--config", quick_config, "--out", tmp_path) == 3


def test_steer_empty_plan_reproduces_policy(quick_results, quick_config, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text("[]")
    out = quick_results
    assert run("steer", "--config", quick_config, "--out", out, "--plan", plan) == 0
    weights = load_weights(out / "policy" / "weights.bin")
    episodes, _ = load_episodes(out / "steer")
    assert len(episodes) == 10
    for ep in episodes:
        ref = policy_rollout(weights, ep.env_seed, ep.task)
        assert ep.actions == ref.actions and ep.states == ref.states


def test_steer_gripper_plan_satisfies_observed_zeta(quick_results, quick_config, tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"plan": [{"feature": "action_gripper", "layer": 8, "low": 0.99,
                                          "window_start": 3, "window_len": 10}]}))
    assert run("steer", "--config", quick_config, "--out", quick_results, "--plan", plan) == 0
    with open(quick_results / "tables" / "steer_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["observed_satisfaction"]) == 1.0 for r in rows)
    episodes, _ = load_episodes(quick_results / "steer")
    for ep in episodes:
        for log in ep.logs:
            for e in log.entries:
                if not 3 <= log.step_index < 13:
                    assert not e.active


@pytest.mark.parametrize("entry", [{"feature": "telepathy", "layer": 8}, {"feature": "gripper", "layer": 42}])
def test_steer_rejects_bad_plan_before_rollouts(quick_results, quick_config, tmp_path, entry):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps([entry]))
    out = tmp_path / "out"
    shutil.copytree(quick_results, out)
    shutil.rmtree(out / "steer", ignore_errors=True)
    assert run("steer", "--config", quick_config, "--out", out, "--plan", plan) == 2
    assert not (out / "steer").exists()
    plan.write_text("{broken")
    assert run("steer", "--config", quick_config, "--out", out, "--plan", plan) == 2


def test_quick_study_and_report(quick_results, quick_config):
    assert run("study", "height", "--config", quick_config, "--out", quick_results, "--threads", 2) == 0
    for rel in ("raw/height.jsonl", "tables/height_tradeoff.csv", "tables/height_violin.csv",
                "plots/height_violin.svg", "plots/height_tradeoff.svg"):
        assert (quick_results / rel).exists()
    before = (quick_results / "tables" / "height_tradeoff.csv").read_bytes()
    assert run("report", "--config", quick_config, "--out", quick_results) == 0
    assert (quick_results / "tables" / "height_tradeoff.csv").read_bytes() == before
    assert "## height" in (quick_results / "report.md").read_text()
    m = json.loads((quick_results / "manifest.json").read_text())
    assert "study:height" in m["commands"] and "report" in m["commands"]


def test_seed_override_requires_matching_artifacts(quick_results, quick_config):
    assert run("study", "height", "--config", quick_config, "--out", quick_results, "--seed", 5) == 2


def test_results_dir_from_environment(monkeypatch, tmp_path, quick_config):
    monkeypatch.setenv("ACTUATE_RESULTS_DIR", str(tmp_path / "envout"))
    assert run("report", "--config", quick_config) == 3
    assert (tmp_path / "envout").is_dir()
