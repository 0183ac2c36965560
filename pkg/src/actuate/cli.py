"""Command-line pipeline: gen-data, fit-policy, train-probes, steer, study, report.

Each command reads the JSON config (defaults when omitted), works under
one results directory and records what it wrote in ``manifest.json``.

Exit codes: 0 success, 2 configuration or validation error, 3 missing or
unreadable artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import expharness as xh
from .numkit import ConfigurationError, SingularSystemError, derive_seed
from .observer import ObserverError, load_observer, save_observer, split_episodes, write_probe_csv
from .polnet import (
    Episode,
    TransformerWeights,
    WeightsFormatError,
    expert_rollout,
    fit_policy,
    init_random,
    load_weights,
    policy_rollout,
    relabel,
    save_weights,
)
from .runtime import SteeringPlan, steered_rollout
from .simworld import TaskSpec, canonical_tasks, load_tasks
from .steer import TargetInterval, UnobservableError
from .store import (
    STUDY_NAMES,
    DatasetFormatError,
    MissingArtifactError,
    PipelineConfig,
    check_entry_spec,
    load_config,
    load_episodes,
    save_episodes,
    update_manifest,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
SEED_MASK = 0x7FFFFFFF


class Context:
    def __init__(self, cfg: PipelineConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.written: list[Path] = []

    # paths
    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def weights_path(self) -> Path:
        return self.out / "policy" / "weights.bin"

    @property
    def observer_dir(self) -> Path:
        return self.out / "probes" / "observers"

    def write_text(self, rel: str, text: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.written.append(p)
        return p

    def write_json(self, rel: str, obj) -> Path:
        return self.write_text(rel, json.dumps(obj, sort_keys=True, indent=1) + "\n")

    # config-derived values
    def tasks(self, subset=None) -> list[TaskSpec]:
        env = self.cfg.section("env")
        tasks = canonical_tasks() if env["tasks"] is None else load_tasks(env["tasks"])
        tasks = [replace(t, horizon=env["horizon"]) for t in tasks]
        if subset is not None:
            known = {t.task_id: t for t in tasks}
            bad = [s for s in subset if s not in known]
            if bad:
                raise ConfigurationError(f"unknown task ids {bad}; known: {sorted(known)}")
            tasks = [known[s] for s in subset]
        return tasks

    @property
    def dt(self) -> float:
        return float(self.cfg.section("env")["dt"])

    # artifacts
    def dataset(self) -> list[Episode]:
        episodes, header = load_episodes(self.data_dir)
        meta = header.get("meta", {})
        m = self.cfg.section("model")
        want = {"seed": self.cfg.seed, "d": m["d"], "n_layers": m["n_layers"], "n_heads": m["n_heads"]}
        got = {k: meta.get(k) for k in want}
        if got != want:
            raise ConfigurationError(f"dataset in {self.data_dir} was generated with {got}, config asks for {want}; rerun gen-data")
        return episodes

    def weights(self) -> TransformerWeights:
        if not self.weights_path.exists():
            raise MissingArtifactError(f"no fitted policy at {self.weights_path}; run fit-policy first")
        w = load_weights(self.weights_path)
        if w.seed != self.cfg.seed:
            raise ConfigurationError(f"weights were fitted with seed {w.seed}, config seed is {self.cfg.seed}")
        return w

    def observers(self):
        summary = self.out / "probes" / "summary.json"
        if not summary.exists() or not self.observer_dir.exists():
            raise MissingArtifactError(f"no trained observers under {self.out / 'probes'}; run train-probes first")
        obs = {}
        for p in sorted(self.observer_dir.glob("*.json")):
            o = load_observer(p)
            obs[(o.feature_id, o.layer)] = o
        info = json.loads(summary.read_text())
        return obs, {k: int(v) for k, v in info["best_layers"].items()}, float(info["median_speed"])


# ---------------------------------------------------------------- commands


def cmd_gen_data(ctx: Context) -> int:
    cfg = ctx.cfg
    m = cfg.section("model")
    weights = init_random(cfg.seed, m["d"], m["n_layers"], m["n_heads"])
    data = cfg.section("data")
    episodes = []
    for ti, task in enumerate(ctx.tasks()):
        for instr in data["instructions"]:
            ii = data["instructions"].index(instr)
            for k in range(data["seeds_per_task"]):
                seed = derive_seed(cfg.seed, 1, ti, ii, k) & SEED_MASK
                episodes.append(expert_rollout(weights, seed, task.with_instruction(instr), dt=ctx.dt))
    meta = {"seed": cfg.seed, "d": m["d"], "n_layers": m["n_layers"], "n_heads": m["n_heads"], "dt": ctx.dt}
    save_episodes(episodes, ctx.data_dir, meta)
    ctx.written += [ctx.data_dir / "episodes.jsonl", ctx.data_dir / "activations.bin"]
    ok = sum(e.success for e in episodes)
    print(f"gen-data: {len(episodes)} expert episodes ({ok} successful) -> {ctx.data_dir}")
    return EXIT_OK


def cmd_fit_policy(ctx: Context) -> int:
    cfg = ctx.cfg
    pol = cfg.section("policy")
    m = cfg.section("model")
    episodes = ctx.dataset()
    tr, va = split_episodes(len(episodes), derive_seed(cfg.seed, 2), pol["holdout"])
    train = [episodes[i] for i in tr]
    val = [episodes[i] for i in va]
    weights = init_random(cfg.seed, m["d"], m["n_layers"], m["n_heads"])
    starts = [(e.task, e.env_seed) for e in train]
    fitted, history = fit_policy(weights, train, starts, pol["dagger_rounds"], pol["lam"])

    x_val, y_val = relabel(fitted, val)
    _, y_tr = relabel(fitted, train)
    pred = x_val @ fitted.head + fitted.head_bias
    mse = float(np.mean((pred - y_val) ** 2))
    base = float(np.mean((y_tr.mean(axis=0) - y_val) ** 2))

    tasks = ctx.tasks()
    n_eval = pol["eval_episodes_per_task"]
    evals = [
        policy_rollout(fitted, derive_seed(cfg.seed, 3, ti, k) & SEED_MASK, t, dt=ctx.dt)
        for ti, t in enumerate(tasks)
        for k in range(n_eval)
    ]
    rate = sum(e.success for e in evals) / len(evals)

    ctx.weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(fitted, ctx.weights_path)
    ctx.written.append(ctx.weights_path)
    rows = [(h.round, h.n_samples, h.success_rate) for h in history]
    ctx.write_text("tables/policy_fit.csv", xh._csv(["round", "n_samples", "train_start_success"], rows))
    ctx.write_json("policy/summary.json", {
        "heldout_action_mse": mse,
        "mean_baseline_mse": base,
        "success_rate": rate,
        "eval_episodes": len(evals),
        "dagger_rounds": pol["dagger_rounds"],
    })
    print(f"fit-policy: held-out action MSE {mse:.6f} (predict-mean baseline {base:.6f})")
    print(f"fit-policy: cloned policy success {rate:.3f} over {len(evals)} episodes")
    return EXIT_OK


def cmd_train_probes(ctx: Context) -> int:
    cfg = ctx.cfg
    pr = cfg.section("probes")
    episodes = ctx.dataset()
    layers = range(1, cfg.section("model")["n_layers"] + 1)
    bundle = xh.run_probe_report(
        episodes, pr["features"], layers, pr["lam"], pr["holdout"], cfg.seed,
        pr["robustness_eps"], pr["robustness_trials"],
    )
    ctx.observer_dir.mkdir(parents=True, exist_ok=True)
    for (name, l), obs in sorted(bundle.observers.items()):
        p = ctx.observer_dir / f"{name}_L{l}.json"
        save_observer(obs, p)
        ctx.written.append(p)
    p = ctx.out / "tables" / "probe_report.csv"
    p.parent.mkdir(parents=True, exist_ok=True)
    write_probe_csv(bundle.reports, p)
    ctx.written.append(p)
    ctx.write_text("tables/probe_shuffled.csv", xh._csv(
        ["feature_id", "layer", "shuffled_mae", "baseline_mae"], bundle.shuffled))
    ctx.write_text("tables/probe_robustness.csv", xh._csv(
        ["feature_id", "layer", "epsilon", "max_delta", "bound"], bundle.robustness))
    median = xh.training_median_speed(episodes)
    ctx.write_json("probes/summary.json", {"best_layers": bundle.best_layers, "median_speed": median})
    for r in bundle.reports:
        m = r.metrics[r.best_layer]
        key = r.headline
        print(f"train-probes: {r.feature_id:15s} best layer {r.best_layer}  {key} {m[key]:.4f}  baseline {m['baseline_' + key]:.4f}")
    return EXIT_OK


def _plan_from_specs(ctx: Context, specs, observe_only=()) -> SteeringPlan:
    n_layers = ctx.cfg.section("model")["n_layers"]
    for e in specs:
        check_entry_spec(e, n_layers, "plan")
    obs, best, median = ctx.observers()
    entries = xh.resolve_entries(specs, obs, best, median_speed=median, dt=ctx.dt)
    return SteeringPlan(entries, frozenset(observe_only))


def cmd_steer(ctx: Context, plan_file: str | None) -> int:
    cfg = ctx.cfg
    st = cfg.section("steer")
    specs, observe_only = st["plan"], st["observe_only"]
    if plan_file is not None:
        p = Path(plan_file)
        if not p.exists():
            raise ConfigurationError(f"plan file {p} does not exist")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"plan file {p} is not valid JSON: {exc}") from exc
        if isinstance(loaded, dict):
            specs, observe_only = loaded.get("plan", []), loaded.get("observe_only", [])
        else:
            specs = loaded
    weights = ctx.weights()
    plan = _plan_from_specs(ctx, specs, observe_only)
    plan.validate(weights)  # before any rollout
    episodes = []
    for ti, task in enumerate(ctx.tasks()):
        for k in range(st["episodes_per_task"]):
            seed = derive_seed(cfg.seed, 4, ti, k) & SEED_MASK
            episodes.append(steered_rollout(weights, seed, task.with_instruction(st["instruction"]), plan, ctx.dt, st["init_gripper"]))
    save_episodes(episodes, ctx.out / "steer", {"seed": cfg.seed, "n_entries": len(plan.entries)})
    ctx.written += [ctx.out / "steer" / "episodes.jsonl", ctx.out / "steer" / "activations.bin"]
    rows = []
    for ep in episodes:
        active = [e.active for lg in ep.logs for e in lg.entries]
        rows.append((ep.task.task_id, ep.env_seed, int(ep.success), ep.n_steps,
                     xh.observed_satisfaction(ep, plan.entries), (sum(active) / len(active)) if active else 0.0))
    ctx.write_text("tables/steer_summary.csv", xh._csv(
        ["task_id", "env_seed", "success", "n_steps", "observed_satisfaction", "active_fraction"], rows))
    rate = sum(e.success for e in episodes) / max(len(episodes), 1)
    print(f"steer: {len(episodes)} episodes, success {rate:.3f}, {len(plan.entries)} plan entries")
    return EXIT_OK


# raw record persistence for studies


def _write_jsonl(ctx: Context, rel: str, records) -> None:
    ctx.write_text(rel, "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def load_raw(out: Path) -> dict:
    """Raw study records found under ``out/raw`` (missing studies are absent from the dict)."""
    raw = out / "raw"
    tables: dict = {}
    for study in ("gripper", "height", "speed"):
        p = raw / f"{study}.jsonl"
        if p.exists():
            tables[study] = [xh.StudyEpisode.from_json(r) for r in _read_jsonl(p)]
    p = raw / "perturb_sweep.jsonl"
    if p.exists():
        tables["perturb_sweep"] = [xh.SweepRow(**r) for r in _read_jsonl(p)]
    p = raw / "classifier_image.jsonl"
    if p.exists():
        recs = _read_jsonl(p)
        head = recs[0]
        pts = [xh.ImagePoint(**r) for r in recs[1:]]
        tables["classifier_image"] = xh.ClassifierImage(
            head["feature_id"], head["layer"], head["alpha"], head["w_norm"],
            TargetInterval(head["zeta_min"], head["zeta_max"]), pts)
    return tables


def _study_cfg(ctx: Context, kind: str, episodes_per_task: int | None = None) -> xh.ExperimentConfig:
    st = ctx.cfg.section("studies")
    return xh.ExperimentConfig(
        kind=kind,
        tasks=tuple(ctx.tasks(st["tasks"])),
        seed=ctx.cfg.seed,
        episodes_per_task=episodes_per_task or st["episodes_per_task"],
        threads=ctx.threads,
    )


def run_study(ctx: Context, name: str) -> None:
    st = ctx.cfg.section("studies")
    weights = ctx.weights()
    obs, best, median = ctx.observers()
    if name in ("gripper", "height", "speed"):
        sec = st[name]
        window = sec.get("window", xh.DEFAULT_WINDOWS[name])
        plans = {}
        for cond in xh.STUDY_CONDITIONS[name]:
            plans[cond] = xh.resolve_entries(sec[cond], obs, best, 0, window, median, ctx.dt, sec.get("box_margin", 0.8))
        threshold = median if name == "speed" else 0.0
        recs = xh.run_closed_loop_study(weights, name, _study_cfg(ctx, "closed_loop_study"), plans, window, threshold, ctx.dt)
        _write_jsonl(ctx, f"raw/{name}.jsonl", [r.to_json() for r in recs])
        tables = {name: recs}
    elif name == "perturb_sweep":
        sec = st[name]
        episodes = ctx.dataset()
        stride = max(1, len(episodes) // sec["episodes"])
        chosen = episodes[::stride][: sec["episodes"]]
        rows = xh.run_perturb_sweep(weights, chosen, obs, sec["features"], sec["alphas"], ctx.threads)
        _write_jsonl(ctx, "raw/perturb_sweep.jsonl", [r.__dict__ for r in rows])
        tables = {name: rows}
    elif name == "classifier_image":
        sec = st[name]
        layer = best[sec["feature"]] if sec["layer"] == "best" else sec["layer"]
        if (sec["feature"], layer) not in obs:
            raise ConfigurationError(f"no observer for {sec['feature']} at layer {layer}")
        img = xh.run_classifier_image(weights, obs[(sec["feature"], layer)],
                                      _study_cfg(ctx, "classifier_image", sec["episodes_per_task"]), sec["alpha"], dt=ctx.dt)
        head = {"feature_id": img.feature_id, "layer": img.layer, "alpha": img.alpha, "w_norm": img.w_norm,
                "zeta_min": img.target.zeta_min, "zeta_max": img.target.zeta_max}
        _write_jsonl(ctx, "raw/classifier_image.jsonl", [head] + [p.__dict__ for p in img.points])
        tables = {name: img}
    else:
        raise ConfigurationError(f"unknown study {name!r}; available: {list(STUDY_NAMES) + ['all']}")
    for rel, text in xh.summarize(tables).items():
        ctx.write_text(rel, text)


def cmd_study(ctx: Context, name: str) -> int:
    names = list(STUDY_NAMES) if name == "all" else [name]
    for n in names:
        if n not in STUDY_NAMES:
            raise ConfigurationError(f"unknown study {n!r}; available: {list(STUDY_NAMES) + ['all']}")
    for n in names:
        run_study(ctx, n)
        print(f"study: {n} done")
    return EXIT_OK


def _md_table(header, rows) -> str:
    def cell(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cell(v) for v in r) + " |" for r in rows]
    return "\n".join(lines)


def cmd_report(ctx: Context) -> int:
    tables = load_raw(ctx.out)
    if not tables:
        missing = [f"raw/{n}.jsonl" for n in STUDY_NAMES]
        raise MissingArtifactError(f"nothing to report under {ctx.out}; missing inputs: {missing}")
    files = xh.summarize(tables)
    for rel, text in files.items():
        ctx.write_text(rel, text)
    parts = ["# Results summary", ""]
    pol = ctx.out / "policy" / "summary.json"
    if pol.exists():
        s = json.loads(pol.read_text())
        parts += ["## Policy", "", _md_table(["held-out MSE", "baseline MSE", "success rate"],
                                             [(s["heldout_action_mse"], s["mean_baseline_mse"], s["success_rate"])]), ""]
    for study in ("gripper", "height", "speed"):
        if study in tables:
            pts = xh.tradeoff_points(tables[study])
            parts += [f"## {study}", "", _md_table(
                ["condition", "method", "success", "physical satisfaction", "observed satisfaction"],
                [(p.condition, p.method, p.success_mean, p.satisfaction_mean, p.observed_satisfaction) for p in pts]), ""]
    if "perturb_sweep" in tables:
        rho, depth = xh.sweep_statistics(tables["perturb_sweep"])
        parts += ["## Perturbation sweep", "", f"min Spearman rho over layers: {min(rho.values()):.3f}; "
                  f"norm vs depth rho: {depth:.3f}", ""]
    ctx.write_text("report.md", "\n".join(parts))
    print(f"report: wrote {len(files) + 1} files under {ctx.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actuate", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file (defaults when omitted)")
        p.add_argument("--out", default=None, help="results directory (default: $ACTUATE_RESULTS_DIR or ./results)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for rollouts")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        return p

    common(sub.add_parser("gen-data", help="roll out the expert and store episodes with activations"))
    common(sub.add_parser("fit-policy", help="fit the action head (with dataset aggregation)"))
    common(sub.add_parser("train-probes", help="train observers for every (feature, layer)"))
    p = common(sub.add_parser("steer", help="run steered rollouts from a plan"))
    p.add_argument("--plan", default=None, help="JSON plan file (default: the config's steer.plan)")
    p = common(sub.add_parser("study", help="run one experiment end to end"))
    p.add_argument("name", help=f"one of {list(STUDY_NAMES) + ['all']}")
    common(sub.add_parser("report", help="summarize raw study outputs into tables and plots"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed)
        out = Path(args.out or os.environ.get("ACTUATE_RESULTS_DIR") or "results")
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise ConfigurationError(f"output directory {out} is not writable")
        ctx = Context(cfg, out, args.threads)
        cmd = args.command
        if cmd == "gen-data":
            code = cmd_gen_data(ctx)
        elif cmd == "fit-policy":
            code = cmd_fit_policy(ctx)
        elif cmd == "train-probes":
            code = cmd_train_probes(ctx)
        elif cmd == "steer":
            code = cmd_steer(ctx, args.plan)
        elif cmd == "study":
            code = cmd_study(ctx, args.name)
            cmd = f"study:{args.name}"
        else:
            code = cmd_report(ctx)
        update_manifest(out, cfg, cmd, ctx.written)
        return code
    except (MissingArtifactError, DatasetFormatError, WeightsFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SingularSystemError, ObserverError, UnobservableError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
