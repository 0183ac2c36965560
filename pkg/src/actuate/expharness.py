"""Desk-scale experiments: probe report, perturbation sweep, classifier image
and the closed-loop constraint studies, plus their summaries.

Every run function returns plain records (dataclasses or tuples) that can be
persisted as raw JSONL; ``summarize`` turns those records into CSV tables
and SVG plots and never touches the model again.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .numkit import ConfigurationError, Rng, derive_seed
from .observer import (
    Observer,
    ProbeReport,
    best_layer,
    collect_pairs,
    evaluate_observer,
    feature,
    raw_labels,
    robustness_check,
    split_episodes,
    train_observer,
)
from .polnet import Episode, TransformerWeights, encode
from .runtime import EMPTY_PLAN, PlanEntry, SteeringPlan, steered_forward, steered_rollout
from .simworld import DT, TaskSpec
from .steer import TargetInterval, physical_target

KINDS = ("probe_report", "perturb_sweep", "classifier_image", "closed_loop_study")
METHODS = ("none", "prompting", "control")
ZETA_TOL = 1e-9

# prompting swaps the instruction token; gripper conditions also pick the start aperture
PROMPTS = {
    ("gripper", "open"): "open",
    ("gripper", "closed"): "closed",
    ("height", "below"): "low",
    ("height", "above"): "high",
    ("speed", "below"): "slow",
    ("speed", "above"): "fast",
}
INIT_GRIPPER = {("gripper", "open"): 0.0, ("gripper", "closed"): 1.0}
DEFAULT_WINDOWS = {"gripper": None, "height": 15, "speed": 25}
ACTION_INDEX = {
    "action_dx": 0,
    "action_dy": 1,
    "action_dz": 2,
    "action_droll": 3,
    "action_dpitch": 4,
    "action_dyaw": 5,
    "action_gripper": 6,
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    tasks: tuple[TaskSpec, ...]
    seed: int = 0
    episodes_per_task: int = 10
    feature: str | None = None
    alphas: tuple[float, ...] = ()
    targets: dict = field(default_factory=dict)
    methods: tuple[str, ...] = METHODS
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.episodes_per_task < 1:
            raise ConfigurationError("episodes per task must be >= 1")
        if not all(math.isfinite(a) for a in self.alphas):
            raise ConfigurationError("alpha grid must be finite")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; expected a subset of {METHODS}")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def env_seeds(self, stream: int) -> list[tuple[int, TaskSpec, int]]:
        """(task index, task, env seed) for every rollout slot, shared by all methods."""
        return [
            (i, t, derive_seed(self.seed, stream, i, k) & 0x7FFFFFFF)
            for i, t in enumerate(self.tasks)
            for k in range(self.episodes_per_task)
        ]


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- probe report


@dataclass
class ProbeBundle:
    reports: list[ProbeReport]
    observers: dict[tuple[str, int], Observer]
    shuffled: list[tuple[str, int, float, float]]  # feature, layer, mae, baseline mae
    robustness: list[tuple[str, int, float, float, float]]  # feature, layer, eps, max delta, eps*||W||

    @property
    def best_layers(self) -> dict[str, int]:
        return {r.feature_id: r.best_layer for r in self.reports}


def run_probe_report(
    episodes: Sequence[Episode],
    features: Iterable[str],
    layers: Iterable[int],
    lam: float = 1e-2,
    holdout: float = 0.2,
    seed: int = 0,
    eps_grid: Sequence[float] = (0.01, 0.1, 1.0),
    trials: int = 1000,
) -> ProbeBundle:
    """Train an observer for every (feature, layer), evaluate on held-out episodes.

    Labels are normalized with statistics from the training split only.
    The negative control refits each continuous feature at its best layer
    on permuted training labels.
    """
    if not episodes:
        raise ConfigurationError("probe report needs a non-empty dataset")
    layers = sorted(layers)
    tr, va = split_episodes(len(episodes), seed, holdout)
    train = [episodes[i] for i in tr]
    val = [episodes[i] for i in va]
    reports, observers, shuffled, robust = [], {}, [], []
    for name in features:
        spec = feature(name)
        spec = spec.fitted(raw_labels(train, spec))
        key = "mae" if spec.kind == "continuous" else "accuracy"
        metrics = {}
        for l in layers:
            obs = train_observer(collect_pairs(train, l, spec), spec.kind, lam, l, spec)
            metrics[l] = evaluate_observer(obs, collect_pairs(val, l, spec))
            observers[(name, l)] = obs
            x_val = collect_pairs(val, l, spec)[0]
            for i, eps in enumerate(eps_grid):
                delta = robustness_check(obs, x_val, eps, trials, seed=derive_seed(seed, l, i))
                robust.append((name, l, float(eps), delta, float(eps) * obs.w_norm))
        bl = best_layer({l: metrics[l][key] for l in layers}, spec.kind)
        rob = [(e, d) for f, l, e, d, _ in robust if f == name and l == bl]
        reports.append(ProbeReport(name, spec.kind, metrics, bl, rob))
        if spec.kind == "continuous":
            x_tr, z_tr = collect_pairs(train, bl, spec)
            perm = np.argsort(Rng(derive_seed(seed, 99, bl)).uniforms(len(z_tr)), kind="stable")
            ctrl = train_observer((x_tr, z_tr[perm]), spec.kind, lam, bl, spec)
            m = evaluate_observer(ctrl, collect_pairs(val, bl, spec))
            shuffled.append((name, bl, m["mae"], m["baseline_mae"]))
    return ProbeBundle(reports, observers, shuffled, robust)


def training_median_speed(episodes: Sequence[Episode]) -> float:
    labels = raw_labels(episodes, feature("speed"))
    if labels.size == 0:
        raise ConfigurationError("no transitions to take a median speed from")
    return float(np.median(labels))


# ---------------------------------------------------------------- plan specs


def resolve_entries(
    specs: Sequence[dict],
    observers: dict[tuple[str, int], Observer],
    best_layers: dict[str, int],
    window_start: int = 0,
    window_len: int | None = None,
    median_speed: float | None = None,
    dt: float = DT,
    box_margin: float = 0.8,
) -> tuple[PlanEntry, ...]:
    """Turn JSON-style entry specs into PlanEntries.

    Bounds ``low``/``high`` are physical (probabilities for binary
    features); ``"median"`` stands for the training-median speed. The
    ``speed_box`` pseudo-feature bounds each translation component by
    ``margin * median * dt / sqrt(3)``, a box inside the speed ball.
    """
    out = []
    for s in specs:
        name = s["feature"]
        layer = s.get("layer", "best")
        layers = s.get("layers", [layer])
        ws = s.get("window_start", window_start)
        wl = s.get("window_len", window_len)
        mode = s.get("mode", "minimal")
        alpha = float(s.get("alpha", 0.0))

        def lookup(fid, l):
            l = best_layers[fid] if l == "best" else l
            try:
                return observers[(fid, l)]
            except KeyError:
                raise ConfigurationError(f"no trained observer for feature {fid!r} at layer {l}") from None

        if name == "speed_box":
            if median_speed is None:
                raise ConfigurationError("speed_box needs the training-median speed")
            bound = box_margin * median_speed * dt / math.sqrt(3.0)
            for comp in ("action_dx", "action_dy", "action_dz"):
                for l in layers:
                    obs = lookup(comp, l)
                    out.append(PlanEntry(obs, physical_target(obs, -bound, bound), frozenset({obs.layer}), ws, wl))
            continue

        def bound(v, default):
            if v is None:
                return default
            if v == "median":
                if median_speed is None:
                    raise ConfigurationError("'median' bound needs the training-median speed")
                return median_speed
            return float(v)

        for l in layers:
            obs = lookup(name, l)
            target = None
            if mode == "minimal":
                target = physical_target(obs, bound(s.get("low"), -math.inf), bound(s.get("high"), math.inf))
            elif "low" in s or "high" in s:
                target = physical_target(obs, bound(s.get("low"), -math.inf), bound(s.get("high"), math.inf))
            out.append(PlanEntry(obs, target, frozenset({obs.layer}), ws, wl, mode, alpha))
    return tuple(out)


def observe_twin(entries: Sequence[PlanEntry]) -> SteeringPlan:
    """Same observers and windows, but observe-only: rollouts stay bit-identical to unsteered ones."""
    return SteeringPlan(tuple(PlanEntry(e.observer, e.target, e.layers, e.window_start, e.window_len, "observe") for e in entries))


def observed_satisfaction(ep: Episode, entries: Sequence[PlanEntry]) -> float:
    """Fraction of in-window (step, entry) readings whose post-control zeta lies in the target."""
    targets = {}
    for e in entries:
        if e.target is None:
            continue
        for l in e.layers:
            targets[(e.observer.feature_id, l)] = (e, e.target)
    hits = total = 0
    for log in ep.logs:
        for rec in log.entries:
            hit = targets.get((rec.feature_id, rec.layer))
            if hit is None or not hit[0].in_window(log.step_index):
                continue
            total += 1
            hits += hit[1].contains(rec.post_zeta, ZETA_TOL)
    return hits / total if total else float("nan")


# ---------------------------------------------------------------- closed-loop studies


def window_values(study: str, ep: Episode, window: int | None) -> list[float]:
    """The realized physical feature on every in-window step.

    gripper: aperture after each step; height: z after each step minus the
    initial z; speed: translation per step over dt.
    """
    n = ep.n_steps if window is None else min(window, ep.n_steps)
    if study == "gripper":
        return [ep.states[t + 1].robot.gripper for t in range(n)]
    if study == "height":
        z0 = ep.states[0].robot.position[2]
        return [ep.states[t + 1].robot.position[2] - z0 for t in range(n)]
    if study == "speed":
        out = []
        for t in range(n):
            a, b = ep.states[t].robot.position, ep.states[t + 1].robot.position
            out.append(math.sqrt(sum((q - p) ** 2 for p, q in zip(a, b))) / ep.dt)
        return out
    raise ConfigurationError(f"unknown study {study!r}")


def meets(study: str, condition: str, value: float, threshold: float = 0.0) -> bool:
    if study == "gripper":
        return (value >= 0.5) if condition == "closed" else (value < 0.5)
    if study == "height":
        return value < 0.0 if condition == "below" else value > 0.0
    if study == "speed":
        return value <= threshold if condition == "below" else value >= threshold
    raise ConfigurationError(f"unknown study {study!r}")


STUDY_CONDITIONS = {"gripper": ("open", "closed"), "height": ("below", "above"), "speed": ("below", "above")}


@dataclass(frozen=True)
class StudyEpisode:
    study: str
    condition: str
    method: str
    task_id: str
    env_seed: int
    success: bool
    satisfaction: float
    observed_satisfaction: float
    threshold: float
    values: tuple[float, ...]

    def to_json(self) -> dict:
        d = asdict(self)
        d["values"] = list(self.values)
        return d

    @classmethod
    def from_json(cls, rec: dict) -> "StudyEpisode":
        return cls(
            rec["study"], rec["condition"], rec["method"], rec["task_id"], int(rec["env_seed"]), bool(rec["success"]),
            float(rec["satisfaction"]), float(rec["observed_satisfaction"]), float(rec["threshold"]),
            tuple(float(v) for v in rec["values"]),
        )


def run_closed_loop_study(
    weights: TransformerWeights,
    study: str,
    cfg: ExperimentConfig,
    plans: dict[str, tuple[PlanEntry, ...]],
    window: int | None = None,
    threshold: float = 0.0,
    dt: float = DT,
) -> list[StudyEpisode]:
    """Roll out none / prompting / control for each condition of ``study``.

    ``plans`` maps condition -> control entries (already windowed). The
    baselines run the same entries in observe mode so their zeta is logged
    too. All methods share env seeds.
    """
    if study not in STUDY_CONDITIONS:
        raise ConfigurationError(f"unknown study {study!r}; available: {sorted(STUDY_CONDITIONS)}")
    missing = [c for c in STUDY_CONDITIONS[study] if c not in plans]
    if missing:
        raise ConfigurationError(f"study {study}: no control plan for conditions {missing}")
    slots = cfg.env_seeds(stream={"gripper": 11, "height": 12, "speed": 13}[study])
    jobs = []
    for cond in STUDY_CONDITIONS[study]:
        entries = plans[cond]
        control = SteeringPlan(entries)
        control.validate(weights)
        watch = observe_twin(entries)
        for method in cfg.methods:
            instr = PROMPTS[(study, cond)] if method == "prompting" else "default"
            plan = control if method == "control" else watch
            for _, task, seed in slots:
                jobs.append((cond, method, task.with_instruction(instr), seed, plan, entries))

    def one(job):
        cond, method, task, seed, plan, entries = job
        ep = steered_rollout(weights, seed, task, plan, dt, INIT_GRIPPER.get((study, cond)))
        vals = window_values(study, ep, window)
        sat = sum(meets(study, cond, v, threshold) for v in vals) / len(vals) if vals else float("nan")
        return StudyEpisode(study, cond, method, task.task_id, seed, bool(ep.success), sat,
                            observed_satisfaction(ep, entries), threshold, tuple(vals))

    return _pmap(one, jobs, cfg.threads)


@dataclass(frozen=True)
class TradeoffPoint:
    study: str
    condition: str
    method: str
    n_episodes: int
    success_mean: float
    success_std: float
    satisfaction_mean: float
    satisfaction_std: float
    observed_satisfaction: float

    def __post_init__(self):
        for v in (self.success_mean, self.satisfaction_mean):
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"rate {v} outside [0, 1]")


def tradeoff_points(records: Sequence[StudyEpisode]) -> list[TradeoffPoint]:
    groups: dict[tuple[str, str, str], list[StudyEpisode]] = {}
    for r in records:
        groups.setdefault((r.study, r.condition, r.method), []).append(r)
    out = []
    for (study, cond, method), rs in groups.items():
        succ = np.array([float(r.success) for r in rs])
        sat = np.array([r.satisfaction for r in rs])
        obs = np.array([r.observed_satisfaction for r in rs])
        obs = obs[~np.isnan(obs)]
        out.append(TradeoffPoint(
            study, cond, method, len(rs), float(succ.mean()), float(succ.std()), float(np.nanmean(sat)),
            float(np.nanstd(sat)), float(obs.mean()) if obs.size else float("nan"),
        ))
    return out


def violin_stats(records: Sequence[StudyEpisode]) -> list[tuple]:
    """(study, condition, method, n, mean, median, q25, q75, min, max) over pooled in-window values."""
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.study, r.condition, r.method), []).extend(r.values)
    out = []
    for key, vals in groups.items():
        v = np.array(vals, dtype=np.float64)
        if v.size == 0:
            out.append((*key, 0, *([float("nan")] * 6)))
            continue
        q25, med, q75 = np.percentile(v, [25, 50, 75])
        out.append((*key, int(v.size), float(v.mean()), float(med), float(q25), float(q75), float(v.min()), float(v.max())))
    return out


# ---------------------------------------------------------------- perturbation sweep


@dataclass(frozen=True)
class SweepRow:
    feature_id: str
    layer: int
    alpha: float
    mean_abs_change: float
    mean_norm: float


def run_perturb_sweep(
    weights: TransformerWeights,
    episodes: Sequence[Episode],
    observers: dict[tuple[str, int], Observer],
    features: Sequence[str],
    alphas: Sequence[float],
    threads: int = 1,
) -> list[SweepRow]:
    """Add ``alpha`` times the unit observer direction at one layer and measure the action change.

    For each visited state of ``episodes`` the perturbed and unperturbed
    head outputs are compared on the component the feature names. The
    comparison is made before the actuator clip, so saturation does not
    hide the representation-level effect. The mean activation norm per
    layer comes from the unperturbed passes.
    """
    if not episodes:
        raise ConfigurationError("perturbation sweep needs episodes")
    tokens = [encode(w) for ep in episodes for w in ep.states[: ep.n_steps]]
    last = weights.n_layers
    layers = range(1, last + 1)

    def head_outputs(plan):
        rec = {last: []}
        for tok in tokens:
            steered_forward(weights, tok, plan, 0, rec)
        return np.stack(rec[last]) @ weights.head + weights.head_bias

    record = {l: [] for l in layers}
    for tok in tokens:
        steered_forward(weights, tok, EMPTY_PLAN, 0, record)
    base = np.stack(record[last]) @ weights.head + weights.head_bias
    norms = {l: float(np.mean(np.linalg.norm(np.stack(record[l]), axis=1))) for l in layers}
    jobs = []
    for name in features:
        if name not in ACTION_INDEX:
            raise ConfigurationError(f"sweep feature {name!r} is not an action feature; use one of {sorted(ACTION_INDEX)}")
        for l in layers:
            if (name, l) not in observers:
                raise ConfigurationError(f"no trained observer for feature {name!r} at layer {l}")
            for alpha in alphas:
                jobs.append((name, l, float(alpha)))

    def one(job):
        name, l, alpha = job
        obs = observers[(name, l)]
        plan = SteeringPlan((PlanEntry(obs, None, frozenset({l}), mode="offset", alpha=alpha),))
        idx = ACTION_INDEX[name]
        moved = head_outputs(plan)[:, idx]
        return SweepRow(name, l, alpha, float(np.mean(np.abs(moved - base[:, idx]))), norms[l])

    return _pmap(one, jobs, threads)


def sweep_statistics(rows: Sequence[SweepRow]) -> tuple[dict[tuple[str, int], float], float]:
    """Per (feature, layer) Spearman rho of |change| against |alpha|, and rho of norm against depth."""
    by_key: dict[tuple[str, int], list[SweepRow]] = {}
    for r in rows:
        by_key.setdefault((r.feature_id, r.layer), []).append(r)
    rho = {}
    for key, rs in by_key.items():
        a = [abs(r.alpha) for r in rs]
        c = [r.mean_abs_change for r in rs]
        rho[key] = float(spearmanr(a, c)[0]) if len(set(a)) > 1 and len(set(c)) > 1 else float("nan")
    norms = {}
    for r in rows:
        norms[r.layer] = r.mean_norm
    ls = sorted(norms)
    depth = float(spearmanr(ls, [norms[l] for l in ls])[0]) if len(ls) > 1 else float("nan")
    return rho, depth


# ---------------------------------------------------------------- classifier image


@dataclass(frozen=True)
class ImagePoint:
    condition: str
    task_id: str
    env_seed: int
    step: int
    pre_zeta: float
    zeta: float


@dataclass
class ClassifierImage:
    feature_id: str
    layer: int
    alpha: float
    w_norm: float
    target: TargetInterval
    points: list[ImagePoint]


def run_classifier_image(
    weights: TransformerWeights,
    observer: Observer,
    cfg: ExperimentConfig,
    alpha: float,
    target: TargetInterval | None = None,
    dt: float = DT,
) -> ClassifierImage:
    """Observed zeta at the observer's layer under no steering, a fixed offset, and control.

    Without an explicit target the bounds are the 25th and 75th
    percentiles of the unsteered zeta.
    """
    slots = cfg.env_seeds(stream=21)
    watch = SteeringPlan((PlanEntry(observer, None, mode="observe"),))

    def rollout(plan):
        return _pmap(lambda s: steered_rollout(weights, s[2], s[1], plan, dt), slots, cfg.threads)

    def points(cond, eps):
        out = []
        for (_, task, seed), ep in zip(slots, eps):
            for log in ep.logs:
                for rec in log.entries:
                    out.append(ImagePoint(cond, task.task_id, seed, log.step_index, rec.pre_zeta, rec.post_zeta))
        return out

    none = points("none", rollout(watch))
    if target is None:
        lo, hi = np.percentile([p.zeta for p in none], [25, 75])
        target = TargetInterval(float(lo), float(hi))
    fixed = points("fixed", rollout(SteeringPlan((PlanEntry(observer, target, mode="offset", alpha=alpha),))))
    control = points("control", rollout(SteeringPlan((PlanEntry(observer, target),))))
    return ClassifierImage(observer.feature_id, observer.layer, float(alpha), observer.w_norm, target, none + fixed + control)


# ---------------------------------------------------------------- summary


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for row in rows:
        wr.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


_COLORS = {"none": "#7f7f7f", "prompting": "#1f77b4", "control": "#d62728",
           "fixed": "#2ca02c", "open": "#1f77b4", "closed": "#d62728",
           "below": "#1f77b4", "above": "#d62728"}


def _f(v: float) -> str:
    return f"{v:.2f}"


def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<title>{title}</title>', f'<rect width="{width}" height="{height}" fill="white"/>',
                      *body, "</svg>"]) + "\n"


def _kde(v: np.ndarray, grid: np.ndarray) -> np.ndarray:
    if v.size < 2 or float(v.std()) == 0.0:
        dens = np.zeros_like(grid)
        dens[np.argmin(np.abs(grid - v.mean()))] = 1.0
        return dens
    bw = 1.06 * float(v.std()) * v.size ** (-0.2)
    z = (grid[:, None] - v[None, :]) / bw
    return np.exp(-0.5 * z * z).sum(axis=1)


def violin_svg(records: Sequence[StudyEpisode], study: str) -> str:
    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.condition, r.method), []).extend(r.values)
    keys = [(c, m) for c in STUDY_CONDITIONS[study] for m in METHODS if (c, m) in groups]
    allv = np.array([v for k in keys for v in groups[k]] or [0.0])
    lo, hi = float(allv.min()), float(allv.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    w, h, left, top, bottom = 80 * max(len(keys), 1) + 80, 320, 60, 30, 270
    def y(v):
        return bottom - (v - lo) / (hi - lo) * (bottom - top)
    body = [f'<text x="{left}" y="18">{study}: in-window feature values</text>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
            f'<text x="5" y="{_f(y(hi))}">{hi:.3g}</text>', f'<text x="5" y="{_f(y(lo))}">{lo:.3g}</text>']
    grid = np.linspace(lo, hi, 64)
    for i, (cond, method) in enumerate(keys):
        v = np.array(groups[(cond, method)], dtype=np.float64)
        cx = left + 40 + 80 * i
        dens = _kde(v, grid) if v.size else np.zeros_like(grid)
        dens = dens / dens.max() * 30 if dens.max() > 0 else dens
        right = [f"{_f(cx + d)},{_f(y(g))}" for g, d in zip(grid, dens)]
        leftp = [f"{_f(cx - d)},{_f(y(g))}" for g, d in zip(grid[::-1], dens[::-1])]
        body.append(f'<polygon class="violin" data-condition="{cond}" data-method="{method}" '
                    f'points="{" ".join(right + leftp)}" fill="{_COLORS[cond]}" fill-opacity="0.5" stroke="{_COLORS[cond]}"/>')
        if v.size:
            body.append(f'<circle cx="{cx}" cy="{_f(y(float(v.mean())))}" r="4" fill="white" stroke="black"/>')
            body.append(f'<line x1="{cx - 8}" x2="{cx + 8}" y1="{_f(y(float(np.median(v))))}" '
                        f'y2="{_f(y(float(np.median(v))))}" stroke="black" stroke-width="2"/>')
        body.append(f'<text x="{cx - 30}" y="{bottom + 15}">{method}</text>')
        body.append(f'<text x="{cx - 30}" y="{bottom + 28}">{cond}</text>')
    return _svg(w, h, body, f"{study} violin")


def tradeoff_svg(points: Sequence[TradeoffPoint], study: str) -> str:
    conds = [c for c in STUDY_CONDITIONS[study] if any(p.condition == c for p in points)]
    panel, pad = 260, 40
    body = []
    for j, cond in enumerate(conds):
        x0 = pad + j * (panel + pad)
        body.append(f'<g class="panel" data-condition="{cond}">')
        body.append(f'<rect x="{x0}" y="{pad}" width="{panel}" height="{panel}" fill="none" stroke="black"/>')
        body.append(f'<text x="{x0}" y="{pad - 8}">{study} / {cond}</text>')
        body.append(f'<text x="{x0 + 60}" y="{pad + panel + 28}">constraint satisfaction</text>')
        body.append(f'<text x="{x0 - 30}" y="{pad + panel // 2}" transform="rotate(-90 {x0 - 30} {pad + panel // 2})">success rate</text>')
        for p in points:
            if p.condition != cond:
                continue
            cx = x0 + p.satisfaction_mean * panel
            cy = pad + (1.0 - p.success_mean) * panel
            body.append(f'<ellipse class="method" data-method="{p.method}" cx="{_f(cx)}" cy="{_f(cy)}" '
                        f'rx="{_f(max(p.satisfaction_std * panel, 2.0))}" ry="{_f(max(p.success_std * panel, 2.0))}" '
                        f'fill="{_COLORS[p.method]}" fill-opacity="0.3" stroke="{_COLORS[p.method]}"/>')
            body.append(f'<text x="{_f(cx + 4)}" y="{_f(cy - 4)}">{p.method}</text>')
        body.append("</g>")
    return _svg(pad + len(conds) * (panel + pad), panel + 2 * pad + 20, body, f"{study} tradeoff")


def sweep_svg(rows: Sequence[SweepRow]) -> str:
    feats = sorted({r.feature_id for r in rows})
    layers = sorted({r.layer for r in rows})
    alphas = sorted({r.alpha for r in rows})
    panel_w, panel_h, pad = 320, 180, 50
    body = []
    panels = [(f, [(r.layer, r.alpha, r.mean_abs_change) for r in rows if r.feature_id == f]) for f in feats]
    norm_pts = sorted({(r.layer, r.mean_norm) for r in rows})
    for i, (title, pts) in enumerate(panels + [("activation norm", [(l, 0.0, n) for l, n in norm_pts])]):
        y0 = pad + i * (panel_h + pad)
        top = max([p[2] for p in pts] + [1e-12])
        body.append(f'<g class="panel"><rect x="{pad}" y="{y0}" width="{panel_w}" height="{panel_h}" fill="none" stroke="black"/>')
        body.append(f'<text x="{pad}" y="{y0 - 6}">{title} vs layer (max {top:.3g})</text>')
        def xy(l, v):
            x = pad + (layers.index(l) / max(len(layers) - 1, 1)) * panel_w
            return f"{_f(x)},{_f(y0 + panel_h - v / top * panel_h)}"
        series = sorted({p[1] for p in pts})
        for k, a in enumerate(series):
            line = " ".join(xy(l, v) for l, aa, v in sorted(pts) if aa == a)
            shade = int(200 * (1 - (abs(a) / max(max(abs(x) for x in alphas), 1e-12))))
            body.append(f'<polyline data-alpha="{a!r}" points="{line}" fill="none" stroke="rgb({shade},{shade},255)"/>')
        body.append("</g>")
    return _svg(panel_w + 2 * pad, (len(panels) + 1) * (panel_h + pad) + pad, body, "perturbation sweep")


def image_svg(img: ClassifierImage) -> str:
    w, h, pad = 520, 300, 50
    pts = img.points
    zs = [p.zeta for p in pts] + [img.target.zeta_min, img.target.zeta_max]
    zs = [z for z in zs if math.isfinite(z)]
    lo, hi = min(zs), max(zs)
    if hi - lo < 1e-12:
        lo, hi = lo - 1, hi + 1
    steps = max([p.step for p in pts] + [1])
    def y(z):
        return pad + (hi - z) / (hi - lo) * (h - 2 * pad)
    body = [f'<text x="{pad}" y="20">{img.feature_id} at layer {img.layer}: observed zeta per step</text>']
    if all(math.isfinite(v) for v in (img.target.zeta_min, img.target.zeta_max)):
        body.append(f'<rect class="target" x="{pad}" y="{_f(y(img.target.zeta_max))}" width="{w - 2 * pad}" '
                    f'height="{_f(y(img.target.zeta_min) - y(img.target.zeta_max))}" fill="#ffdd88" fill-opacity="0.4"/>')
    for p in pts:
        x = pad + p.step / steps * (w - 2 * pad)
        body.append(f'<circle cx="{_f(x)}" cy="{_f(y(p.zeta))}" r="1.5" fill="{_COLORS[p.condition if p.condition != "none" else "none"]}"/>')
    return _svg(w, h, body, "classifier image")


STUDY_COLUMNS = ["study", "condition", "method", "n_episodes", "success_mean", "success_std",
                 "satisfaction_mean", "satisfaction_std", "observed_satisfaction"]


def summarize(tables: dict) -> dict[str, str]:
    """Render CSV tables and SVG plots from raw records.

    ``tables`` may hold ``gripper`` / ``height`` / ``speed`` (lists of
    StudyEpisode), ``perturb_sweep`` (SweepRows) and ``classifier_image``
    (a ClassifierImage). Returns {relative path: file text}.
    """
    present = {k: v for k, v in tables.items() if v}
    if not present:
        expected = ["gripper", "height", "speed", "perturb_sweep", "classifier_image"]
        raise ConfigurationError(f"nothing to summarize; missing inputs: {expected}")
    out: dict[str, str] = {}
    for study in ("gripper", "height", "speed"):
        recs = present.get(study)
        if not recs:
            continue
        pts = tradeoff_points(recs)
        out[f"tables/{study}_tradeoff.csv"] = _csv(STUDY_COLUMNS, [
            (p.study, p.condition, p.method, p.n_episodes, p.success_mean, p.success_std,
             p.satisfaction_mean, p.satisfaction_std, p.observed_satisfaction) for p in pts])
        out[f"tables/{study}_violin.csv"] = _csv(
            ["study", "condition", "method", "n", "mean", "median", "q25", "q75", "min", "max"], violin_stats(recs))
        out[f"tables/{study}_episodes.csv"] = _csv(
            ["study", "condition", "method", "task_id", "env_seed", "success", "satisfaction", "observed_satisfaction"],
            [(r.study, r.condition, r.method, r.task_id, r.env_seed, int(r.success), r.satisfaction,
              r.observed_satisfaction) for r in recs])
        out[f"tables/{study}_values.csv"] = _csv(
            ["study", "condition", "method", "task_id", "env_seed", "step", "value"],
            [(r.study, r.condition, r.method, r.task_id, r.env_seed, t, v) for r in recs for t, v in enumerate(r.values)])
        out[f"plots/{study}_violin.svg"] = violin_svg(recs, study)
        out[f"plots/{study}_tradeoff.svg"] = tradeoff_svg(pts, study)
    rows = present.get("perturb_sweep")
    if rows:
        rho, depth = sweep_statistics(rows)
        out["tables/perturb_sweep.csv"] = _csv(["feature_id", "layer", "alpha", "mean_abs_change", "mean_norm"],
                                               [(r.feature_id, r.layer, r.alpha, r.mean_abs_change, r.mean_norm) for r in rows])
        # last row: rank correlation of the mean activation norm with depth
        out["tables/perturb_sweep_stats.csv"] = _csv(
            ["feature_id", "layer", "spearman"],
            [(f, l, v) for (f, l), v in sorted(rho.items())] + [("norm_vs_depth", 0, depth)])
        out["plots/perturb_sweep.svg"] = sweep_svg(rows)
    img = present.get("classifier_image")
    if img:
        out["tables/classifier_image.csv"] = _csv(
            ["condition", "task_id", "env_seed", "step", "pre_zeta", "zeta"],
            [(p.condition, p.task_id, p.env_seed, p.step, p.pre_zeta, p.zeta) for p in img.points])
        summ = []
        for cond in ("none", "fixed", "control"):
            z = [p.zeta for p in img.points if p.condition == cond]
            inside = sum(img.target.contains(v, ZETA_TOL) for v in z)
            summ.append((cond, len(z), inside / len(z) if z else float("nan")))
        out["tables/classifier_image_summary.csv"] = _csv(
            ["condition", "n", "fraction_in_target"], summ + [("target_min", 0, img.target.zeta_min), ("target_max", 0, img.target.zeta_max)])
        out["plots/classifier_image.svg"] = image_svg(img)
    return out
