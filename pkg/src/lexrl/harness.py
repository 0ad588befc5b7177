"""Experiment protocols: episodes-to-convergence scaling sweeps and the GridNav safety study."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lexoracle import evaluate_policy_exact
from .metrics import MetricsSeries
from .momdp import (GridNavConfig, Momdp, RandomMomdpConfig, build_gridnav, categorical_from_uniform,
                    generate_random_momdp, transition_from_draws)
from .policy_based import PblrlConfig, run_pblrl
from .value_based import RULES, StepSizeSchedule, ExplorationSchedule, ToleranceSpec, VblrlConfig, greedy_policy, run_vblrl

VB_ALGORITHMS = tuple(RULES)
PB_ALGORITHMS = ("la2c", "lppo")
ALGORITHMS = VB_ALGORITHMS + PB_ALGORITHMS
BASELINE = "baseline"


# -- convergence --------------------------------------------------------------

def detect_convergence(series, window: int = 50, rel_threshold: float = 0.05):
    """First episode ``e >= window`` at which the running mean return is stable.

    The running mean at episode e is the average, over the last ``window``
    episodes up to e (fewer at the start), of the per-episode return averaged
    across objectives. Stability means its
    ``(max - min) / max(1, |mean|)`` over episodes ``(e - window, e]`` is below
    ``rel_threshold``. Returns a 1-based episode index or None.
    """
    if window < 2:
        raise ValueError("window must be at least 2")
    returns = series.returns if isinstance(series, MetricsSeries) else np.asarray(series, dtype=float)
    if returns.ndim == 1:
        returns = returns[:, None]
    n = returns.shape[0]
    if n < window:
        return None
    per_ep = returns.mean(axis=1)
    csum = np.concatenate([[0.0], np.cumsum(per_ep)])
    ends = np.arange(1, n + 1)
    starts = np.maximum(0, ends - window)
    running = (csum[ends] - csum[starts]) / (ends - starts)
    win = np.lib.stride_tricks.sliding_window_view(running, window)
    swing = (win.max(axis=1) - win.min(axis=1)) / np.maximum(1.0, np.abs(win.mean(axis=1)))
    hits = np.nonzero(swing < rel_threshold)[0]
    return int(hits[0]) + window if hits.size else None


# -- records ------------------------------------------------------------------

@dataclass
class RunRecord:
    algorithm: str
    env: str
    seed: int
    config_digest: str
    m: int
    states: int
    actions: int
    episodes_to_convergence: int | None
    wall_seconds: float | None
    j: np.ndarray
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.error is not None


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {"__type__": type(obj).__name__,
                **{f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return format(float(obj), ".17g")
    return obj


def config_digest(obj) -> str:
    """sha256 over a canonical JSON rendering; floats are serialized with 17 significant digits."""
    text = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint32)[0])


# -- training helpers ---------------------------------------------------------

def _train(algorithm: str, momdp: Momdp, vb: VblrlConfig, pb: PblrlConfig, seed: int):
    """Train one learner; return (policy table (S, A), series)."""
    if algorithm in VB_ALGORITHMS:
        cfg = dataclasses.replace(vb, update_rule=algorithm, seed=seed)
        res = run_vblrl(momdp, cfg)
        return greedy_policy(res.greedy_sets), res.series
    if algorithm in PB_ALGORITHMS:
        cfg = dataclasses.replace(pb, objective="a2c" if algorithm == "la2c" else "ppo", seed=seed)
        res = run_pblrl(momdp, cfg)
        return res.params.table(), res.series
    raise ValueError(f"unknown algorithm {algorithm!r}")


def _learner_config(algorithm: str, vb: VblrlConfig, pb: PblrlConfig):
    if algorithm in VB_ALGORITHMS:
        return dataclasses.replace(vb, update_rule=algorithm, seed=0)
    return dataclasses.replace(pb, objective="a2c" if algorithm == "la2c" else "ppo", seed=0)


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


# -- scaling ------------------------------------------------------------------

def default_vb_config() -> VblrlConfig:
    return VblrlConfig(
        update_rule="lexq",
        bandit_tolerance=ToleranceSpec.constant(0.01),
        step_size=StepSizeSchedule("visit_power", 1.0, 0.65),
        exploration=ExplorationSchedule("visit_power", 1.0, 0.2),
        max_steps=100_000,
    )


@dataclass(frozen=True)
class ScalingExperimentConfig:
    states: int = 64
    actions: int = 4
    objective_counts: tuple = (1, 2, 4)
    momdps_per_cell: int = 30
    algorithm: str = "lexq"
    vb: VblrlConfig = field(default_factory=default_vb_config)
    pb: PblrlConfig = field(default_factory=PblrlConfig)
    density: float = 0.05
    reward_noise_sigma: float = 0.2
    horizon: int = 100
    discount: float = 0.9
    window: int = 50
    rel_threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.states not in (64, 128, 256, 512):
            raise ValueError("states must be one of 64, 128, 256, 512")
        if self.momdps_per_cell < 1:
            raise ValueError("momdps_per_cell must be at least 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {', '.join(ALGORITHMS)}")
        if not self.objective_counts or min(self.objective_counts) < 1:
            raise ValueError("objective_counts must be nonempty positive integers")
        if self.window < 2:
            raise ValueError("window must be at least 2")


def _scaling_task(args):
    cfg, m, k = args
    mseed = derive_seed(cfg.seed, cfg.states, k)
    lseed = derive_seed(cfg.seed, cfg.states, m, k)
    env = f"random(S={cfg.states},A={cfg.actions},m={m},seed={mseed})"
    gen = RandomMomdpConfig(cfg.states, cfg.actions, m, seed=mseed, density=cfg.density,
                            reward_noise_sigma=cfg.reward_noise_sigma, horizon=cfg.horizon,
                            discount=cfg.discount)
    learner = _learner_config(cfg.algorithm, cfg.vb, cfg.pb)
    digest = config_digest({"algorithm": cfg.algorithm, "env": gen, "learner": learner,
                            "detector": [cfg.window, cfg.rel_threshold]})
    started = time.perf_counter()
    try:
        momdp = generate_random_momdp(gen)
        policy, series = _train(cfg.algorithm, momdp, cfg.vb, cfg.pb, lseed)
        conv = detect_convergence(series, cfg.window, cfg.rel_threshold)
        j = evaluate_policy_exact(momdp, policy)
        err = None
    except Exception as exc:  # recorded, never aborts the sweep
        series, conv, j, err = MetricsSeries.empty(m), None, np.zeros(0), f"{type(exc).__name__}: {exc}"
    rec = RunRecord(cfg.algorithm, env, lseed, digest, m, cfg.states, cfg.actions, conv,
                    time.perf_counter() - started, j, err)
    return rec, series


def run_scaling_experiment(config: ScalingExperimentConfig, threads: int = 1):
    """Train on ``momdps_per_cell`` random MOMDPs per objective count.

    The MOMDP for index k depends only on (seed, states, k), so cells with
    different m share transitions and their leading reward channels.
    Returns ``(records, series)`` in (m, k) order regardless of ``threads``.
    """
    tasks = [(config, m, k) for m in config.objective_counts for k in range(config.momdps_per_cell)]
    out = _map(_scaling_task, tasks, threads)
    return [r for r, _ in out], [s for _, s in out]


def median_episodes(records, m: int):
    vals = [r.episodes_to_convergence for r in records if r.m == m and r.episodes_to_convergence is not None]
    return float(np.median(vals)) if vals else None


# -- safety -------------------------------------------------------------------

def rollout_policy(momdp: Momdp, policy: np.ndarray, episodes: int, rng: np.random.Generator,
                   max_len: int | None = None):
    """Sample ``episodes`` fresh episodes; returns (returns (E, m), reached-terminal flags (E,))."""
    policy = np.asarray(policy, dtype=float)
    cdfs = np.cumsum(policy, axis=1)
    limit = max_len or momdp.episode_horizon or 1000
    rets = np.zeros((episodes, momdp.num_objectives))
    reached = np.zeros(episodes, dtype=bool)
    for e in range(episodes):
        s = categorical_from_uniform(momdp.initial_cdf, rng.random())
        for step in range(limit):
            a = categorical_from_uniform(cdfs[s], rng.random())
            rec = transition_from_draws(momdp, s, a, rng.random(), rng.standard_normal(momdp.num_objectives), step)
            rets[e] += rec.rewards
            if rec.terminal:
                reached[e] = True
                break
            s = rec.next_state
    return rets, reached


def default_safety_vb() -> VblrlConfig:
    return VblrlConfig(
        update_rule="lexq",
        bandit_tolerance=ToleranceSpec.constant(0.5),
        step_size=StepSizeSchedule("visit_power", 1.0, 0.65),
        exploration=ExplorationSchedule("visit_power", 1.0, 0.2),
        max_steps=300_000,
    )


def default_safety_pb() -> PblrlConfig:
    # slower rate decay: the 144-cell grid needs far more steps than the small instances
    return PblrlConfig(rate_scale=10_000.0, max_steps=1_000_000)


@dataclass(frozen=True)
class SafetyExperimentConfig:
    gridnav: GridNavConfig = field(default_factory=GridNavConfig)
    algorithms: tuple = ("lexq", "la2c", "lppo", BASELINE)
    seeds: int = 10
    vb: VblrlConfig = field(default_factory=default_safety_vb)
    pb: PblrlConfig = field(default_factory=default_safety_pb)
    baseline_algorithm: str = "lexq"
    eval_episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        bad = [a for a in self.algorithms if a not in ALGORITHMS and a != BASELINE]
        if bad:
            raise ValueError(f"unknown algorithms {bad}")
        if self.baseline_algorithm not in ALGORITHMS:
            raise ValueError(f"unknown baseline algorithm {self.baseline_algorithm!r}")
        if self.seeds < 1 or self.eval_episodes < 1:
            raise ValueError("seeds and eval_episodes must be at least 1")


def _safety_task(args):
    cfg, algorithm, k = args
    grid = build_gridnav(cfg.gridnav)
    full = grid.momdp
    lseed = derive_seed(cfg.seed, k)
    train_alg = cfg.baseline_algorithm if algorithm == BASELINE else algorithm
    momdp = full.with_objectives([1]) if algorithm == BASELINE else full
    env = f"gridnav(side={cfg.gridnav.grid_side},seed={cfg.gridnav.seed})"
    learner = _learner_config(train_alg, cfg.vb, cfg.pb)
    digest = config_digest({"algorithm": algorithm, "env": cfg.gridnav, "learner": learner,
                            "eval_episodes": cfg.eval_episodes})
    started = time.perf_counter()
    try:
        policy, series = _train(train_alg, momdp, cfg.vb, cfg.pb, lseed)
        j = evaluate_policy_exact(full, policy)
        rets, reached = rollout_policy(full, policy, cfg.eval_episodes,
                                       np.random.default_rng(derive_seed(cfg.seed, k, 1)))
        extra = {"mean_cost": float(-rets[:, 0].mean()), "mean_reward": float(rets[:, 1].mean()),
                 "goal_rate": float(reached.mean())}
        err = None
    except Exception as exc:
        series, j, extra, err = MetricsSeries.empty(momdp.num_objectives), np.zeros(0), {}, \
            f"{type(exc).__name__}: {exc}"
    rec = RunRecord(algorithm, env, lseed, digest, momdp.num_objectives, full.num_states, full.num_actions,
                    None, time.perf_counter() - started, j, err, extra)
    return rec, series


def run_safety_experiment(config: SafetyExperimentConfig, threads: int = 1):
    """Train every algorithm on ``seeds`` learner seeds; objective order is (-cost, reward).

    The baseline sees only the reward channel; all policies are evaluated on the
    full MOMDP over ``eval_episodes`` fresh episodes.
    """
    tasks = [(config, a, k) for a in config.algorithms for k in range(config.seeds)]
    out = _map(_safety_task, tasks, threads)
    return [r for r, _ in out], [s for _, s in out]


def safety_summary(records):
    """Mean evaluation cost, reward and per-seed goal rates by algorithm."""
    out = {}
    for alg in dict.fromkeys(r.algorithm for r in records):
        rs = [r for r in records if r.algorithm == alg and not r.failed]
        out[alg] = {
            "mean_cost": float(np.mean([r.extra["mean_cost"] for r in rs])) if rs else float("nan"),
            "mean_reward": float(np.mean([r.extra["mean_reward"] for r in rs])) if rs else float("nan"),
            "goal_rates": [r.extra["goal_rate"] for r in rs],
            "failures": sum(r.failed for r in records if r.algorithm == alg),
        }
    return out


# -- persistence --------------------------------------------------------------

def _g(x) -> str:
    return format(float(x), ".17g")


def runs_header(max_m: int) -> list[str]:
    return (["algorithm", "env", "seed", "config_digest", "m", "states", "actions",
             "episodes_to_convergence", "wall_seconds"] + [f"j_{i + 1}" for i in range(max_m)])


def write_metrics_csv(records, series, out_dir, include_timing: bool = False) -> list[Path]:
    """Write runs.csv plus one series_<digest>_<seed>.csv per run; returns the paths written.

    wall_seconds is left empty unless ``include_timing`` so reruns stay byte-identical.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    max_m = max((r.m for r in records), default=1)
    paths = [out / "runs.csv"]
    try:
        with open(paths[0], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(runs_header(max_m))
            for r in records:
                conv = "none" if r.episodes_to_convergence is None else str(r.episodes_to_convergence)
                wall = _g(r.wall_seconds) if include_timing and r.wall_seconds is not None else ""
                js = [_g(x) for x in r.j] + [""] * (max_m - len(r.j))
                w.writerow([r.algorithm, r.env, r.seed, r.config_digest, r.m, r.states, r.actions, conv, wall, *js])
        for r, s in zip(records, series):
            p = out / f"series_{r.config_digest}_{r.seed}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["episode", "length"] + [f"ret_{i + 1}" for i in range(s.num_objectives)] + ["global_step"])
                for e in range(s.num_episodes):
                    w.writerow([e + 1, int(s.lengths[e]), *(_g(x) for x in s.returns[e]), int(s.global_step[e])])
            paths.append(p)
    except OSError as exc:
        raise OSError(f"failed writing metrics under {out}: {exc}") from exc
    return paths


def read_runs_csv(path) -> list[RunRecord]:
    recs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            js = [float(row[k]) for k in row if k.startswith("j_") and row[k] != ""]
            conv = row["episodes_to_convergence"]
            recs.append(RunRecord(
                row["algorithm"], row["env"], int(row["seed"]), row["config_digest"], int(row["m"]),
                int(row["states"]), int(row["actions"]), None if conv == "none" else int(conv),
                float(row["wall_seconds"]) if row["wall_seconds"] else None, np.array(js)))
    return recs


def write_safety_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "seed", "mean_cost", "mean_reward", "goal_rate", "error"])
        for r in records:
            vals = [_g(r.extra[k]) if k in r.extra else "" for k in ("mean_cost", "mean_reward", "goal_rate")]
            w.writerow([r.algorithm, r.seed, *vals, r.error or ""])
    return path
