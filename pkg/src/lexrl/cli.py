"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .harness import (config_digest, median_episodes, run_safety_experiment, run_scaling_experiment,
                      safety_summary, write_metrics_csv, write_safety_csv, RunRecord, _g)
from .lexoracle import evaluate_policy_exact, lex_value_iteration, write_solution
from .momdp import MomdpError, build_gridnav, generate_random_momdp, load, save, tie_momdp
from .policy_based import run_pblrl, write_policy_csv, write_trace_csv
from .value_based import greedy_policy, run_vblrl

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    def flags(suppress: bool):
        # subcommands accept the global flags too, but must not reset values given before them
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        f = argparse.ArgumentParser(add_help=False)
        f.add_argument("--seed", type=int, default=d(None), help="override the master/learner seed in the config")
        f.add_argument("--threads", type=int, default=d(1), help="worker processes for experiment sweeps")
        f.add_argument("--quiet", action="store_true", default=d(False), help="suppress progress output")
        return f

    common = flags(True)
    p = _Parser(prog="lexrl", description="Lexicographic multi-objective RL toolkit", parents=[flags(False)])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    g = sub.add_parser("gen-momdp", parents=[common], help="generate a MOMDP file from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    o = sub.add_parser("oracle", parents=[common], help="solve a MOMDP exactly")
    o.add_argument("--momdp", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--config", default=None)
    for name in ("train-vb", "train-pb"):
        t = sub.add_parser(name, parents=[common], help=f"train a {'value' if name == 'train-vb' else 'policy'}-based learner")
        t.add_argument("--config", required=True)
        t.add_argument("--momdp", required=True)
        t.add_argument("--out", required=True)
    for name in ("scaling", "safety"):
        e = sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
        e.add_argument("--config", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--timing", action="store_true", help="record wall-clock seconds in runs.csv")
    pl = sub.add_parser("plot", parents=[common], help="aggregate runs.csv into plot-ready means and standard errors")
    pl.add_argument("--runs", required=True)
    pl.add_argument("--out", required=True)
    return p


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _read_config(path, sections=None) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise C.ConfigError(f"cannot read config {path}: {exc}") from None
    return C.parse_config(text, sections)


def _apply_seed(cfg: dict, seed, sections):
    if seed is not None:
        for sec in sections:
            cfg[sec]["seed"] = seed


def _write_effective(cfg: dict, where: Path):
    where.write_text(C.serialize_config(cfg), encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_momdp(path):
    try:
        return load(path)
    except OSError as exc:
        raise RuntimeError(f"cannot read MOMDP {path}: {exc}") from None


def _series_csv(series, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "length"] + [f"ret_{i + 1}" for i in range(series.num_objectives)] + ["global_step"])
        for e in range(series.num_episodes):
            w.writerow([e + 1, int(series.lengths[e]), *(_g(x) for x in series.returns[e]), int(series.global_step[e])])


def _json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# -- subcommands ----------------------------------------------------------------

def cmd_gen_momdp(args):
    cfg = _read_config(args.config, ("momdp", "random", "gridnav", "tie"))
    _apply_seed(cfg, args.seed, ("random", "gridnav"))
    kind = cfg["momdp"]["kind"]
    if kind == "random":
        momdp = generate_random_momdp(C.random_momdp_config(cfg))
    elif kind == "gridnav":
        momdp = build_gridnav(C.gridnav_config(cfg)).momdp
    else:
        momdp = tie_momdp(cfg["tie"]["discount"], cfg["tie"]["horizon"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save(momdp, out)
    _write_effective(cfg, out.with_name(out.name + ".effective_config"))
    _log(args, f"wrote {out} ({momdp.num_states} states, {momdp.num_actions} actions, {momdp.num_objectives} objectives)")


def _action_label(a: int) -> str:
    return f"a{a + 1}"


def cmd_oracle(args):
    cfg = _read_config(args.config, ("oracle",)) if args.config else C.parse_config("")
    momdp = _load_momdp(args.momdp)
    sol = lex_value_iteration(momdp, cfg["oracle"]["tie_tol"])
    out = _out_dir(args.out)
    write_solution(sol, out / "q_tables.csv", out / "summary.json")
    _write_effective(cfg, out / "effective_config")
    for s in range(momdp.num_states):
        labels = ", ".join(_action_label(a) for a in sol.optimal_actions(s))
        _log(args, f"state {s}: lex-optimal action(s) {labels}")
    _log(args, "J = " + ", ".join(f"{x:.6g}" for x in sol.j_vector))


def _sets_match(learned: np.ndarray, oracle: np.ndarray) -> np.ndarray:
    return np.all(learned == oracle, axis=1)


def cmd_train_vb(args):
    cfg = _read_config(args.config)
    _apply_seed(cfg, args.seed, ("vb",))
    vb = C.vb_config(cfg)
    momdp = _load_momdp(args.momdp)
    res = run_vblrl(momdp, vb)
    out = _out_dir(args.out)
    with open(out / "q_tables.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["objective", "state", "action", "q_value"])
        m, n_s, n_a = res.q.q.shape
        for i in range(m):
            for s in range(n_s):
                for a in range(n_a):
                    w.writerow([i + 1, s, a, _g(res.q.q[i, s, a])])
    _series_csv(res.series, out / "series.csv")
    policy = greedy_policy(res.greedy_sets)
    sol = lex_value_iteration(momdp, cfg["oracle"]["tie_tol"])
    match = _sets_match(res.greedy_sets[-1], sol.action_sets[-1])
    j = evaluate_policy_exact(momdp, policy)
    report = {
        "config_digest": config_digest(cfg),
        "states_matching_oracle": int(match.sum()),
        "num_states": int(momdp.num_states),
        "match_fraction": float(match.mean()),
        "mismatched_states": [int(s) for s in np.nonzero(~match)[0]],
        "learned_sets": [[int(a) for a in np.nonzero(row)[0]] for row in res.greedy_sets[-1]],
        "oracle_sets": [sol.optimal_actions(s) for s in range(momdp.num_states)],
        "j_learned": [float(x) for x in j],
        "j_oracle": [float(x) for x in sol.j_vector],
        "steps": res.series.extra["steps"],
        "episodes": int(res.series.num_episodes),
    }
    _json(report, out / "match_report.json")
    _write_effective(cfg, out / "effective_config")
    _log(args, f"greedy sets match the oracle in {report['states_matching_oracle']}/{momdp.num_states} states")


def cmd_train_pb(args):
    cfg = _read_config(args.config)
    _apply_seed(cfg, args.seed, ("pb",))
    pb = C.pb_config(cfg)
    momdp = _load_momdp(args.momdp)
    res = run_pblrl(momdp, pb)
    out = _out_dir(args.out)
    write_policy_csv(res.params, out / "policy.csv")
    write_trace_csv(res.trace, out / "trace.csv")
    _series_csv(res.series, out / "series.csv")
    sol = lex_value_iteration(momdp, cfg["oracle"]["tie_tol"])
    j = evaluate_policy_exact(momdp, res.params.table())
    report = {
        "config_digest": config_digest(cfg),
        "j_learned": [float(x) for x in j],
        "j_oracle": [float(x) for x in sol.j_vector],
        "multipliers": [float(x) for x in res.multipliers.lam],
        "converged_objectives": [int(i) + 1 for i in np.nonzero(res.series.extra["converged"])[0]],
        "steps": res.series.extra["steps"],
        "episodes": int(res.series.num_episodes),
    }
    _json(report, out / "report.json")
    _write_effective(cfg, out / "effective_config")
    _log(args, "J learned = " + ", ".join(f"{x:.6g}" for x in j) + "; oracle = " +
         ", ".join(f"{x:.6g}" for x in sol.j_vector))


def cmd_scaling(args):
    cfg = _read_config(args.config)
    _apply_seed(cfg, args.seed, ("scaling",))
    sc = C.scaling_config(cfg)
    records, series = run_scaling_experiment(sc, threads=args.threads)
    out = _out_dir(args.out)
    write_metrics_csv(records, series, out, include_timing=args.timing)
    _write_effective(cfg, out / "effective_config")
    for m in sc.objective_counts:
        _log(args, f"m={m}: median episodes to convergence {median_episodes(records, m)}")
    _report_failures(args, records)


def cmd_safety(args):
    cfg = _read_config(args.config)
    _apply_seed(cfg, args.seed, ("safety",))
    sc = C.safety_config(cfg)
    records, series = run_safety_experiment(sc, threads=args.threads)
    out = _out_dir(args.out)
    write_metrics_csv(records, series, out, include_timing=args.timing)
    write_safety_csv(records, out / "safety.csv")
    _write_effective(cfg, out / "effective_config")
    for alg, row in safety_summary(records).items():
        _log(args, f"{alg}: mean cost {row['mean_cost']:.4g}, mean reward {row['mean_reward']:.4g}")
    _report_failures(args, records)


def _report_failures(args, records):
    for r in records:
        if r.failed:
            print(f"run {r.algorithm} seed {r.seed} failed: {r.error}", file=sys.stderr)


def _mean_se(vals):
    vals = np.asarray(vals, dtype=float)
    if vals.size == 0:
        return "", ""
    se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0.0
    return _g(vals.mean()), _g(se)


def cmd_plot(args):
    from .harness import read_runs_csv
    try:
        records = read_runs_csv(args.runs)
    except (OSError, KeyError, ValueError) as exc:
        raise RuntimeError(f"cannot read runs file {args.runs}: {exc}") from None
    groups: dict[tuple[str, int], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.algorithm, r.m), []).append(r)
    max_m = max((len(r.j) for r in records), default=0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["algorithm", "m", "runs", "converged_runs", "episodes_mean", "episodes_se"]
        for i in range(max_m):
            head += [f"j_{i + 1}_mean", f"j_{i + 1}_se"]
        w.writerow(head)
        for (alg, m), rs in sorted(groups.items()):
            eps = [r.episodes_to_convergence for r in rs if r.episodes_to_convergence is not None]
            row = [alg, m, len(rs), len(eps), *_mean_se(eps)]
            for i in range(max_m):
                row += list(_mean_se([r.j[i] for r in rs if len(r.j) > i]))
            w.writerow(row)
    _log(args, f"wrote {out} ({len(groups)} groups)")


COMMANDS = {
    "gen-momdp": cmd_gen_momdp, "oracle": cmd_oracle, "train-vb": cmd_train_vb, "train-pb": cmd_train_pb,
    "scaling": cmd_scaling, "safety": cmd_safety, "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"lexrl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.threads < 1:
        print("lexrl: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MomdpError, RuntimeError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
