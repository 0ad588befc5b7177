"""Strict INI-style experiment configs.

Documents hold ``[section]`` headers and ``key = value`` lines; ``#`` starts a
comment. Every key has a documented type and default, unknown sections or keys
are errors, and each error names ``section.key`` and its line number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .harness import ALGORITHMS, BASELINE, SafetyExperimentConfig, ScalingExperimentConfig
from .momdp import GridNavConfig, RandomMomdpConfig
from .policy_based import PblrlConfig
from .value_based import ExplorationSchedule, StepSizeSchedule, ToleranceSpec, VblrlConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Field:
    kind: str                  # int | float | bool | str | ints | strs
    default: object
    choices: tuple = ()
    optional: bool = False     # empty value means "not set"


def _f(kind, default, *choices, optional=False):
    return Field(kind, default, tuple(choices), optional)


TOLERANCE_KINDS = ("constant", "proportional", "decaying")

SCHEMA = {
    "momdp": {
        "kind": _f("str", "random", "random", "gridnav", "tie"),
    },
    "random": {
        "states": _f("int", 10), "actions": _f("int", 4), "objectives": _f("int", 2), "seed": _f("int", 0),
        "density": _f("float", 1.0), "noise_sigma": _f("float", 0.2), "horizon": _f("int", 100),
        "discount": _f("float", 0.9),
    },
    "gridnav": {
        "grid_side": _f("int", 12), "unsafe_density": _f("float", 0.25), "slip_prob": _f("float", 0.1),
        "goal_reward": _f("float", 100.0), "unsafe_cost": _f("float", 1.0), "step_limit": _f("int", 200),
        "seed": _f("int", 0), "discount": _f("float", 0.99),
    },
    "tie": {
        "discount": _f("float", 0.5), "horizon": _f("int", 20),
    },
    "vb": {
        "update_rule": _f("str", "lexq", "lexq", "sarsa", "expected_sarsa", "double_q"),
        "tolerance": _f("str", "constant", *TOLERANCE_KINDS),
        "tau0": _f("float", 0.01), "frac": _f("float", 0.01), "tau_power": _f("float", 0.0),
        "update_tolerance": _f("str", None, *TOLERANCE_KINDS, optional=True),
        "update_tau0": _f("float", 0.01), "update_frac": _f("float", 0.01), "update_tau_power": _f("float", 0.0),
        "step_size": _f("str", "visit_power", "constant", "visit_power"),
        "step_a0": _f("float", 1.0), "step_power": _f("float", 0.65),
        "exploration": _f("str", "visit_power", "constant", "visit_power"),
        "eps0": _f("float", 1.0), "eps_power": _f("float", 0.2),
        "max_steps": _f("int", 200_000), "q_init": _f("float", 0.0),
        "conv_window": _f("int", 100), "conv_threshold": _f("float", 0.0), "seed": _f("int", 0),
    },
    "pb": {
        "objective": _f("str", "a2c", "a2c", "ppo"), "batch_size": _f("int", 32), "kappa": _f("float", 1.5),
        "ppo_epochs": _f("int", 4), "alpha0": _f("float", 0.1), "beta0": _f("float", 1.0),
        "eta0": _f("float", 1.0), "rate_scale": _f("float", 1000.0), "beta_spread": _f("float", 0.1),
        "tau0": _f("float", 0.1), "window": _f("int", 100), "threshold": _f("float", 0.01),
        "return_window": _f("int", 20), "estimator": _f("str", "returns", "returns", "critic"),
        "theta_max": _f("float", 100.0), "max_steps": _f("int", 500_000), "seed": _f("int", 0),
    },
    "scaling": {
        "states": _f("int", 64), "actions": _f("int", 4), "objective_counts": _f("ints", (1, 2, 4)),
        "momdps_per_cell": _f("int", 30), "algorithm": _f("str", "lexq", *ALGORITHMS),
        "density": _f("float", 0.05), "noise_sigma": _f("float", 0.2), "horizon": _f("int", 100),
        "discount": _f("float", 0.9), "window": _f("int", 50), "rel_threshold": _f("float", 0.05),
        "seed": _f("int", 0),
    },
    "safety": {
        "algorithms": _f("strs", ("lexq", "la2c", "lppo", BASELINE)), "seeds": _f("int", 10),
        "baseline_algorithm": _f("str", "lexq", *ALGORITHMS), "eval_episodes": _f("int", 100),
        "seed": _f("int", 0),
    },
    "oracle": {
        "tie_tol": _f("float", 1e-9),
    },
}


def _convert(raw: str, fld: Field, where: str):
    if fld.optional and raw == "":
        return None
    try:
        if fld.kind == "int":
            val = int(raw)
        elif fld.kind == "float":
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError
        elif fld.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            val = low == "true"
        elif fld.kind == "str":
            val = raw
        elif fld.kind == "ints":
            val = tuple(int(x.strip()) for x in raw.split(",")) if raw else ()
        elif fld.kind == "strs":
            val = tuple(x.strip() for x in raw.split(",")) if raw else ()
        else:
            raise AssertionError(fld.kind)
    except ValueError:
        raise ConfigError(f"{where}: expected {fld.kind}, got {raw!r}") from None
    if fld.choices:
        items = val if fld.kind in ("ints", "strs") else (val,)
        for it in items:
            if it not in fld.choices:
                raise ConfigError(f"{where}: {it!r} is not one of {', '.join(map(str, fld.choices))}")
    return val


def parse_config(text: str, sections=None) -> dict:
    """Parse a document into ``{section: {key: value}}`` with every default filled in.

    ``sections`` limits which sections are accepted; all known sections are
    returned, so the result doubles as the effective configuration.
    """
    allowed = set(SCHEMA) if sections is None else set(sections)
    seen: dict[tuple[str, str], int] = {}
    values: dict[str, dict] = {}
    lines: dict[tuple[str, str], int] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]") or len(body) < 3:
                raise ConfigError(f"line {lineno}: malformed section header {body!r}")
            section = body[1:-1].strip()
            if section not in SCHEMA or section not in allowed:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            values.setdefault(section, {})
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, raw = (x.strip() for x in body.split("=", 1))
        where = f"{section}.{key} (line {lineno})"
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key")
        if (section, key) in seen:
            raise ConfigError(f"{section}.{key}: duplicate key on lines {seen[(section, key)]} and {lineno}")
        seen[(section, key)] = lineno
        values[section][key] = _convert(raw, SCHEMA[section][key], where)
        lines[(section, key)] = lineno
    out = {}
    for sec, fields in SCHEMA.items():
        out[sec] = {k: values.get(sec, {}).get(k, f.default) for k, f in fields.items()}
    _check_constraints(out, lines)
    return out


def _where(lines, sec, key):
    ln = lines.get((sec, key))
    return f"{sec}.{key}" + (f" (line {ln})" if ln else " (default)")


def _check_constraints(cfg: dict, lines: dict):
    pb = cfg["pb"]
    if pb["objective"] == "ppo" and not pb["kappa"] > 1:
        raise ConfigError(f"{_where(lines, 'pb', 'kappa')}: the KL-penalised objective requires kappa > 1 "
                          f"for its convergence guarantee, got {pb['kappa']}")
    builders = {
        "random": lambda: random_momdp_config(cfg),
        "gridnav": lambda: gridnav_config(cfg),
        "vb": lambda: vb_config(cfg),
        "pb": lambda: pb_config(cfg),
        "scaling": lambda: scaling_config(cfg),
        "safety": lambda: safety_config(cfg),
    }
    for sec, build in builders.items():
        try:
            build()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            keyed = [k for k in cfg[sec] if (sec, k) in lines]
            first = min((lines[(sec, k)] for k in keyed), default=None)
            loc = f"[{sec}]" + (f" (section starting near line {first})" if first else " (defaults)")
            raise ConfigError(f"{loc}: {exc}") from None
    if cfg["oracle"]["tie_tol"] <= 0:
        raise ConfigError(f"{_where(lines, 'oracle', 'tie_tol')}: tie_tol must be positive")


def serialize_config(cfg: dict) -> str:
    parts = []
    for sec, fields in SCHEMA.items():
        if sec not in cfg:
            continue
        parts.append(f"[{sec}]")
        for key, fld in fields.items():
            val = cfg[sec][key]
            if val is None:
                text = ""
            elif fld.kind == "float":
                text = repr(float(val))
            elif fld.kind == "bool":
                text = "true" if val else "false"
            elif fld.kind in ("ints", "strs"):
                text = ", ".join(str(v) for v in val)
            else:
                text = str(val)
            parts.append(f"{key} = {text}".rstrip())
        parts.append("")
    return "\n".join(parts)


# -- typed builders -------------------------------------------------------------

def random_momdp_config(cfg: dict) -> RandomMomdpConfig:
    r = cfg["random"]
    return RandomMomdpConfig(r["states"], r["actions"], r["objectives"], seed=r["seed"], density=r["density"],
                             reward_noise_sigma=r["noise_sigma"], horizon=r["horizon"], discount=r["discount"])


def gridnav_config(cfg: dict) -> GridNavConfig:
    g = cfg["gridnav"]
    return GridNavConfig(g["grid_side"], g["unsafe_density"], g["slip_prob"], g["goal_reward"], g["unsafe_cost"],
                         g["step_limit"], g["seed"], g["discount"])


def _tolerance(kind, tau0, frac, power) -> ToleranceSpec:
    if kind == "constant":
        return ToleranceSpec.constant(tau0)
    if kind == "proportional":
        return ToleranceSpec.proportional(frac)
    return ToleranceSpec.decaying(tau0, power)


def vb_config(cfg: dict) -> VblrlConfig:
    v = cfg["vb"]
    upd = None
    if v["update_tolerance"] is not None:
        upd = _tolerance(v["update_tolerance"], v["update_tau0"], v["update_frac"], v["update_tau_power"])
    return VblrlConfig(
        update_rule=v["update_rule"],
        bandit_tolerance=_tolerance(v["tolerance"], v["tau0"], v["frac"], v["tau_power"]),
        update_tolerance=upd,
        step_size=StepSizeSchedule(v["step_size"], v["step_a0"], v["step_power"]),
        exploration=ExplorationSchedule(v["exploration"], v["eps0"], v["eps_power"]),
        max_steps=v["max_steps"], q_init=v["q_init"], conv_window=v["conv_window"],
        conv_threshold=v["conv_threshold"], seed=v["seed"],
    )


def pb_config(cfg: dict) -> PblrlConfig:
    return PblrlConfig(**cfg["pb"])


def scaling_config(cfg: dict) -> ScalingExperimentConfig:
    s = cfg["scaling"]
    return ScalingExperimentConfig(
        states=s["states"], actions=s["actions"], objective_counts=tuple(s["objective_counts"]),
        momdps_per_cell=s["momdps_per_cell"], algorithm=s["algorithm"], vb=vb_config(cfg), pb=pb_config(cfg),
        density=s["density"], reward_noise_sigma=s["noise_sigma"], horizon=s["horizon"], discount=s["discount"],
        window=s["window"], rel_threshold=s["rel_threshold"], seed=s["seed"],
    )


def safety_config(cfg: dict) -> SafetyExperimentConfig:
    s = cfg["safety"]
    bad = [a for a in s["algorithms"] if a not in ALGORITHMS and a != BASELINE]
    if bad:
        raise ConfigError(f"safety.algorithms: unknown algorithm(s) {bad}")
    return SafetyExperimentConfig(
        gridnav=gridnav_config(cfg), algorithms=tuple(s["algorithms"]), seeds=s["seeds"], vb=vb_config(cfg),
        pb=pb_config(cfg), baseline_algorithm=s["baseline_algorithm"], eval_episodes=s["eval_episodes"],
        seed=s["seed"],
    )
