"""Finite multi-objective MDPs: data model, sampling, generators, text format."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ROW_TOL = 1e-12

# GridNav action order
UP, DOWN, LEFT, RIGHT = range(4)
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MomdpError(ValueError):
    """Raised on malformed MOMDPs, bad indices and unreadable documents."""


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Momdp:
    """A finite MOMDP with ``m`` reward channels.

    Arrays are shaped ``transition[s, a, s']`` and ``reward_mean[i, s, a, s']``.
    Instances are treated as immutable; arrays are made read-only on
    construction so a Momdp can be shared between learners.
    """

    transition: np.ndarray
    reward_mean: np.ndarray
    reward_noise_sigma: np.ndarray
    discounts: np.ndarray
    initial: np.ndarray
    terminal: np.ndarray
    episode_horizon: int | None = None
    reward_bound: float | None = None

    def __post_init__(self):
        conv = {
            "transition": np.asarray(self.transition, dtype=np.float64),
            "reward_mean": np.asarray(self.reward_mean, dtype=np.float64),
            "reward_noise_sigma": np.atleast_1d(np.asarray(self.reward_noise_sigma, dtype=np.float64)),
            "discounts": np.atleast_1d(np.asarray(self.discounts, dtype=np.float64)),
            "initial": np.asarray(self.initial, dtype=np.float64),
            "terminal": np.asarray(self.terminal, dtype=bool),
        }
        t = conv["transition"]
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise MomdpError(f"transition must be shaped (S, A, S), got {t.shape}")
        n_s, n_a = t.shape[:2]
        m = conv["reward_mean"].shape[0] if conv["reward_mean"].ndim == 4 else -1
        if conv["reward_mean"].shape != (m, n_s, n_a, n_s) or m < 1:
            raise MomdpError(f"reward_mean must be shaped (m, {n_s}, {n_a}, {n_s})")
        if conv["reward_noise_sigma"].size == 1 and m > 1:
            conv["reward_noise_sigma"] = np.full(m, conv["reward_noise_sigma"][0])
        if conv["discounts"].size == 1 and m > 1:
            conv["discounts"] = np.full(m, conv["discounts"][0])
        for name in ("reward_noise_sigma", "discounts"):
            if conv[name].shape != (m,):
                raise MomdpError(f"{name} must have length m={m}")
        if conv["initial"].shape != (n_s,) or conv["terminal"].shape != (n_s,):
            raise MomdpError("initial and terminal must have length |S|")
        if self.episode_horizon is not None and int(self.episode_horizon) < 1:
            raise MomdpError("episode_horizon must be positive")
        for name, arr in conv.items():
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.episode_horizon is not None:
            object.__setattr__(self, "episode_horizon", int(self.episode_horizon))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_objectives(self) -> int:
        return self.reward_mean.shape[0]

    @cached_property
    def expected_reward(self) -> np.ndarray:
        """Mean one-step reward per (objective, state, action)."""
        r = np.einsum("sat,isat->isa", self.transition, self.reward_mean)
        r.setflags(write=False)
        return r

    @cached_property
    def r_max(self) -> float:
        if self.reward_bound is not None:
            return float(self.reward_bound)
        return float(np.max(np.abs(self.reward_mean))) if self.reward_mean.size else 0.0

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        c = np.cumsum(self.transition, axis=2)
        c.setflags(write=False)
        return c

    @cached_property
    def initial_cdf(self) -> np.ndarray:
        c = np.cumsum(self.initial)
        c.setflags(write=False)
        return c

    def with_objectives(self, keep) -> "Momdp":
        """Copy restricted to the given objective indices, in the given order."""
        keep = list(keep)
        return Momdp(
            transition=self.transition,
            reward_mean=self.reward_mean[keep],
            reward_noise_sigma=self.reward_noise_sigma[keep],
            discounts=self.discounts[keep],
            initial=self.initial,
            terminal=self.terminal,
            episode_horizon=self.episode_horizon,
            reward_bound=self.reward_bound,
        )

    def same_as(self, other: "Momdp") -> bool:
        """Bitwise equality of every field."""
        fields_ = ("transition", "reward_mean", "reward_noise_sigma", "discounts", "initial", "terminal")
        return (
            all(
                getattr(self, f).shape == getattr(other, f).shape
                and getattr(self, f).tobytes() == getattr(other, f).tobytes()
                for f in fields_
            )
            and self.episode_horizon == other.episode_horizon
            and self.reward_bound == other.reward_bound
        )


@dataclass(frozen=True)
class TransitionRecord:
    state: int
    action: int
    next_state: int
    rewards: np.ndarray
    terminal: bool
    t: int = 0


@dataclass(frozen=True)
class RandomMomdpConfig:
    num_states: int
    num_actions: int
    num_objectives: int
    seed: int = 0
    density: float = 1.0
    reward_noise_sigma: float = 0.2
    horizon: int = 100
    discount: float = 0.9

    def __post_init__(self):
        if min(self.num_states, self.num_actions, self.num_objectives) < 1:
            raise ValueError("num_states, num_actions and num_objectives must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        if self.density * self.num_states < 1.0 - 1e-9:
            raise ValueError("density * num_states must be at least 1")
        if self.reward_noise_sigma < 0:
            raise ValueError("reward_noise_sigma must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")


@dataclass(frozen=True)
class GridNavConfig:
    grid_side: int = 12
    unsafe_density: float = 0.25
    slip_prob: float = 0.1
    goal_reward: float = 100.0
    unsafe_cost: float = 1.0
    step_limit: int = 200
    seed: int = 0
    discount: float = 0.99

    def __post_init__(self):
        if self.grid_side < 2:
            raise ValueError("grid_side must be at least 2")
        if not 0.0 <= self.unsafe_density < 1.0:
            raise ValueError("unsafe_density must lie in [0, 1)")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")
        if self.step_limit < 1:
            raise ValueError("step_limit must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")


def _check_index(momdp: Momdp, s: int, a: int | None = None):
    if not 0 <= s < momdp.num_states:
        raise MomdpError(f"state {s} out of range [0, {momdp.num_states})")
    if a is not None and not 0 <= a < momdp.num_actions:
        raise MomdpError(f"action {a} out of range [0, {momdp.num_actions})")


def categorical_from_uniform(cdf: np.ndarray, u: float) -> int:
    """Inverse-CDF draw; the learning kernels use the same rule."""
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, cdf.shape[0] - 1)


def transition_from_draws(momdp: Momdp, s: int, a: int, u: float, z: np.ndarray, t: int = 0) -> TransitionRecord:
    """Deterministic core of :func:`sample_transition` given pre-drawn randomness.

    ``u`` is one uniform in [0, 1), ``z`` holds ``m`` standard normals.
    """
    m = momdp.num_objectives
    if momdp.terminal[s]:
        return TransitionRecord(s, a, s, np.zeros(m), True, t)
    s2 = categorical_from_uniform(momdp.transition_cdf[s, a], u)
    rewards = momdp.reward_mean[:, s, a, s2] + momdp.reward_noise_sigma * z
    return TransitionRecord(s, a, s2, rewards, bool(momdp.terminal[s2]), t)


def sample_transition(momdp: Momdp, s: int, a: int, rng: np.random.Generator, t: int = 0) -> TransitionRecord:
    _check_index(momdp, s, a)
    u = rng.random()
    z = rng.standard_normal(momdp.num_objectives)
    return transition_from_draws(momdp, s, a, u, z, t)


def sample_initial(momdp: Momdp, rng: np.random.Generator) -> int:
    return categorical_from_uniform(momdp.initial_cdf, rng.random())


def validate(momdp: Momdp) -> list[str]:
    """Return human-readable invariant violations; an empty list means valid."""
    out = []
    t = momdp.transition
    if not np.all(np.isfinite(t)):
        out.append("transition contains non-finite entries")
    for s, a in zip(*np.nonzero(np.any(t < 0, axis=2))):
        out.append(f"transition row (s={s}, a={a}) has negative entries")
    sums = t.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_TOL)):
        out.append(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}, not 1")
    if np.any(momdp.initial < 0) or abs(momdp.initial.sum() - 1.0) > ROW_TOL:
        out.append(f"initial distribution invalid (sum {momdp.initial.sum()!r})")
    for i, g in enumerate(momdp.discounts):
        if not 0.0 <= g < 1.0:
            out.append(f"discount of objective {i} is {g!r}; must lie in [0, 1)")
    if np.any(momdp.reward_noise_sigma < 0):
        out.append("reward_noise_sigma must be nonnegative")
    if not np.all(np.isfinite(momdp.reward_mean)):
        out.append("reward_mean contains non-finite entries")
    elif momdp.reward_bound is not None and np.max(np.abs(momdp.reward_mean)) > momdp.reward_bound:
        out.append(f"reward_mean exceeds declared bound {momdp.reward_bound!r}")
    for s in np.nonzero(momdp.terminal)[0]:
        if np.any(np.abs(t[s, :, s] - 1.0) > ROW_TOL):
            out.append(f"terminal state {s} must self-loop with probability 1 (T(s,a)=s)")
        if np.any(momdp.reward_mean[:, s, :, :] != 0.0):
            out.append(f"terminal state {s} has nonzero reward mean (requires R(s,a,s)=0)")
    return out


def generate_random_momdp(config: RandomMomdpConfig) -> Momdp:
    """Seeded random MOMDP with Dirichlet(1) rows on a random successor support.

    Draw order is fixed (supports and row weights per (s, a), then rewards
    objective-major), so objective 0's rewards do not depend on ``m``.
    """
    n_s, n_a, m = config.num_states, config.num_actions, config.num_objectives
    rng = np.random.default_rng(config.seed)
    k = max(1, math.ceil(config.density * n_s - 1e-9))
    transition = np.zeros((n_s, n_a, n_s))
    for s in range(n_s):
        for a in range(n_a):
            support = rng.choice(n_s, size=k, replace=False) if k < n_s else np.arange(n_s)
            transition[s, a, support] = rng.dirichlet(np.ones(k)) if k > 1 else 1.0
    rewards = rng.random((m, n_s, n_a, n_s))
    return Momdp(
        transition=transition,
        reward_mean=rewards,
        reward_noise_sigma=np.full(m, config.reward_noise_sigma),
        discounts=np.full(m, config.discount),
        initial=np.full(n_s, 1.0 / n_s),
        terminal=np.zeros(n_s, dtype=bool),
        episode_horizon=config.horizon,
        reward_bound=1.0,
    )


def tie_momdp(discount: float = 0.5, horizon: int = 20) -> Momdp:
    """One state, two actions. Objective 0 pays 1 for both actions; objective 1 pays 1 only for action 1."""
    rewards = np.zeros((2, 1, 2, 1))
    rewards[0] = 1.0
    rewards[1, 0, 1, 0] = 1.0
    return Momdp(
        transition=np.ones((1, 2, 1)),
        reward_mean=rewards,
        reward_noise_sigma=np.zeros(2),
        discounts=np.full(2, discount),
        initial=np.ones(1),
        terminal=np.zeros(1, dtype=bool),
        episode_horizon=horizon,
        reward_bound=1.0,
    )


@dataclass(frozen=True, eq=False)
class GridNav:
    """Built GridNav instance: the MOMDP plus its layout."""

    momdp: Momdp
    unsafe: np.ndarray = field(repr=False)
    start: int = 0
    goal: int = 0
    side: int = 0

    def cell(self, state: int) -> tuple[int, int]:
        return divmod(state, self.side)


def _safe_path_exists(unsafe: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> bool:
    side = unsafe.shape[0]
    seen = {start}
    todo = deque([start])
    while todo:
        r, c = todo.popleft()
        if (r, c) == goal:
            return True
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < side and 0 <= nc < side and not unsafe[nr, nc] and (nr, nc) not in seen:
                seen.add((nr, nc))
                todo.append((nr, nc))
    return False


def gridnav_layout(config: GridNavConfig, max_attempts: int = 1000) -> np.ndarray:
    side = config.grid_side
    start, goal = (0, 0), (side - 1, side - 1)
    rng = np.random.default_rng(config.seed)
    for _ in range(max_attempts):
        unsafe = rng.random((side, side)) < config.unsafe_density
        unsafe[start] = unsafe[goal] = False
        if _safe_path_exists(unsafe, start, goal):
            return unsafe
    raise GenerationError(f"no cost-free start-goal path after {max_attempts} layouts")


def build_gridnav(config: GridNavConfig, unsafe: np.ndarray | None = None) -> GridNav:
    """Two-objective gridworld: objective 0 is negated cost, objective 1 is goal reward.

    Cost is charged on every step that ends in an unsafe cell; the goal cell
    is the absorbing terminal state.
    """
    side = config.grid_side
    if unsafe is None:
        unsafe = gridnav_layout(config)
    unsafe = np.asarray(unsafe, dtype=bool)
    n = side * side
    start, goal = 0, n - 1
    transition = np.zeros((n, 4, n))
    for s in range(n):
        r, c = divmod(s, side)
        if s == goal:
            transition[s, :, s] = 1.0
            continue
        dest = []
        for dr, dc in MOVES:
            nr, nc = r + dr, c + dc
            dest.append(nr * side + nc if 0 <= nr < side and 0 <= nc < side else s)
        for a in range(4):
            transition[s, a, dest[a]] += 1.0 - config.slip_prob
            for d in dest:
                transition[s, a, d] += config.slip_prob / 4.0
    reward = np.zeros((2, n, 4, n))
    flat_unsafe = unsafe.reshape(-1)
    reward[0][:, :, flat_unsafe] = -config.unsafe_cost
    reward[1][:, :, goal] = config.goal_reward
    reward[:, goal] = 0.0
    terminal = np.zeros(n, dtype=bool)
    terminal[goal] = True
    initial = np.zeros(n)
    initial[start] = 1.0
    momdp = Momdp(
        transition=transition,
        reward_mean=reward,
        reward_noise_sigma=np.zeros(2),
        discounts=np.full(2, config.discount),
        initial=initial,
        terminal=terminal,
        episode_horizon=config.step_limit,
        reward_bound=max(abs(config.goal_reward), abs(config.unsafe_cost)),
    )
    return GridNav(momdp=momdp, unsafe=unsafe, start=start, goal=goal, side=side)


# -- text serialization ------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(momdp: Momdp) -> str:
    n_s, n_a, m = momdp.num_states, momdp.num_actions, momdp.num_objectives
    lines = [f"momdp v1 {n_s} {n_a} {m}"]
    for s in range(n_s):
        for a in range(n_a):
            lines.append(f"T {s} {a} " + " ".join(_fmt(p) for p in momdp.transition[s, a]))
    for i, s, a, s2 in zip(*np.nonzero(momdp.reward_mean)):
        lines.append(f"R {i} {s} {a} {s2} {_fmt(momdp.reward_mean[i, s, a, s2])}")
    for i in range(m):
        lines.append(f"G {i} {_fmt(momdp.discounts[i])}")
    for i in range(m):
        lines.append(f"N {i} {_fmt(momdp.reward_noise_sigma[i])}")
    lines.append("I " + " ".join(_fmt(p) for p in momdp.initial))
    lines.append("TERM" + "".join(f" {s}" for s in np.nonzero(momdp.terminal)[0]))
    if momdp.episode_horizon is not None:
        lines.append(f"H {momdp.episode_horizon}")
    if momdp.reward_bound is not None:
        lines.append(f"B {_fmt(momdp.reward_bound)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Momdp:
    """Parse the ``momdp v1`` text format written by :func:`dumps`."""
    lines = text.splitlines()
    if not lines:
        raise MomdpError("empty momdp document")
    head = lines[0].split()
    if len(head) != 5 or head[:2] != ["momdp", "v1"]:
        raise MomdpError("line 1: expected header 'momdp v1 |S| |A| m'")
    n_s, n_a, m = (int(x) for x in head[2:])
    transition = np.zeros((n_s, n_a, n_s))
    reward = np.zeros((m, n_s, n_a, n_s))
    discounts = np.full(m, np.nan)
    sigma = np.zeros(m)
    initial = None
    terminal = np.zeros(n_s, dtype=bool)
    horizon = bound = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            tag = parts[0]
            if tag == "T":
                s, a = int(parts[1]), int(parts[2])
                row = [float(x) for x in parts[3:]]
                if len(row) != n_s:
                    raise MomdpError(f"line {lineno}: T row needs {n_s} probabilities")
                transition[s, a] = row
            elif tag == "R":
                i, s, a, s2 = (int(x) for x in parts[1:5])
                reward[i, s, a, s2] = float(parts[5])
            elif tag == "G":
                discounts[int(parts[1])] = float(parts[2])
            elif tag == "N":
                sigma[int(parts[1])] = float(parts[2])
            elif tag == "I":
                initial = np.array([float(x) for x in parts[1:]])
            elif tag == "TERM":
                terminal[[int(x) for x in parts[1:]]] = True
            elif tag == "H":
                horizon = int(parts[1])
            elif tag == "B":
                bound = float(parts[1])
            else:
                raise MomdpError(f"line {lineno}: unknown record {tag!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, MomdpError):
                raise
            raise MomdpError(f"line {lineno}: malformed record: {line!r}") from exc
    if np.any(np.isnan(discounts)):
        raise MomdpError("missing G line for some objective")
    if initial is None:
        raise MomdpError("missing I line")
    return Momdp(transition, reward, sigma, discounts, initial, terminal, horizon, bound)


def save(momdp: Momdp, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(momdp))


def load(path) -> Momdp:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
