"""Value-based lexicographic RL: lexicographic bandits and tabular Q-update rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels as K
from .metrics import MetricsSeries
from .momdp import Momdp, TransitionRecord, categorical_from_uniform, transition_from_draws, validate

RULES = {"lexq": K.RULE_LEXQ, "sarsa": K.RULE_SARSA, "expected_sarsa": K.RULE_ESARSA, "double_q": K.RULE_DOUBLE}
CHUNK = 16384


# -- schedules -----------------------------------------------------------------

@dataclass(frozen=True)
class ToleranceSpec:
    """Per-level slack used when filtering near-maximal actions.

    ``constant``: tau0.  ``proportional``: frac * |max Q_i over the surviving
    set|, floored at 1e-9.  ``decaying``: tau0 * (1 + t) ** -power.
    """

    kind: str = "constant"
    tau0: float = 0.01
    frac: float = 0.01
    power: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "proportional", "decaying"):
            raise ValueError(f"unknown tolerance kind {self.kind!r}")
        if self.kind in ("constant", "decaying") and not self.tau0 > 0:
            raise ValueError("tau0 must be positive")
        if self.kind == "proportional" and not self.frac > 0:
            raise ValueError("frac must be positive")
        if self.kind == "decaying" and self.power < 0:
            raise ValueError("power must be nonnegative")

    @classmethod
    def constant(cls, tau0: float) -> "ToleranceSpec":
        return cls("constant", tau0=tau0)

    @classmethod
    def proportional(cls, frac: float) -> "ToleranceSpec":
        return cls("proportional", frac=frac)

    @classmethod
    def decaying(cls, tau0: float, power: float) -> "ToleranceSpec":
        return cls("decaying", tau0=tau0, power=power)

    def level(self, best: float, t: int = 0) -> float:
        """Tolerance given the max of Q_i over the actions that survived levels < i."""
        if self.kind == "constant":
            return self.tau0
        if self.kind == "proportional":
            return max(self.frac * abs(best), K.PROPORTIONAL_FLOOR)
        return self.tau0 * (1.0 + t) ** (-self.power)

    def limit(self, best: float) -> float:
        """Value as t -> infinity (zero for a decaying tolerance with power > 0)."""
        if self.kind == "decaying" and self.power > 0:
            return 0.0
        return self.level(best, 0)

    def evaluate(self, q, s: int, i: int, t: int = 0) -> float:
        """tau(s, i, t, Q) for objective ``i`` (0-based)."""
        qs = _state_values(q, s)
        allowed = _filter(qs[:i], _tol_fn(self, t))[-1] if i else np.ones(qs.shape[1], bool)
        return self.level(float(qs[i][allowed].max()), t)

    def _codes(self):
        if self.kind == "constant":
            return K.TOL_CONSTANT, float(self.tau0), 0.0
        if self.kind == "proportional":
            return K.TOL_PROPORTIONAL, float(self.frac), 0.0
        return K.TOL_DECAYING, float(self.tau0), float(self.power)


@dataclass(frozen=True)
class StepSizeSchedule:
    """alpha(n) for the n-th update of a state-action pair."""

    kind: str = "visit_power"
    a0: float = 1.0
    power: float = 0.6

    def __post_init__(self):
        if self.kind not in ("constant", "visit_power"):
            raise ValueError(f"unknown step-size kind {self.kind!r}")
        if not 0.0 <= self.a0 <= 1.0:
            raise ValueError("step size must lie in [0, 1]")
        if self.kind == "visit_power" and not 0.5 < self.power <= 1.0:
            raise ValueError("visit_power step sizes need power in (0.5, 1]")

    @property
    def satisfies_robbins_monro(self) -> bool:
        return self.kind == "visit_power"

    def value(self, n: int) -> float:
        return K.schedule_value.py_func(*self._codes(), n)

    def _codes(self):
        return (K.SCHED_CONSTANT if self.kind == "constant" else K.SCHED_VISIT_POWER), float(self.a0), float(self.power)


@dataclass(frozen=True)
class ExplorationSchedule:
    """epsilon(n) given the number of earlier action selections in the state."""

    kind: str = "visit_power"
    eps0: float = 1.0
    power: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "visit_power"):
            raise ValueError(f"unknown exploration kind {self.kind!r}")
        if not 0.0 <= self.eps0 <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.kind == "visit_power" and not 0.0 < self.power <= 1.0:
            raise ValueError("visit_power exploration needs power in (0, 1]")

    def value(self, n: int) -> float:
        return K.schedule_value.py_func(*self._codes(), n)

    def _codes(self):
        return (K.SCHED_CONSTANT if self.kind == "constant" else K.SCHED_VISIT_POWER), float(self.eps0), float(self.power)


def _eventually_below(tq: ToleranceSpec, tb: ToleranceSpec) -> bool | None:
    """Whether tau_Q(t) <= tau_B(t + 1) for all large t; None when it depends on Q."""
    if tq == tb:
        return True
    if tq.kind == "proportional" or tb.kind == "proportional":
        return tq.frac <= tb.frac if tq.kind == tb.kind else None
    pq = tq.power if tq.kind == "decaying" else 0.0
    pb = tb.power if tb.kind == "decaying" else 0.0
    if pq != pb:
        return pq > pb
    return tq.tau0 < tb.tau0 or (pq == 0 and tq.tau0 <= tb.tau0)


@dataclass(frozen=True)
class VblrlConfig:
    update_rule: str = "lexq"
    bandit_tolerance: ToleranceSpec = field(default_factory=ToleranceSpec)
    update_tolerance: ToleranceSpec | None = None
    step_size: StepSizeSchedule = field(default_factory=StepSizeSchedule)
    exploration: ExplorationSchedule = field(default_factory=ExplorationSchedule)
    max_steps: int = 100_000
    q_init: float = 0.0
    conv_window: int = 100
    conv_threshold: float = 0.0     # 0 disables early stopping
    seed: int = 0

    def __post_init__(self):
        if self.update_rule not in RULES:
            raise ValueError(f"unknown update rule {self.update_rule!r}; expected one of {sorted(RULES)}")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.conv_window < 1:
            raise ValueError("conv_window must be positive")
        if _eventually_below(self.q_tolerance, self.bandit_tolerance) is False:
            raise ValueError("update tolerance must eventually satisfy tau_Q(t) <= tau_B(t+1)")

    @property
    def q_tolerance(self) -> ToleranceSpec:
        return self.update_tolerance if self.update_tolerance is not None else self.bandit_tolerance


# -- tables ----------------------------------------------------------------------

@dataclass
class QTables:
    """``q[i, s, a]``; the Double-Q rule also keeps ``qa``/``qb`` with q = 0.5 (qa + qb)."""

    q: np.ndarray
    qa: np.ndarray | None = None
    qb: np.ndarray | None = None

    @classmethod
    def zeros(cls, m: int, n_states: int, n_actions: int, init: float = 0.0, double: bool = False) -> "QTables":
        q = np.full((m, n_states, n_actions), float(init))
        if double:
            return cls(q, q.copy(), q.copy())
        return cls(q)

    @property
    def is_double(self) -> bool:
        return self.qa is not None

    def copy(self) -> "QTables":
        return QTables(self.q.copy(),
                       None if self.qa is None else self.qa.copy(),
                       None if self.qb is None else self.qb.copy())


def _state_values(q, s: int) -> np.ndarray:
    arr = q.q if isinstance(q, QTables) else np.asarray(q)
    return arr[:, s, :]


def _filter(qs: np.ndarray, tol_of_best) -> np.ndarray:
    """Nested sets for a single state's (m, A) values; ``tol_of_best`` maps best -> tau."""
    allowed = np.ones(qs.shape[1], dtype=bool)
    out = np.empty(qs.shape, dtype=bool)
    for i in range(qs.shape[0]):
        best = float(qs[i][allowed].max())
        allowed = allowed & (qs[i] >= best - tol_of_best(i, best))
        out[i] = allowed
    return out


def _tol_fn(tolerances, t: int):
    if isinstance(tolerances, ToleranceSpec):
        return lambda i, best: tolerances.level(best, t)
    tol = [float(x) for x in tolerances]
    return lambda i, best: tol[i]


def lex_filter(q, s: int, tolerances, t: int = 0) -> np.ndarray:
    """Nested near-maximal action sets at ``s``.

    Row ``i`` of the returned (m, A) mask is the set surviving objectives
    ``0..i``; the implicit level before row 0 is the full action set.
    ``tolerances`` is a length-m sequence or a :class:`ToleranceSpec`.
    """
    qs = _state_values(q, s)
    if not isinstance(tolerances, ToleranceSpec) and np.any(np.asarray(tolerances, dtype=float) < 0):
        raise ValueError("tolerances must be nonnegative")
    return _filter(qs, _tol_fn(tolerances, t))


def restricted_max(q, s: int, i: int, tolerances, t: int = 0) -> float:
    """max of Q_i(s, .) over the actions surviving objectives ``0..i-1``."""
    qs = _state_values(q, s)
    allowed = _filter(qs[:i], _tol_fn(tolerances, t))[-1] if i else np.ones(qs.shape[1], bool)
    return float(qs[i][allowed].max())


def bandit_action_distribution(q, s: int, eps: float, tolerances, t: int = 0) -> np.ndarray:
    """Action probabilities of lexicographic epsilon-greedy at ``s``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    top = lex_filter(q, s, tolerances, t)[-1]
    n_a = top.shape[0]
    cnt = int(top.sum())
    p = np.full(n_a, eps / n_a)
    p[top] += (1.0 - eps) / cnt
    return p


def select_action_from_draws(q, s: int, eps: float, tolerances, t: int, u0: float, u1: float) -> int:
    n_a = _state_values(q, s).shape[1]
    if u0 < eps:
        return K.pick_index.py_func(u1, n_a)
    top = np.flatnonzero(lex_filter(q, s, tolerances, t)[-1])
    return int(top[K.pick_index.py_func(u1, len(top))])


def lex_epsilon_greedy(q, s: int, visit_counts: np.ndarray, exploration: ExplorationSchedule,
                       tolerance: ToleranceSpec, t: int, rng: np.random.Generator) -> int:
    """Sample from :func:`bandit_action_distribution` with epsilon from the state's visit count.

    Increments ``visit_counts[s]``.
    """
    eps = exploration.value(int(visit_counts[s]))
    visit_counts[s] += 1
    u0, u1 = rng.random(2)
    return select_action_from_draws(q, s, eps, tolerance, t, u0, u1)


# -- update rules --------------------------------------------------------------
# Each rule updates objective ``i`` (0-based) in place and returns the tables.

def _blend(old: float, alpha: float, target: float) -> float:
    return (1.0 - alpha) * old + alpha * target


def lex_q_update(q: QTables, rec: TransitionRecord, i: int, alpha: float, tolerance, t: int = 0, *,
                 gamma: float) -> QTables:
    boot = 0.0 if rec.terminal else restricted_max(q, rec.next_state, i, tolerance, t)
    target = rec.rewards[i] + gamma * boot
    q.q[i, rec.state, rec.action] = _blend(q.q[i, rec.state, rec.action], alpha, target)
    return q


def sarsa_update(q: QTables, rec: TransitionRecord, next_action: int, i: int, alpha: float, *,
                 gamma: float) -> QTables:
    boot = 0.0 if rec.terminal else q.q[i, rec.next_state, next_action]
    target = rec.rewards[i] + gamma * boot
    q.q[i, rec.state, rec.action] = _blend(q.q[i, rec.state, rec.action], alpha, target)
    return q


def expected_bootstrap(q, s: int, i: int, eps: float, tolerances, t: int = 0) -> float:
    p = bandit_action_distribution(q, s, eps, tolerances, t)
    vals = _state_values(q, s)[i]
    total = 0.0
    for pa, va in zip(p, vals):
        total += float(pa) * float(va)
    return total


def expected_sarsa_update(q: QTables, rec: TransitionRecord, i: int, alpha: float, eps: float, tolerance,
                          t: int = 0, *, gamma: float) -> QTables:
    boot = 0.0 if rec.terminal else expected_bootstrap(q, rec.next_state, i, eps, tolerance, t)
    target = rec.rewards[i] + gamma * boot
    q.q[i, rec.state, rec.action] = _blend(q.q[i, rec.state, rec.action], alpha, target)
    return q


def lex_double_q_update(q: QTables, rec: TransitionRecord, i: int, alpha: float, tolerance, rng=None,
                        t: int = 0, *, gamma: float, branch_a: bool | None = None) -> QTables:
    """Update Q^A_i (or Q^B_i) with a coin flip; pass ``branch_a`` to fix the branch."""
    if not q.is_double:
        raise ValueError("lex_double_q_update needs paired tables")
    if branch_a is None:
        branch_a = bool(rng.random() < 0.5)
    upd, other = (q.qa, q.qb) if branch_a else (q.qb, q.qa)
    s, a, s2 = rec.state, rec.action, rec.next_state
    if rec.terminal:
        boot = 0.0
    else:
        qs = _state_values(q, s2)
        allowed = _filter(qs[:i], _tol_fn(tolerance, t))[-1] if i else np.ones(qs.shape[1], bool)
        cand = np.where(allowed, upd[i, s2], -np.inf)
        boot = other[i, s2, int(np.argmax(cand))]
    upd[i, s, a] = _blend(upd[i, s, a], alpha, rec.rewards[i] + gamma * boot)
    q.q[i, s, a] = 0.5 * (q.qa[i, s, a] + q.qb[i, s, a])
    return q


# -- Algorithm loop -----------------------------------------------------------------

class VbResult(NamedTuple):
    q: QTables
    greedy_sets: np.ndarray   # (m, S, A) nested sets under the limiting bandit tolerance
    series: MetricsSeries


def greedy_sets(q: QTables, tolerance: ToleranceSpec) -> np.ndarray:
    m, n_s, n_a = q.q.shape
    out = np.empty((m, n_s, n_a), dtype=bool)
    for s in range(n_s):
        out[:, s, :] = _filter(q.q[:, s, :], lambda i, best: tolerance.limit(best))
    return out


def greedy_policy(sets: np.ndarray) -> np.ndarray:
    """Uniform distribution over the last-level set in every state, shape (S, A)."""
    top = sets[-1].astype(float)
    return top / top.sum(axis=1, keepdims=True)


def draw_block(rng: np.random.Generator, n: int, m: int):
    return rng.random((n, K.N_UNIFORMS)), rng.standard_normal((n, m))


def _check(momdp: Momdp):
    problems = validate(momdp)
    if problems:
        raise ValueError("invalid MOMDP: " + "; ".join(problems[:5]))


def run_vblrl(momdp: Momdp, config: VblrlConfig, rng: np.random.Generator | None = None,
              check: bool = True) -> VbResult:
    """Run VB-LRL: bandit action, environment step, update every Q_i, reset on terminal/horizon."""
    if check:
        _check(momdp)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    m, n_s, n_a = momdp.num_objectives, momdp.num_states, momdp.num_actions
    rule = RULES[config.update_rule]
    q = QTables.zeros(m, n_s, n_a, config.q_init, double=rule == K.RULE_DOUBLE)
    qa = q.qa if q.is_double else np.zeros((0, 0, 0))
    qb = q.qb if q.is_double else np.zeros((0, 0, 0))
    n_sa = np.zeros((2, n_s, n_a), dtype=np.int64)
    n_st = np.zeros(n_s, dtype=np.int64)
    s0 = categorical_from_uniform(momdp.initial_cdf, rng.random())
    st = np.array([s0, -1, 0, 0, 0, 0], dtype=np.int64)
    ep_acc = np.zeros(m + 1)
    horizon = momdp.episode_horizon or 0
    codes = (*config.bandit_tolerance._codes(), *config.q_tolerance._codes(),
             *config.step_size._codes(), *config.exploration._codes())
    rets, lens, steps, qds = [], [], [], []
    while st[3] < config.max_steps and not st[4]:
        n = min(CHUNK, config.max_steps - int(st[3]))
        uni, nor = draw_block(rng, n, m)
        out_ret = np.empty((n, m))
        out_len = np.empty(n, dtype=np.int64)
        out_step = np.empty(n, dtype=np.int64)
        out_qd = np.empty(n)
        k = K.vb_chunk(momdp.transition_cdf, momdp.reward_mean, momdp.reward_noise_sigma, momdp.discounts,
                       momdp.initial_cdf, momdp.terminal, horizon, rule, *codes,
                       q.q, qa, qb, n_sa, n_st, st, ep_acc, uni, nor,
                       out_ret, out_len, out_step, out_qd, config.max_steps,
                       config.conv_window, config.conv_threshold)
        rets.append(out_ret[:k])
        lens.append(out_len[:k])
        steps.append(out_step[:k])
        qds.append(out_qd[:k])
    series = MetricsSeries(
        returns=np.concatenate(rets) if rets else np.zeros((0, m)),
        lengths=np.concatenate(lens) if lens else np.zeros(0, np.int64),
        global_step=np.concatenate(steps) if steps else np.zeros(0, np.int64),
        q_delta=np.concatenate(qds) if qds else np.zeros(0),
    )
    series.extra["steps"] = int(st[3])
    series.extra["stopped_early"] = bool(st[4])
    return VbResult(q, greedy_sets(q, config.bandit_tolerance), series)


def run_vblrl_reference(momdp: Momdp, config: VblrlConfig, rng: np.random.Generator | None = None) -> VbResult:
    """Slow loop composed from the public operations; replays the kernel's random stream.

    Kept for cross-checking the compiled loop; early stopping is not supported.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    m, n_s, n_a = momdp.num_objectives, momdp.num_states, momdp.num_actions
    rule = config.update_rule
    q = QTables.zeros(m, n_s, n_a, config.q_init, double=rule == "double_q")
    n_sa = np.zeros((2, n_s, n_a), dtype=np.int64)
    n_st = np.zeros(n_s, dtype=np.int64)
    bt, qt = config.bandit_tolerance, config.q_tolerance
    s = categorical_from_uniform(momdp.initial_cdf, rng.random())
    carry, ep_len, t = -1, 0, 0
    ep_ret = np.zeros(m)
    rets, lens, steps = [], [], []
    horizon = momdp.episode_horizon or 0
    while t < config.max_steps:
        n = min(CHUNK, config.max_steps - t)
        uni, nor = draw_block(rng, n, m)
        for k in range(n):
            u = uni[k]
            if carry >= 0:
                a = carry
            else:
                eps = config.exploration.value(int(n_st[s]))
                n_st[s] += 1
                a = select_action_from_draws(q, s, eps, bt, t, u[0], u[1])
            carry = -1
            rec = transition_from_draws(momdp, s, a, u[2], nor[k], t)
            ep_len += 1
            trunc = not rec.terminal and horizon > 0 and ep_len >= horizon
            a2 = -1
            if rule == "sarsa" and not rec.terminal:
                eps2 = config.exploration.value(int(n_st[rec.next_state]))
                n_st[rec.next_state] += 1
                a2 = select_action_from_draws(q, rec.next_state, eps2, bt, t + 1, u[4], u[5])
            branch_a = bool(u[3] < 0.5)
            tab = 1 if rule == "double_q" and not branch_a else 0
            alpha = config.step_size.value(int(n_sa[tab, s, a]))
            n_sa[tab, s, a] += 1
            for i in range(m):
                g = float(momdp.discounts[i])
                if rule == "lexq":
                    lex_q_update(q, rec, i, alpha, qt, t, gamma=g)
                elif rule == "sarsa":
                    sarsa_update(q, rec, a2, i, alpha, gamma=g)
                elif rule == "expected_sarsa":
                    eps2 = config.exploration.value(int(n_st[rec.next_state]))
                    expected_sarsa_update(q, rec, i, alpha, eps2, bt, t, gamma=g)
                else:
                    lex_double_q_update(q, rec, i, alpha, qt, t=t, gamma=g, branch_a=branch_a)
            ep_ret += rec.rewards
            t += 1
            if rec.terminal or trunc:
                rets.append(ep_ret.copy())
                lens.append(ep_len)
                steps.append(t)
                ep_ret[:] = 0.0
                ep_len = 0
                s = categorical_from_uniform(momdp.initial_cdf, u[6])
            else:
                s = rec.next_state
                carry = a2
    series = MetricsSeries(np.array(rets).reshape(-1, m), np.array(lens, dtype=np.int64),
                           np.array(steps, dtype=np.int64))
    return VbResult(q, greedy_sets(q, bt), series)
