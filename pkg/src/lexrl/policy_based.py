"""Policy-based lexicographic learning: softmax actors, linear TD(0) critics and
Lagrange multipliers coupled through a multi-timescale rate chain.

Objectives are indexed from 0 here. Objective ``i`` has actor rate ``beta(i)``;
the multiplier rate in force after ``j`` objectives have converged is ``eta(j)``.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .metrics import MetricsSeries
from .momdp import Momdp, TransitionRecord, categorical_from_uniform, transition_from_draws, validate

CHUNK = 16384
PROB_FLOOR = 1e-300


class NumericFailure(ArithmeticError):
    pass


class DegenerateSnapshot(ArithmeticError):
    pass


class FeatureError(ValueError):
    pass


# -- parameters ---------------------------------------------------------------

def one_hot_features(n_states: int) -> np.ndarray:
    return np.eye(n_states)


def validate_features(feats: np.ndarray) -> None:
    """Full column rank and no constant column (a bias feature would let Phi w be constant)."""
    feats = np.asarray(feats, dtype=float)
    if feats.ndim != 2 or feats.shape[1] < 1:
        raise FeatureError("feature matrix must be 2-d with at least one column")
    if not np.all(np.isfinite(feats)):
        raise FeatureError("feature matrix has non-finite entries")
    if np.linalg.matrix_rank(feats) < feats.shape[1]:
        raise FeatureError("feature matrix must have full column rank")
    if feats.shape[0] > 1:
        const = np.all(feats == feats[:1], axis=0)
        if np.any(const):
            raise FeatureError(f"constant feature column(s) {np.nonzero(const)[0].tolist()} are not allowed")


@dataclass
class SoftmaxPolicyParams:
    theta: np.ndarray            # (d, A)
    features: np.ndarray         # (S, d)
    theta_max: float = 100.0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.theta.ndim != 2 or self.theta.shape[0] != self.features.shape[1]:
            raise ValueError("theta must be shaped (num_features, num_actions)")
        if not self.theta_max > 0:
            raise ValueError("theta_max must be positive")

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, features=None, theta_max: float = 100.0):
        feats = one_hot_features(n_states) if features is None else np.asarray(features, dtype=float)
        validate_features(feats)
        return cls(np.zeros((feats.shape[1], n_actions)), feats, theta_max)

    def copy(self) -> "SoftmaxPolicyParams":
        return SoftmaxPolicyParams(self.theta.copy(), self.features, self.theta_max)

    def table(self) -> np.ndarray:
        """pi(a|s) for every state, shape (S, A)."""
        return _softmax(self.features @ self.theta)


@dataclass
class LinearCritics:
    w: np.ndarray                # (m, d)
    features: np.ndarray         # (S, d)

    @classmethod
    def zeros(cls, m: int, features) -> "LinearCritics":
        feats = np.ascontiguousarray(features, dtype=np.float64)
        validate_features(feats)
        return cls(np.zeros((m, feats.shape[1])), feats)

    def values(self, s: int) -> np.ndarray:
        return self.w @ self.features[s]


@dataclass
class Multipliers:
    lam: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "Multipliers":
        return cls(np.zeros(m))


@dataclass(frozen=True)
class TimescaleChain:
    """Rates ``base * (1 + t / scale) ** -e_k`` along (alpha, eta0, beta1, eta1, ..., beta_m, eta_m).

    ``e_k = 0.55 + 0.40 k / (2m + 1)``; the tolerance decays as ``tau0 / (1 + t)``.
    Base rates are kept in (0, 1] so every rate stays in [0, 1] without clipping.
    Objective ``i``'s actor base is ``beta0 * spread ** i``; a constant factor
    leaves every limit condition intact but separates the timescales from t = 0.
    """

    m: int
    alpha0: float = 1.0
    beta0: float = 1.0
    eta0: float = 1.0
    scale: float = 1.0
    tau0: float = 0.1
    spread: float = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be at least 1")
        for name in ("alpha0", "beta0", "eta0"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not self.scale > 0 or not self.tau0 > 0:
            raise ValueError("scale and tau0 must be positive")
        if not 0 < self.spread <= 1:
            raise ValueError("spread must lie in (0, 1]")

    def exponent(self, k: int) -> float:
        return 0.55 + 0.40 * k / (2 * self.m + 1)

    def _rate(self, base: float, k: int, t: float) -> float:
        return base * (1.0 + t / self.scale) ** (-self.exponent(k))

    def alpha(self, t: float) -> float:
        return self._rate(self.alpha0, 0, t)

    def beta(self, i: int, t: float) -> float:
        if not 0 <= i < self.m:
            raise IndexError(i)
        return self._rate(self.beta0 * self.spread ** i, 2 * i + 2, t)

    def eta(self, j: int, t: float) -> float:
        if not 0 <= j <= self.m:
            raise IndexError(j)
        return self._rate(self.eta0, 2 * j + 1, t)

    def betas(self, t: float) -> np.ndarray:
        return np.array([self.beta(i, t) for i in range(self.m)])

    def tau(self, t: float) -> float:
        return self.tau0 / (1.0 + t)


@dataclass
class ObjectiveTracker:
    window: int = 100
    threshold: float = 0.01
    k_hat: np.ndarray = None
    converged: np.ndarray = None
    samples: list = None

    @classmethod
    def create(cls, m: int, window: int = 100, threshold: float = 0.01) -> "ObjectiveTracker":
        if window < 1 or not threshold > 0:
            raise ValueError("window must be >= 1 and threshold positive")
        return cls(window, threshold, np.zeros(m), np.zeros(m, dtype=bool),
                   [deque(maxlen=window) for _ in range(m)])

    @property
    def active(self) -> int:
        return int(self.converged.sum())


@dataclass(frozen=True)
class PblrlConfig:
    objective: str = "a2c"            # "a2c" or "ppo"
    batch_size: int = 32
    kappa: float = 1.5
    ppo_epochs: int = 4
    alpha0: float = 0.1
    beta0: float = 1.0
    eta0: float = 1.0
    rate_scale: float = 1000.0
    beta_spread: float = 0.1
    tau0: float = 0.1
    window: int = 100
    threshold: float = 0.01
    return_window: int = 20
    estimator: str = "returns"        # "returns" or "critic"
    theta_max: float = 100.0
    max_steps: int = 500_000
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ("returns", "critic"):
            raise ValueError(f"estimator must be 'returns' or 'critic', got {self.estimator!r}")
        if self.objective not in ("a2c", "ppo"):
            raise ValueError(f"objective must be 'a2c' or 'ppo', got {self.objective!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.objective == "ppo" and not self.kappa > 1:
            raise ValueError("the KL penalty coefficient kappa must exceed 1 for the PPO objective")
        if self.ppo_epochs < 1 or self.return_window < 1 or self.max_steps < 0:
            raise ValueError("ppo_epochs and return_window must be >= 1, max_steps >= 0")

    def chain(self, m: int) -> TimescaleChain:
        return TimescaleChain(m, self.alpha0, self.beta0, self.eta0, self.rate_scale, self.tau0, self.beta_spread)


class Batch(NamedTuple):
    states: np.ndarray      # (B,)
    actions: np.ndarray     # (B,)
    deltas: np.ndarray      # (m, B) TD errors used as advantages

    @classmethod
    def from_records(cls, pairs) -> "Batch":
        """Build from an iterable of ``(TransitionRecord, delta_vector)``."""
        pairs = list(pairs)
        if not pairs:
            raise ValueError("batch must be nonempty")
        st = np.array([r.state for r, _ in pairs], dtype=np.int64)
        ac = np.array([r.action for r, _ in pairs], dtype=np.int64)
        de = np.array([np.atleast_1d(d) for _, d in pairs], dtype=float).T
        return cls(st, ac, de)


# -- softmax ------------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_distribution(params: SoftmaxPolicyParams, s: int) -> np.ndarray:
    return _softmax(params.features[s] @ params.theta)


# -- critics ------------------------------------------------------------------

def critic_td0_update(critics: LinearCritics, rec: TransitionRecord, i: int, alpha: float,
                      gamma: float) -> float:
    """TD(0) step on critic ``i`` in place; returns the TD error."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    phi = critics.features[rec.state]
    v_s = float(phi @ critics.w[i])
    v_next = 0.0 if rec.terminal else float(critics.features[rec.next_state] @ critics.w[i])
    delta = float(rec.rewards[i]) + gamma * v_next - v_s
    critics.w[i] += alpha * delta * phi
    return delta


# -- objectives ---------------------------------------------------------------

def _check_batch(batch: Batch):
    if len(batch.states) == 0:
        raise ValueError("batch must be nonempty")


def a2c_objective(params: SoftmaxPolicyParams, batch: Batch, i: int) -> float:
    _check_batch(batch)
    logp = _log_softmax(params.features[batch.states] @ params.theta)
    picked = logp[np.arange(len(batch.states)), batch.actions]
    return float(np.mean(picked * batch.deltas[i]))


def a2c_objective_grad(params: SoftmaxPolicyParams, batch: Batch, i: int) -> np.ndarray:
    """Mean of phi(s) (1_a - pi(.|s))^T delta_i over the batch."""
    _check_batch(batch)
    phi = params.features[batch.states]
    probs = _softmax(phi @ params.theta)
    score = -probs
    score[np.arange(len(batch.states)), batch.actions] += 1.0
    return phi.T @ (score * batch.deltas[i][:, None]) / len(batch.states)


def _ppo_terms(params, params_old, batch):
    phi = params.features[batch.states]
    rows = np.arange(len(batch.states))
    logits = phi @ params.theta
    logits_old = phi @ params_old.theta
    probs = _softmax(logits)
    probs_old = _softmax(logits_old)
    if np.any(probs_old[rows, batch.actions] < PROB_FLOOR):
        raise DegenerateSnapshot("old policy assigns probability below 1e-300 to a sampled action")
    logp = _log_softmax(logits)
    logq = _log_softmax(logits_old)
    ratio = np.exp(logp[rows, batch.actions] - logq[rows, batch.actions])
    kl = np.sum(probs * (logp - logq), axis=1)
    return phi, rows, probs, logp, logq, ratio, kl


def ppo_objective(params: SoftmaxPolicyParams, params_old: SoftmaxPolicyParams, batch: Batch, i: int,
                  kappa: float) -> float:
    _check_batch(batch)
    _, _, _, _, _, ratio, kl = _ppo_terms(params, params_old, batch)
    return float(np.mean(ratio * batch.deltas[i] - kappa * kl))


def ppo_objective_grad(params: SoftmaxPolicyParams, params_old: SoftmaxPolicyParams, batch: Batch, i: int,
                       kappa: float) -> np.ndarray:
    """Gradient of the batch mean of ratio * delta_i - kappa * KL(pi || pi_old)."""
    _check_batch(batch)
    phi, rows, probs, logp, logq, ratio, kl = _ppo_terms(params, params_old, batch)
    score = -probs
    score[rows, batch.actions] += 1.0
    g_ratio = score * (ratio * batch.deltas[i])[:, None]
    g_kl = probs * (logp - logq - kl[:, None])
    return phi.T @ (g_ratio - kappa * g_kl) / len(batch.states)


# -- multi-timescale coupling -------------------------------------------------

def timescale_coefficients(t: float, m: int, lam: Multipliers, chain: TimescaleChain) -> np.ndarray:
    """c_i = beta_i + lam_i * sum_{j > i} beta_j."""
    if t < 1:
        raise ValueError("t must be >= 1")
    beta = chain.betas(t)[:m]
    tail = np.concatenate([np.cumsum(beta[::-1])[::-1][1:], [0.0]])
    return beta + np.asarray(lam.lam, dtype=float)[:m] * tail


def lambda_update(lam: Multipliers, tracker: ObjectiveTracker, k_est, eta: float, tau: float) -> Multipliers:
    """Projected ascent on the constraint violation for every converged objective.

    The last objective constrains nothing, so its multiplier is never moved.
    """
    new = lam.lam.copy()
    k_est = np.asarray(k_est, dtype=float)
    for j in range(min(tracker.active, len(new) - 1)):
        new[j] = max(0.0, new[j] + eta * (tracker.k_hat[j] - tau - k_est[j]))
    return Multipliers(new)


def theta_update(params: SoftmaxPolicyParams, grad, rate_applied: bool = False, step: int | None = None,
                 rate: float = 1.0) -> SoftmaxPolicyParams:
    """Add the coefficient-weighted gradient and clamp to the box [-theta_max, theta_max].

    With ``rate_applied`` false the gradient is scaled by ``rate`` first.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.theta.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match theta {params.theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericFailure(f"non-finite policy gradient at step {step}")
    step_vec = grad if rate_applied else rate * grad
    params.theta = np.clip(params.theta + step_vec, -params.theta_max, params.theta_max)
    return params


def track_objective_convergence(tracker: ObjectiveTracker, i: int, estimate: float):
    """Feed the frontier objective's estimate; returns ``(tracker, converged_now)``."""
    if i != tracker.active or i >= len(tracker.converged):
        raise ValueError(f"only the frontier objective {tracker.active} can be tracked")
    win = tracker.samples[i]
    win.append(float(estimate))
    tracker.k_hat[i] = float(estimate)
    if len(win) < tracker.window:
        return tracker, False
    vals = np.fromiter(win, dtype=float, count=len(win))
    mean = vals.mean()
    if (vals.max() - vals.min()) / max(1.0, abs(mean)) < tracker.threshold:
        tracker.converged[i] = True
        tracker.k_hat[i] = mean
        return tracker, True
    return tracker, False


# -- training loop ------------------------------------------------------------

class PbResult(NamedTuple):
    params: SoftmaxPolicyParams
    critics: LinearCritics
    multipliers: Multipliers
    series: MetricsSeries
    trace: np.ndarray            # rows (t, i, lambda_i, c_i, beta_i, eta_active)


class _Learner:
    """Batch-level state and update shared by the compiled and reference loops."""

    def __init__(self, m: int, config: PblrlConfig, params: SoftmaxPolicyParams, critics: LinearCritics,
                 initial: np.ndarray):
        self.m = m
        self.critics = critics
        self.start_features = initial @ critics.features
        self.config = config
        self.chain = config.chain(m)
        self.params = params
        self.lam = Multipliers.zeros(m)
        self.tracker = ObjectiveTracker.create(m, config.window, config.threshold)
        self.recent = deque(maxlen=config.return_window)
        self.trace = []
        self.events = []

    def add_episodes(self, disc: np.ndarray):
        for row in disc:
            self.recent.append(np.array(row, dtype=float))

    def estimates(self):
        if self.config.estimator == "critic":
            return self.critics.w @ self.start_features
        if not self.recent:
            return None
        return np.mean(np.asarray(self.recent), axis=0)

    def update(self, batch: Batch, t: int):
        cfg, chain = self.config, self.chain
        k_est = self.estimates()
        if k_est is not None:
            j = self.tracker.active
            if j < self.m:
                _, hit = track_objective_convergence(self.tracker, j, k_est[j])
                if hit:
                    self.events.append((t, j))
            self.lam = lambda_update(self.lam, self.tracker, k_est, chain.eta(self.tracker.active, t), chain.tau(t))
        coef = timescale_coefficients(t, self.m, self.lam, chain)
        if cfg.objective == "a2c":
            grad = sum(coef[i] * a2c_objective_grad(self.params, batch, i) for i in range(self.m))
            theta_update(self.params, grad, rate_applied=True, step=t)
        else:
            old = self.params.copy()
            for _ in range(cfg.ppo_epochs):
                grad = sum(coef[i] * ppo_objective_grad(self.params, old, batch, i, cfg.kappa)
                           for i in range(self.m))
                theta_update(self.params, grad, rate_applied=True, step=t)
        eta = chain.eta(self.tracker.active, t)
        beta = chain.betas(t)
        for i in range(self.m):
            self.trace.append((t, i, self.lam.lam[i], coef[i], beta[i], eta))


def _check(momdp: Momdp):
    problems = validate(momdp)
    if problems:
        raise ValueError("invalid MOMDP: " + "; ".join(problems[:5]))


def draw_block(rng: np.random.Generator, n: int, m: int):
    return rng.random((n, K.PB_UNIFORMS)), rng.standard_normal((n, m))


def _finish(learner: _Learner, critics, rets, discs, lens, steps, t, m) -> PbResult:
    cat = lambda xs, shape, dt=float: np.concatenate(xs) if xs else np.zeros(shape, dt)
    series = MetricsSeries(
        returns=cat(rets, (0, m)), lengths=cat(lens, 0, np.int64), global_step=cat(steps, 0, np.int64),
        discounted=cat(discs, (0, m)),
    )
    series.extra["steps"] = int(t)
    series.extra["converged_events"] = list(learner.events)
    series.extra["k_hat"] = learner.tracker.k_hat.copy()
    series.extra["converged"] = learner.tracker.converged.copy()
    trace = np.array(learner.trace, dtype=float).reshape(-1, 6)
    return PbResult(learner.params, critics, learner.lam, series, trace)


def _setup(momdp, config, rng, features):
    rng = np.random.default_rng(config.seed) if rng is None else rng
    m, n_s, n_a = momdp.num_objectives, momdp.num_states, momdp.num_actions
    params = SoftmaxPolicyParams.zeros(n_s, n_a, features, config.theta_max)
    critics = LinearCritics.zeros(m, params.features)
    return rng, m, params, critics


def run_pblrl(momdp: Momdp, config: PblrlConfig, rng: np.random.Generator | None = None,
              features=None, check: bool = True) -> PbResult:
    """Run PB-LRL: on-policy steps with per-step critic updates and one actor update per batch.

    A trailing partial batch at ``max_steps`` is discarded.
    """
    if check:
        _check(momdp)
    rng, m, params, critics = _setup(momdp, config, rng, features)
    learner = _Learner(m, config, params, critics, momdp.initial)
    chain = learner.chain
    bsz = config.batch_size
    s0 = categorical_from_uniform(momdp.initial_cdf, rng.random())
    st = np.array([s0, 0, 0, 0, 0, 0], dtype=np.int64)
    ep_acc = np.concatenate([np.zeros(2 * m), np.ones(m)])
    b_states = np.empty(bsz, np.int64)
    b_actions = np.empty(bsz, np.int64)
    b_deltas = np.empty((m, bsz))
    horizon = momdp.episode_horizon or 0
    rets, discs, lens, steps = [], [], [], []
    while st[2] < config.max_steps:
        n = min(CHUNK, config.max_steps - int(st[2]))
        uni, nor = draw_block(rng, n, m)
        pos = 0
        while pos < n:
            cap = min(n - pos, bsz)
            out_ret = np.empty((cap, m))
            out_disc = np.empty((cap, m))
            out_len = np.empty(cap, np.int64)
            out_step = np.empty(cap, np.int64)
            K.pb_steps(momdp.transition_cdf, momdp.reward_mean, momdp.reward_noise_sigma, momdp.discounts,
                       momdp.initial_cdf, momdp.terminal, horizon, params.features, params.theta, critics.w,
                       chain.alpha0, chain.exponent(0), chain.scale, st, ep_acc, uni, nor, pos,
                       b_states, b_actions, b_deltas, bsz, out_ret, out_disc, out_len, out_step)
            k = int(st[4])
            pos = int(st[5])
            if k:
                rets.append(out_ret[:k].copy())
                discs.append(out_disc[:k].copy())
                lens.append(out_len[:k].copy())
                steps.append(out_step[:k].copy())
                learner.add_episodes(out_disc[:k])
            if st[3] == bsz:
                learner.update(Batch(b_states.copy(), b_actions.copy(), b_deltas.copy()), int(st[2]))
                st[3] = 0
    return _finish(learner, critics, rets, discs, lens, steps, st[2], m)


def run_pblrl_reference(momdp: Momdp, config: PblrlConfig, rng: np.random.Generator | None = None,
                        features=None) -> PbResult:
    """Slow loop built from the public operations; replays the compiled loop's random stream."""
    rng, m, params, critics = _setup(momdp, config, rng, features)
    learner = _Learner(m, config, params, critics, momdp.initial)
    chain = learner.chain
    s = categorical_from_uniform(momdp.initial_cdf, rng.random())
    t = ep_len = 0
    ep_ret = np.zeros(m)
    ep_disc = np.zeros(m)
    gpow = np.ones(m)
    pending = []
    rets, discs, lens, steps = [], [], [], []
    horizon = momdp.episode_horizon or 0
    while t < config.max_steps:
        n = min(CHUNK, config.max_steps - t)
        uni, nor = draw_block(rng, n, m)
        for k in range(n):
            u = uni[k]
            probs = _softmax_scalar(params.features[s], params.theta)
            a = categorical_from_uniform(np.cumsum(probs), u[0])
            rec = transition_from_draws(momdp, s, a, u[1], nor[k], t)
            alpha = chain.alpha(t)
            deltas = np.array([critic_td0_update(critics, rec, i, alpha, float(momdp.discounts[i]))
                               for i in range(m)])
            pending.append((rec, deltas))
            ep_ret += rec.rewards
            ep_disc += gpow * rec.rewards
            gpow *= momdp.discounts
            t += 1
            ep_len += 1
            if rec.terminal or (horizon > 0 and ep_len >= horizon):
                rets.append(ep_ret.copy()[None])
                discs.append(ep_disc.copy()[None])
                lens.append(np.array([ep_len]))
                steps.append(np.array([t]))
                learner.add_episodes(ep_disc[None])
                ep_ret[:] = 0.0
                ep_disc[:] = 0.0
                gpow[:] = 1.0
                ep_len = 0
                s = categorical_from_uniform(momdp.initial_cdf, u[2])
            else:
                s = rec.next_state
            if len(pending) == config.batch_size:
                learner.update(Batch.from_records(pending), t)
                pending = []
    return _finish(learner, critics, rets, discs, lens, steps, t, m)


def _softmax_scalar(phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # scalar libm exp, summed left to right, to mirror the compiled loop bit for bit
    n_a = theta.shape[1]
    z = [sum(float(phi[k]) * float(theta[k, a]) for k in range(len(phi))) for a in range(n_a)]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    tot = 0.0
    for v in e:
        tot += v
    return np.array([v / tot for v in e])


# -- export -------------------------------------------------------------------

def write_policy_csv(params: SoftmaxPolicyParams, path) -> None:
    table = params.table()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state", "action", "probability"])
        for s in range(table.shape[0]):
            for a in range(table.shape[1]):
                w.writerow([s, a, format(table[s, a], ".17g")])


def write_trace_csv(trace: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "i", "lambda_i", "c_i", "beta_i", "eta_active"])
        for row in trace:
            w.writerow([int(row[0]), int(row[1]) + 1, *(format(x, ".17g") for x in row[2:])])
