"""Exact lexicographic optima for small finite MOMDPs.

Two independent routes: nested restricted value iteration over per-state
action sets, and brute-force enumeration of deterministic policies with the
lexicographic order applied to the J vectors.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .momdp import Momdp

EXACT_TOL = 1e-12
GAP_TIE = 1e-9


class SolverFailure(RuntimeError):
    pass


class InstanceTooLarge(ValueError):
    pass


class NoGapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LexSolution:
    q_tables: np.ndarray      # (m, S, A)
    action_sets: np.ndarray   # (m, S, A) bool; row i holds the set after objective i
    policy: np.ndarray        # (S,) deterministic
    j_vector: np.ndarray      # (m,)
    min_gap: float | None
    tied_objectives: tuple[int, ...] = ()

    def optimal_actions(self, s: int) -> list[int]:
        return [int(a) for a in np.nonzero(self.action_sets[-1, s])[0]]


def _policy_matrix(momdp: Momdp, policy) -> np.ndarray:
    """Return an (S, A) stochastic matrix for a deterministic or stochastic policy."""
    policy = np.asarray(policy)
    n_s, n_a = momdp.num_states, momdp.num_actions
    if policy.ndim == 1:
        pi = np.zeros((n_s, n_a))
        pi[np.arange(n_s), policy.astype(int)] = 1.0
        return pi
    if policy.shape != (n_s, n_a):
        raise ValueError(f"policy must be shaped ({n_s},) or ({n_s}, {n_a})")
    return policy.astype(np.float64)


def policy_state_values(momdp: Momdp, policy) -> np.ndarray:
    """Exact v_pi for every objective, shape (m, S), via a direct linear solve."""
    pi = _policy_matrix(momdp, policy)
    p_pi = np.einsum("sa,sat->st", pi, momdp.transition)
    r_pi = np.einsum("sa,isa->is", pi, momdp.expected_reward)
    eye = np.eye(momdp.num_states)
    v = np.empty_like(r_pi)
    for i, g in enumerate(momdp.discounts):
        if not g < 1.0:
            raise SolverFailure(f"objective {i} has discount {g}; exact evaluation needs gamma < 1")
        a_mat = eye - g * p_pi
        v[i] = np.linalg.solve(a_mat, r_pi[i])
        resid = np.max(np.abs(a_mat @ v[i] - r_pi[i]), initial=0.0)
        scale = max(1.0, np.max(np.abs(v[i]), initial=0.0))
        if resid > 1e-10 * scale:
            raise SolverFailure(f"objective {i}: linear-solve residual {resid:.3g} above tolerance")
    return v


def policy_q_values(momdp: Momdp, policy) -> np.ndarray:
    v = policy_state_values(momdp, policy)
    return momdp.expected_reward + momdp.discounts[:, None, None] * np.einsum("sat,it->isa", momdp.transition, v)


def evaluate_policy_exact(momdp: Momdp, policy) -> np.ndarray:
    """J_i = sum_s I(s) v_pi^i(s) for each objective, on noise-free reward means."""
    return policy_state_values(momdp, policy) @ momdp.initial


def value_iteration_restricted(momdp: Momdp, objective_index: int, action_sets, tol: float = EXACT_TOL,
                               max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of the Bellman optimality operator whose max ranges over ``action_sets``.

    ``action_sets`` is an (S, A) boolean mask; Q is returned for every action.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    allowed = np.asarray(action_sets, dtype=bool)
    if allowed.shape != (momdp.num_states, momdp.num_actions):
        raise ValueError("action_sets must be an (S, A) mask")
    if not np.all(allowed.any(axis=1)):
        raise ValueError("every per-state action set must be nonempty")
    g = momdp.discounts[objective_index]
    r = momdp.expected_reward[objective_index]
    t = momdp.transition
    q = r.copy()
    for _ in range(max_iter):
        v = np.where(allowed, q, -np.inf).max(axis=1)
        q_new = r + g * (t @ v)
        resid = np.max(np.abs(q_new - q))
        q = q_new
        if resid < tol:
            return q
    raise SolverFailure(f"restricted value iteration did not reach residual {tol} in {max_iter} sweeps")


def _nested_sets(q: np.ndarray, tie_tol: float) -> np.ndarray:
    allowed = np.ones(q.shape[1:], dtype=bool)
    out = np.empty(q.shape, dtype=bool)
    for i in range(q.shape[0]):
        best = np.where(allowed, q[i], -np.inf).max(axis=1, keepdims=True)
        allowed = allowed & (q[i] >= best - tie_tol)
        out[i] = allowed
    return out


def lex_value_iteration(momdp: Momdp, tie_tol: float = 1e-9, tol: float = EXACT_TOL) -> LexSolution:
    if tie_tol <= 0:
        raise ValueError("tie_tol must be positive")
    m, n_s, n_a = momdp.num_objectives, momdp.num_states, momdp.num_actions
    allowed = np.ones((n_s, n_a), dtype=bool)
    qs = np.empty((m, n_s, n_a))
    sets = np.empty((m, n_s, n_a), dtype=bool)
    for i in range(m):
        qs[i] = value_iteration_restricted(momdp, i, allowed, tol)
        best = np.where(allowed, qs[i], -np.inf).max(axis=1, keepdims=True)
        allowed = allowed & (qs[i] >= best - tie_tol)
        sets[i] = allowed
    policy = np.argmax(sets[-1], axis=1)
    j = evaluate_policy_exact(momdp, policy)
    try:
        gap = min_action_gap(qs)
    except NoGapError:
        gap = None
    return LexSolution(qs, sets, policy, j, gap, _tied_objectives(qs, momdp.terminal))


def _pair_gaps(q: np.ndarray) -> np.ndarray:
    n_a = q.shape[-1]
    i, j = np.triu_indices(n_a, k=1)
    return np.abs(q[..., i] - q[..., j])


def _tied_objectives(q: np.ndarray, terminal: np.ndarray) -> tuple[int, ...]:
    gaps = _pair_gaps(q[:, ~terminal])
    return tuple(int(i) for i in range(q.shape[0] - 1) if gaps[i].size and np.any(gaps[i] <= GAP_TIE))


def min_action_gap(sol) -> float:
    """Smallest |q_i(s,a) - q_i(s,a')| above 1e-9 over objectives, states and action pairs.

    Accepts a LexSolution or a raw (m, S, A) array of q values.
    """
    q = sol.q_tables if isinstance(sol, LexSolution) else np.asarray(sol, dtype=float)
    if q.ndim == 2:
        q = q[None]
    gaps = _pair_gaps(q).ravel()
    gaps = gaps[gaps > GAP_TIE]
    if gaps.size == 0:
        raise NoGapError("all action pairs are tied on every objective")
    return float(gaps.min())


def enumerate_policy_values(momdp: Momdp, chunk: int = 4096) -> np.ndarray:
    """J vectors of all deterministic stationary policies, in itertools.product order."""
    n_s, n_a, m = momdp.num_states, momdp.num_actions, momdp.num_objectives
    total = n_a ** n_s
    out = np.empty((total, m))
    eye = np.eye(n_s)
    r = momdp.expected_reward
    it = itertools.product(range(n_a), repeat=n_s)
    rows = np.arange(n_s)
    done = 0
    while done < total:
        pols = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        p = momdp.transition[rows[None, :], pols]             # (k, S, S)
        for i in range(m):
            rhs = r[i][rows[None, :], pols]                       # (k, S)
            v = np.linalg.solve(eye[None] - momdp.discounts[i] * p, rhs[..., None])[..., 0]
            out[done:done + len(pols), i] = v @ momdp.initial
        done += len(pols)
    return out


def brute_force_lex_optimal(momdp: Momdp, tie_tol: float = 1e-9, guard: int = 10**6):
    """Enumerate every deterministic policy and filter level by level on J.

    Returns ``(policy, j_vector)`` for the first survivor in enumeration order.
    """
    n_s, n_a = momdp.num_states, momdp.num_actions
    if n_a ** n_s > guard:
        raise InstanceTooLarge(f"|A|^|S| = {n_a}^{n_s} exceeds guard {guard}")
    js = enumerate_policy_values(momdp)
    survivors = np.arange(js.shape[0])
    for i in range(js.shape[1]):
        vals = js[survivors, i]
        survivors = survivors[vals >= vals.max() - tie_tol]
    k = int(survivors[0])
    policy = np.array(np.unravel_index(k, (n_a,) * n_s)) if n_s else np.zeros(0, dtype=int)
    return policy.astype(int), js[k].copy()


def write_solution(sol: LexSolution, csv_path, summary_path) -> None:
    m, n_s, n_a = sol.q_tables.shape
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["objective", "state", "action", "q_value"])
        for i in range(m):
            for s in range(n_s):
                for a in range(n_a):
                    w.writerow([i + 1, s, a, format(sol.q_tables[i, s, a], ".17g")])
    summary = {
        "policy": [int(a) for a in sol.policy],
        "optimal_action_sets": [sol.optimal_actions(s) for s in range(n_s)],
        "j_vector": [float(x) for x in sol.j_vector],
        "min_gap": sol.min_gap,
        "tied_objectives": [i + 1 for i in sol.tied_objectives],
    }
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
