import json

import numpy as np
import pytest

from lexrl.lexoracle import (InstanceTooLarge, NoGapError, SolverFailure, brute_force_lex_optimal,
                             enumerate_policy_values, evaluate_policy_exact, lex_value_iteration,
                             min_action_gap, policy_q_values, value_iteration_restricted, write_solution)
from lexrl.momdp import Momdp, RandomMomdpConfig, generate_random_momdp, sample_initial, sample_transition, tie_momdp


def one_state(rewards, gamma):
    """One state, one action per reward entry."""
    n_a = len(rewards)
    r = np.array(rewards, dtype=float).reshape(1, 1, n_a, 1)
    return Momdp(np.ones((1, n_a, 1)), r, 0.0, gamma, np.ones(1), np.zeros(1, bool))


def rand(s, a, m, seed, **kw):
    return generate_random_momdp(RandomMomdpConfig(s, a, m, seed=seed, reward_noise_sigma=0.0, **kw))


def lex_greater_equal(x, y, tol=1e-9):
    for a, b in zip(x, y):
        if a > b + tol:
            return True
        if a < b - tol:
            return False
    return True


# -- evaluation ---------------------------------------------------------------------

def test_geometric_series():
    assert evaluate_policy_exact(one_state([1.0], 0.5), [0]) == pytest.approx([2.0], abs=1e-14)


def test_tight_bound_instance():
    delta, gamma = 0.3, 0.8
    m = one_state([delta, 0.0], gamma)
    diff = evaluate_policy_exact(m, [0])[0] - evaluate_policy_exact(m, [1])[0]
    assert diff == pytest.approx(delta / (1 - gamma), abs=1e-13)


def test_evaluation_matches_monte_carlo():
    m = rand(5, 2, 2, seed=17, discount=0.7)
    rng = np.random.default_rng(4)
    pi = rng.dirichlet(np.ones(2), size=5)
    exact = evaluate_policy_exact(m, pi)
    n, depth = 10**6, 60
    # vectorised discounted rollouts (truncation error 0.7^60 is negligible)
    s = np.searchsorted(m.initial_cdf, rng.random(n), side="right")
    total = np.zeros((n, 2))
    disc = 1.0
    pcdf = np.cumsum(pi, axis=1)
    for _ in range(depth):
        a = (rng.random(n)[:, None] >= pcdf[s]).sum(axis=1)
        a = np.minimum(a, 1)
        cdf = m.transition_cdf[s, a]
        s2 = np.minimum((rng.random(n)[:, None] >= cdf).sum(axis=1), 4)
        total += disc * m.reward_mean[:, s, a, s2].T
        disc *= 0.7
        s = s2
    mean, se = total.mean(axis=0), total.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mean - exact) < 3 * se + 1e-9)


def test_scalar_sampler_agrees_with_evaluation_on_short_check():
    m = rand(3, 2, 1, seed=1, discount=0.5)
    rng = np.random.default_rng(0)
    n, acc = 20000, 0.0
    for _ in range(n):
        s, g, ret = sample_initial(m, rng), 1.0, 0.0
        for _ in range(30):
            rec = sample_transition(m, s, 0, rng)
            ret += g * rec.rewards[0]
            g *= 0.5
            s = rec.next_state
        acc += ret
    assert acc / n == pytest.approx(evaluate_policy_exact(m, [0, 0, 0])[0], abs=0.02)


def test_evaluation_rejects_undiscounted():
    m = Momdp(np.ones((1, 1, 1)), np.ones((1, 1, 1, 1)), 0.0, 1.0, np.ones(1), np.zeros(1, bool))
    with pytest.raises(SolverFailure):
        evaluate_policy_exact(m, [0])


# -- restricted value iteration ---------------------------------------------------------

def _plain_vi(m, i, sets, sweeps=10**4):
    r = m.expected_reward[i]
    q = np.zeros_like(r)
    for _ in range(sweeps):
        q = r + m.discounts[i] * m.transition @ np.where(sets, q, -np.inf).max(axis=1)
    return q


def test_full_sets_equal_standard_vi():
    m = rand(6, 3, 1, seed=2)
    full = np.ones((6, 3), bool)
    assert np.allclose(value_iteration_restricted(m, 0, full), _plain_vi(m, 0, full), atol=1e-10)


def test_singleton_sets_are_policy_evaluation():
    m = rand(5, 3, 2, seed=3)
    pol = np.array([2, 0, 1, 1, 0])
    sets = np.zeros((5, 3), bool)
    sets[np.arange(5), pol] = True
    for i in range(2):
        q = value_iteration_restricted(m, i, sets)
        assert np.allclose(q, policy_q_values(m, pol)[i], atol=1e-10)


def test_hand_restricted_sets_match_long_backup():
    m = rand(3, 2, 1, seed=9)
    sets = np.array([[True, False], [True, True], [False, True]])
    assert np.allclose(value_iteration_restricted(m, 0, sets), _plain_vi(m, 0, sets), atol=1e-10)


def test_restricted_vi_errors():
    m = rand(3, 2, 1, seed=0)
    with pytest.raises(ValueError):
        value_iteration_restricted(m, 0, np.ones((3, 2), bool), tol=0)
    with pytest.raises(ValueError):
        value_iteration_restricted(m, 0, np.zeros((3, 2), bool))


# -- lex value iteration ------------------------------------------------------------

def test_tie_instance():
    sol = lex_value_iteration(tie_momdp())
    assert sol.action_sets[0, 0].tolist() == [True, True]
    assert sol.action_sets[1, 0].tolist() == [False, True]
    assert sol.policy.tolist() == [1]
    assert sol.j_vector == pytest.approx([2.0, 2.0], abs=1e-12)
    assert sol.tied_objectives == (0,)


def test_single_objective_is_standard_vi():
    m = rand(6, 3, 1, seed=6)
    sol = lex_value_iteration(m)
    q = _plain_vi(m, 0, np.ones((6, 3), bool))
    assert np.array_equal(sol.policy, np.argmax(q, axis=1))


def test_policy_dominates_every_deterministic_policy():
    m = rand(4, 2, 2, seed=12)
    sol = lex_value_iteration(m)
    for j in enumerate_policy_values(m):
        assert lex_greater_equal(sol.j_vector, j)


def test_cross_oracle_agreement():
    rng = np.random.default_rng(0)
    for k in range(100):
        s, a = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        m = rand(s, a, 2, seed=k)
        sol = lex_value_iteration(m)
        _, j = brute_force_lex_optimal(m)
        assert np.all(np.abs(sol.j_vector - j) <= 1e-8)


def test_nesting_and_monotone_tolerance():
    for k in range(20):
        m = rand(5, 3, 3, seed=100 + k)
        small, big = lex_value_iteration(m, 1e-9), lex_value_iteration(m, 0.05)
        for sol in (small, big):
            assert np.all(sol.action_sets[1:] <= sol.action_sets[:-1])
            assert np.all(sol.action_sets.any(axis=2))
            assert np.all(sol.action_sets[-1, np.arange(5), sol.policy])
        # the first level only sees q_1, which does not depend on the tolerance
        assert np.all(small.action_sets[0] <= big.action_sets[0])


def test_deeper_levels_need_not_grow_with_tolerance():
    # a looser first level admits an action whose q_2 beats the old choice
    m = rand(5, 3, 3, seed=100)
    small, big = lex_value_iteration(m, 1e-9), lex_value_iteration(m, 0.05)
    assert small.action_sets[1, 0].tolist() == [False, False, True]
    assert big.action_sets[1, 0].tolist() == [True, False, False]


def test_lowest_index_tie_break():
    m = one_state([1.0, 1.0, 1.0], 0.5)
    assert lex_value_iteration(m).policy.tolist() == [0]


def test_lex_vi_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        lex_value_iteration(tie_momdp(), tie_tol=0.0)


# -- brute force ------------------------------------------------------------------

def test_brute_force_tie_and_single_objective():
    pol, j = brute_force_lex_optimal(tie_momdp())
    assert pol.tolist() == [1] and j == pytest.approx([2.0, 2.0])
    m = rand(4, 3, 1, seed=5)
    _, j = brute_force_lex_optimal(m)
    assert j[0] == pytest.approx(lex_value_iteration(m).j_vector[0], abs=1e-10)


def test_brute_force_guard():
    with pytest.raises(InstanceTooLarge):
        brute_force_lex_optimal(rand(21, 2, 1, seed=0))


def test_enumeration_order():
    m = rand(2, 2, 1, seed=4)
    js = enumerate_policy_values(m)
    for k, pol in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        assert js[k, 0] == pytest.approx(evaluate_policy_exact(m, list(pol))[0], abs=1e-12)


# -- gaps ---------------------------------------------------------------------------

def test_gap_of_binary_table():
    assert min_action_gap(np.array([[0.0, 1.0], [1.0, 0.0]])) == 1.0


def test_gap_of_tight_bound_instance():
    delta, gamma = 0.3, 0.5
    m = one_state([delta, 0.0], gamma)
    sol = lex_value_iteration(m)
    q_a1 = policy_q_values(m, [0])[0, 0]
    q_a2 = policy_q_values(m, [0])[0, 0] - delta
    assert sol.min_gap == pytest.approx(abs(q_a1 - q_a2), abs=1e-12)
    assert min_action_gap(sol) == pytest.approx(delta, abs=1e-12)


def test_gap_ignores_ties_and_errors_when_all_tied():
    assert min_action_gap(np.array([[1.0, 1.0, 1.25]])) == pytest.approx(0.25)
    with pytest.raises(NoGapError):
        min_action_gap(np.ones((2, 3, 2)))


def test_write_solution(tmp_path):
    sol = lex_value_iteration(tie_momdp())
    write_solution(sol, tmp_path / "q.csv", tmp_path / "s.json")
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "objective,state,action,q_value" and len(lines) == 5
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["optimal_action_sets"] == [[1]] and summary["policy"] == [1]
