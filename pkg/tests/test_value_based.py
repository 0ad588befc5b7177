import numpy as np
import pytest

from classical import td_control
from lexrl.lexoracle import lex_value_iteration
from lexrl.momdp import RandomMomdpConfig, TransitionRecord, generate_random_momdp, tie_momdp
from lexrl.value_based import (ExplorationSchedule, QTables, StepSizeSchedule, ToleranceSpec, VblrlConfig,
                               bandit_action_distribution, expected_bootstrap, expected_sarsa_update,
                               greedy_policy, lex_double_q_update, lex_epsilon_greedy, lex_filter, lex_q_update,
                               restricted_max, run_vblrl, run_vblrl_reference, sarsa_update)

RULES = ("lexq", "sarsa", "expected_sarsa", "double_q")


def tables(*rows_per_objective):
    """QTables with one state from per-objective action rows."""
    return QTables(np.array(rows_per_objective, dtype=float)[:, None, :])


def rec(s=0, a=0, s2=0, r=(1.0,), terminal=False):
    return TransitionRecord(s, a, s2, np.array(r, dtype=float), terminal)


# -- schedules and tolerances ------------------------------------------------------

def test_schedules():
    assert StepSizeSchedule("visit_power", 1.0, 0.5 + 1e-9).value(0) == 1.0
    assert StepSizeSchedule("visit_power", 0.8, 1.0).value(3) == pytest.approx(0.2)
    assert StepSizeSchedule("constant", 0.01).value(10**6) == 0.01
    assert ExplorationSchedule("visit_power", 1.0, 0.5).value(99) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        StepSizeSchedule("visit_power", 1.0, 0.5)
    with pytest.raises(ValueError):
        ExplorationSchedule("constant", 1.5)
    assert StepSizeSchedule().satisfies_robbins_monro
    assert not StepSizeSchedule("constant", 0.1).satisfies_robbins_monro


def test_tolerance_kinds():
    q = tables([1.0, -4.0, 0.5], [0.0, 1.0, 2.0])
    assert ToleranceSpec.constant(0.3).evaluate(q, 0, 1) == 0.3
    assert ToleranceSpec.proportional(0.1).evaluate(q, 0, 0) == pytest.approx(0.1)
    # level 1 is evaluated on the survivors of level 0 (only action 0 within 0.1 of 1.0)
    assert ToleranceSpec.proportional(0.1).evaluate(q, 0, 1) == pytest.approx(1e-9)
    assert ToleranceSpec.decaying(1.0, 0.5).evaluate(q, 0, 0, t=3) == pytest.approx(0.5)
    assert ToleranceSpec.decaying(1.0, 0.5).limit(1.0) == 0.0
    assert ToleranceSpec.decaying(1.0, 0.0).limit(1.0) == 1.0
    with pytest.raises(ValueError):
        ToleranceSpec.constant(0.0)


def test_update_tolerance_must_eventually_sit_below_bandit():
    with pytest.raises(ValueError):
        VblrlConfig(bandit_tolerance=ToleranceSpec.constant(0.01), update_tolerance=ToleranceSpec.constant(0.02))
    VblrlConfig(bandit_tolerance=ToleranceSpec.constant(0.02), update_tolerance=ToleranceSpec.constant(0.01))
    VblrlConfig(bandit_tolerance=ToleranceSpec.decaying(1.0, 0.1), update_tolerance=ToleranceSpec.decaying(5.0, 0.2))


# -- lex_filter ------------------------------------------------------------------

def test_filter_worked_example():
    q = tables([1.0, 0.99, 0.5], [0.0, 1.0, 0.0])
    sets = lex_filter(q, 0, [0.02, 0.02])
    assert sets[0].tolist() == [True, True, False]
    assert sets[1].tolist() == [False, True, False]


def test_filter_wide_tolerance_keeps_everything():
    q = tables([1.0, 0.2, 0.5], [3.0, 1.0, 0.0])
    assert lex_filter(q, 0, [5.0, 5.0])[-1].all()


def test_filter_tiny_tolerance_is_nested_argmax():
    rng = np.random.default_rng(0)
    for _ in range(200):
        vals = rng.integers(0, 3, size=(3, 4)).astype(float) + rng.random((3, 4)) * 1e-3 * (rng.random() < 0.5)
        sets = lex_filter(QTables(vals[:, None, :]), 0, [1e-6] * 3)
        alive = np.arange(4)
        for i in range(3):
            alive = alive[vals[i, alive] >= vals[i, alive].max() - 1e-6]
            assert set(np.flatnonzero(sets[i])) == set(alive)


def test_filter_rejects_negative_tolerance():
    with pytest.raises(ValueError):
        lex_filter(tables([1.0, 0.0]), 0, [-0.1])


def test_restricted_max():
    q = tables([1.0, 0.99, 0.5], [0.0, 1.0, 7.0])
    assert restricted_max(q, 0, 1, [0.02, 0.02]) == 1.0
    assert restricted_max(q, 0, 0, [0.02, 0.02]) == 1.0


# -- bandit -------------------------------------------------------------------------

def test_bandit_distribution_examples():
    q = tables([0.0, 1.0, 0.0])
    assert np.round(bandit_action_distribution(q, 0, 0.05, [0.01]), 4).tolist() == [0.0167, 0.9667, 0.0167]
    assert np.allclose(bandit_action_distribution(q, 0, 1.0, [0.01]), 1 / 3)
    flat = tables([2.0, 2.0, 2.0])
    assert np.allclose(bandit_action_distribution(flat, 0, 0.0, [0.01]), 1 / 3)
    with pytest.raises(ValueError):
        bandit_action_distribution(q, 0, 1.5, [0.01])


def test_epsilon_zero_always_greedy():
    q = QTables(np.array([[[0.0, 1.0, 0.995, 0.2]]]))
    counts = np.zeros(1, np.int64)
    rng = np.random.default_rng(1)
    picks = {lex_epsilon_greedy(q, 0, counts, ExplorationSchedule("constant", 0.0), ToleranceSpec.constant(0.01),
                                0, rng) for _ in range(500)}
    assert picks == {1, 2}
    assert counts[0] == 500


def test_bandit_empirical_tv():
    q = QTables(np.array([[[0.3, 1.0, 0.995, 0.2]], [[5.0, 0.0, 1.0, 9.0]]]))
    counts = np.zeros(1, np.int64)
    rng = np.random.default_rng(2)
    tol = ToleranceSpec.constant(0.01)
    n = 10**5
    draws = np.array([lex_epsilon_greedy(q, 0, counts, ExplorationSchedule("constant", 0.05), tol, 0, rng)
                      for _ in range(n)])
    emp = np.bincount(draws, minlength=4) / n
    assert 0.5 * np.abs(emp - bandit_action_distribution(q, 0, 0.05, tol)).sum() < 0.01


# -- updates ------------------------------------------------------------------------

def test_lexq_arithmetic():
    q = QTables(np.zeros((1, 2, 2)))
    q.q[0, 1] = [2.0, 1.0]
    lex_q_update(q, rec(0, 0, 1), 0, 0.5, [0.01], gamma=0.9)
    assert q.q[0, 0, 0] == pytest.approx(1.4)


def test_lexq_first_objective_is_plain_q():
    rng = np.random.default_rng(3)
    q = QTables(rng.random((2, 3, 3)))
    base = q.copy()
    lex_q_update(q, rec(0, 1, 2, (0.7, 0.1)), 0, 0.3, [0.01, 0.01], gamma=0.8)
    assert q.q[0, 0, 1] == 0.7 * base.q[0, 0, 1] + 0.3 * (0.7 + 0.8 * base.q[0, 2].max())


def test_lexq_restricts_second_objective_and_zero_alpha():
    q = QTables(np.zeros((2, 2, 3)))
    q.q[0, 1] = [1.0, 1.0, 0.0]
    q.q[1, 1] = [0.0, 2.0, 9.0]
    lex_q_update(q, rec(0, 0, 1, (0.0, 0.0)), 1, 1.0, [0.01, 0.01], gamma=1.0 - 1e-12)
    assert q.q[1, 0, 0] == pytest.approx(2.0)
    before = q.copy()
    lex_q_update(q, rec(0, 0, 1, (5.0, 5.0)), 1, 0.0, [0.01, 0.01], gamma=0.9)
    assert np.array_equal(q.q, before.q)


def test_terminal_bootstrap_is_zero():
    q = QTables(np.ones((1, 2, 2)))
    sarsa_update(q, rec(0, 0, 1, (2.0,), terminal=True), 1, 0, 1.0, gamma=0.9)
    assert q.q[0, 0, 0] == 2.0
    lex_q_update(q, rec(0, 1, 1, (3.0,), terminal=True), 0, 1.0, [0.01], gamma=0.9)
    assert q.q[0, 0, 1] == 3.0


def test_sarsa_arithmetic_and_greedy_coincidence():
    q = QTables(np.ones((1, 2, 2)))
    sarsa_update(q, rec(0, 0, 1, (0.0,)), 0, 0, 0.1, gamma=0.9)
    assert q.q[0, 0, 0] == pytest.approx(0.99)
    rng = np.random.default_rng(4)
    a = QTables(rng.random((1, 3, 3)))
    b = a.copy()
    greedy = int(np.argmax(a.q[0, 2]))
    sarsa_update(a, rec(0, 1, 2, (0.4,)), greedy, 0, 0.25, gamma=0.9)
    lex_q_update(b, rec(0, 1, 2, (0.4,)), 0, 0.25, [1e-12], gamma=0.9)
    assert a.q[0, 0, 1] == b.q[0, 0, 1]


def test_expected_sarsa_examples():
    q = QTables(np.zeros((1, 2, 3)))
    q.q[0, 1] = [0.0, 1.0, 0.0]
    assert expected_bootstrap(q, 1, 0, 0.05, [0.01]) == pytest.approx(0.05 / 3 + 0.95, abs=1e-15)
    expected_sarsa_update(q, rec(0, 0, 1, (0.5,)), 0, 1.0, 0.05, [0.01], gamma=0.9)
    assert q.q[0, 0, 0] == pytest.approx(0.5 + 0.9 * (0.95 + 0.05 / 3))
    # eps = 1 averages plainly; eps = 0 with a singleton set equals greedy SARSA
    q2 = QTables(np.zeros((1, 2, 3)))
    q2.q[0, 1] = [0.3, 1.2, 0.6]
    assert expected_bootstrap(q2, 1, 0, 1.0, [0.01]) == pytest.approx(0.7)
    a, b = q2.copy(), q2.copy()
    expected_sarsa_update(a, rec(0, 2, 1, (1.0,)), 0, 0.5, 0.0, [0.01], gamma=0.9)
    sarsa_update(b, rec(0, 2, 1, (1.0,)), 1, 0, 0.5, gamma=0.9)
    assert a.q[0, 0, 2] == pytest.approx(b.q[0, 0, 2], abs=1e-15)


def test_expected_sarsa_target_is_analytic_expectation():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = QTables(rng.random((2, 2, 4)))
        eps = rng.random()
        p = bandit_action_distribution(q, 1, eps, [0.1, 0.1])
        for i in range(2):
            assert expected_bootstrap(q, 1, i, eps, [0.1, 0.1]) == pytest.approx(float(p @ q.q[i, 1]), abs=1e-14)


def test_double_q_symmetry_and_zero_alpha():
    rng = np.random.default_rng(6)
    base = rng.random((2, 3, 3))
    dq = QTables(base.copy(), base.copy(), base.copy())
    lq = QTables(base.copy())
    r = rec(0, 1, 2, (0.3, 0.8))
    for i in range(2):
        lex_double_q_update(dq, r, i, 0.5, [0.05, 0.05], gamma=0.9, branch_a=True)
        lex_q_update(lq, r, i, 0.5, [0.05, 0.05], gamma=0.9)
    assert np.allclose(dq.qa[:, 0, 1], lq.q[:, 0, 1], atol=1e-15)
    assert np.array_equal(dq.qb, base)
    assert np.allclose(dq.q, 0.5 * (dq.qa + dq.qb))
    frozen = dq.copy()
    lex_double_q_update(dq, r, 0, 0.0, [0.05, 0.05], gamma=0.9, rng=rng)
    assert np.array_equal(dq.qa, frozen.qa) and np.array_equal(dq.qb, frozen.qb)


def test_double_q_branch_frequency():
    rng = np.random.default_rng(7)
    hits = 0
    n = 10**4
    for _ in range(n):
        dq = QTables.zeros(1, 2, 2, double=True)
        lex_double_q_update(dq, rec(0, 0, 1, (1.0,)), 0, 0.5, [0.01], rng=rng, gamma=0.5)
        assert (dq.qa[0, 0, 0] != 0) != (dq.qb[0, 0, 0] != 0)
        hits += dq.qa[0, 0, 0] != 0
    assert abs(hits / n - 0.5) < 0.02


def test_double_q_needs_pairs():
    with pytest.raises(ValueError):
        lex_double_q_update(QTables.zeros(1, 1, 1), rec(), 0, 0.5, [0.1], gamma=0.5, branch_a=True)


def test_q_stays_bounded_under_random_updates():
    rng = np.random.default_rng(8)
    gamma, rmax = 0.9, 1.0
    bound = rmax / (1 - gamma)
    q = QTables.zeros(2, 4, 3, double=True)
    for k in range(20000):
        s, a, s2 = rng.integers(0, 4), rng.integers(0, 3), rng.integers(0, 4)
        r = TransitionRecord(int(s), int(a), int(s2), rng.uniform(-rmax, rmax, 2), bool(rng.random() < 0.05))
        alpha = rng.random()
        i = k % 2
        rule = k % 4
        if rule == 0:
            lex_q_update(q, r, i, alpha, [0.1, 0.1], gamma=gamma)
        elif rule == 1:
            sarsa_update(q, r, int(rng.integers(0, 3)), i, alpha, gamma=gamma)
        elif rule == 2:
            expected_sarsa_update(q, r, i, alpha, rng.random(), [0.1, 0.1], gamma=gamma)
        else:
            lex_double_q_update(q, r, i, alpha, [0.1, 0.1], rng=rng, gamma=gamma)
        assert np.abs(q.q).max() <= bound


# -- learner loop ------------------------------------------------------------------

def test_tie_instance_learns_second_action():
    cfg = VblrlConfig(bandit_tolerance=ToleranceSpec.constant(0.1), step_size=StepSizeSchedule("visit_power", 1, 0.65),
                      exploration=ExplorationSchedule("visit_power", 1, 0.5), max_steps=50_000)
    for rule in RULES:
        res = run_vblrl(tie_momdp(), VblrlConfig(**{**cfg.__dict__, "update_rule": rule}))
        assert res.greedy_sets[-1, 0].tolist() == [False, True], rule


@pytest.mark.parametrize("rule", RULES)
def test_compiled_loop_matches_reference(rule):
    m = generate_random_momdp(RandomMomdpConfig(6, 3, 2, seed=1, horizon=25))
    cfg = VblrlConfig(update_rule=rule, bandit_tolerance=ToleranceSpec.proportional(0.05), max_steps=3000, seed=4)
    fast, slow = run_vblrl(m, cfg), run_vblrl_reference(m, cfg)
    assert fast.q.q.tobytes() == slow.q.q.tobytes()
    assert fast.series.returns.tobytes() == slow.series.returns.tobytes()
    assert np.array_equal(fast.series.global_step, slow.series.global_step)


def test_reference_handles_terminal_states():
    from lexrl.momdp import GridNavConfig, build_gridnav
    m = build_gridnav(GridNavConfig(grid_side=4, unsafe_density=0.2, seed=3, step_limit=30)).momdp
    for rule in RULES:
        cfg = VblrlConfig(update_rule=rule, bandit_tolerance=ToleranceSpec.constant(0.5), max_steps=4000, seed=2)
        assert run_vblrl(m, cfg).q.q.tobytes() == run_vblrl_reference(m, cfg).q.q.tobytes()


@pytest.mark.parametrize("rule,plain", [("lexq", "q"), ("sarsa", "sarsa"), ("expected_sarsa", "expected_sarsa"),
                                        ("double_q", "double_q")])
def test_single_objective_reduces_to_classical_rule(rule, plain):
    m = generate_random_momdp(RandomMomdpConfig(8, 3, 1, seed=2, horizon=40))
    tau = 1e-12
    cfg = VblrlConfig(update_rule=rule, bandit_tolerance=ToleranceSpec.constant(tau),
                      step_size=StepSizeSchedule("visit_power", 1.0, 0.65),
                      exploration=ExplorationSchedule("visit_power", 1.0, 0.2), max_steps=20_000, seed=9)
    res = run_vblrl(m, cfg)
    q, rets = td_control(m, plain, tau=tau, max_steps=20_000, seed=9)
    assert res.q.q[0].tobytes() == q.tobytes()
    assert res.series.returns[:, 0].tobytes() == rets.tobytes()


def test_oracle_agreement_small_instance():
    m = generate_random_momdp(RandomMomdpConfig(5, 3, 2, seed=1000, reward_noise_sigma=0.0))
    sol = lex_value_iteration(m)
    cfg = VblrlConfig(bandit_tolerance=ToleranceSpec.constant(0.5 * sol.min_gap),
                      step_size=StepSizeSchedule("visit_power", 1.0, 0.65),
                      exploration=ExplorationSchedule("visit_power", 1.0, 0.2), max_steps=200_000)
    res = run_vblrl(m, cfg)
    assert np.mean(np.all(res.greedy_sets[-1] == sol.action_sets[-1], axis=1)) >= 0.8


def test_early_stop_on_small_q_changes():
    cfg = VblrlConfig(step_size=StepSizeSchedule("visit_power", 1.0, 1.0), max_steps=10**6, conv_window=20,
                      conv_threshold=1e-3)
    res = run_vblrl(tie_momdp(), cfg)
    assert res.series.extra["stopped_early"]
    assert res.series.extra["steps"] < 10**6
    assert np.all(res.series.q_delta[-20:] < 1e-3)


def test_greedy_policy_is_uniform_over_top_set():
    sets = np.array([[[True, True, False]], [[True, False, True]]])
    assert greedy_policy(sets).tolist() == [[0.5, 0.0, 0.5]]


def test_run_rejects_invalid_momdp_and_config():
    with pytest.raises(ValueError):
        VblrlConfig(max_steps=0)
    with pytest.raises(ValueError):
        VblrlConfig(update_rule="td")
