"""Plain single-objective learners used as reduction references.

Written against the MOMDP arrays directly, with no lexicographic machinery.
They read randomness in the same layout as the library loops (documented in
``lexrl._kernels``), so an m = 1 run of a lexicographic learner must agree
with them bit for bit.
"""

import math

import numpy as np

VB_COLUMNS = 8
PB_COLUMNS = 3
CHUNK = 16384


def _inv_cdf(cdf, u):
    x = u * cdf[-1]
    return min(int(np.searchsorted(cdf, x, side="right")), len(cdf) - 1)


def _pick(u, n):
    return min(int(u * n), n - 1)


def _power(a0, p, n):
    return a0 / (1.0 + n) ** p


def _eps_greedy(q_row, eps, tau, u0, u1):
    n_a = len(q_row)
    if u0 < eps:
        return _pick(u1, n_a)
    best = q_row.max()
    near = np.flatnonzero(q_row >= best - tau)
    return int(near[_pick(u1, len(near))])


def td_control(momdp, rule, *, tau, step=(1.0, 0.65), explore=(1.0, 0.2), max_steps, seed):
    """Q-learning, SARSA, expected SARSA or double Q-learning on objective 0.

    ``step`` and ``explore`` are visit-power schedules ``(a0, power)``; the
    behaviour policy is epsilon-greedy where ties are actions within ``tau``
    of the greedy value.
    """
    rng = np.random.default_rng(seed)
    n_s, n_a = momdp.num_states, momdp.num_actions
    cdf = np.cumsum(momdp.transition, axis=2)
    icdf = np.cumsum(momdp.initial)
    r_mean = momdp.reward_mean[0]
    sigma = float(momdp.reward_noise_sigma[0])
    gamma = float(momdp.discounts[0])
    horizon = momdp.episode_horizon or 0
    q = np.zeros((n_s, n_a))
    qa, qb = np.zeros((n_s, n_a)), np.zeros((n_s, n_a))
    n_upd = np.zeros((2, n_s, n_a), dtype=np.int64)
    n_vis = np.zeros(n_s, dtype=np.int64)
    s = _inv_cdf(icdf, rng.random())
    pending, ep_len, t = -1, 0, 0
    returns = []
    ret = 0.0
    while t < max_steps:
        n = min(CHUNK, max_steps - t)
        uni = rng.random((n, VB_COLUMNS))
        nor = rng.standard_normal((n, 1))
        for k in range(n):
            u = uni[k]
            if pending >= 0:
                a = pending
            else:
                a = _eps_greedy(q[s], _power(*explore, n_vis[s]), tau, u[0], u[1])
                n_vis[s] += 1
            pending = -1
            s2 = _inv_cdf(cdf[s, a], u[2])
            r = r_mean[s, a, s2] + sigma * nor[k, 0]
            ep_len += 1
            a2 = -1
            if rule == "sarsa":
                a2 = _eps_greedy(q[s2], _power(*explore, n_vis[s2]), tau, u[4], u[5])
                n_vis[s2] += 1
            first = u[3] < 0.5
            which = 1 if rule == "double_q" and not first else 0
            alpha = _power(*step, n_upd[which, s, a])
            n_upd[which, s, a] += 1
            if rule == "q":
                target = r + gamma * q[s2].max()
            elif rule == "sarsa":
                target = r + gamma * q[s2, a2]
            elif rule == "expected_sarsa":
                eps = _power(*explore, n_vis[s2])
                best = q[s2].max()
                near = q[s2] >= best - tau
                boot = 0.0
                for b in range(n_a):
                    p = eps / n_a + ((1.0 - eps) / near.sum() if near[b] else 0.0)
                    boot += p * q[s2, b]
                target = r + gamma * boot
            else:
                upd, other = (qa, qb) if first else (qb, qa)
                target = r + gamma * other[s2, int(np.argmax(upd[s2]))]
            if rule == "double_q":
                upd = qa if first else qb
                upd[s, a] = (1.0 - alpha) * upd[s, a] + alpha * target
                q[s, a] = 0.5 * (qa[s, a] + qb[s, a])
            else:
                q[s, a] = (1.0 - alpha) * q[s, a] + alpha * target
            ret += r
            t += 1
            if ep_len >= horizon > 0:
                returns.append(ret)
                ret, ep_len = 0.0, 0
                s = _inv_cdf(icdf, u[6])
            else:
                s = s2
                pending = a2
    return q, np.array(returns)


def _softmax(theta_row):
    z = [float(v) for v in theta_row]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    tot = 0.0
    for v in e:
        tot += v
    return np.array([v / tot for v in e])


def actor_critic(momdp, *, method="a2c", batch_size=32, alpha0=0.1, beta0=1.0, scale=1000.0, kappa=1.5,
                 epochs=4, theta_max=100.0, max_steps, seed):
    """Tabular advantage actor-critic (or KL-penalised PPO) on objective 0.

    Critic step ``alpha0 (1 + t/scale)^-0.55``; actor step
    ``beta0 (1 + t/scale)^-(0.55 + 0.8/3)``; one actor step per batch of
    ``batch_size`` transitions using TD errors as advantages.
    """
    rng = np.random.default_rng(seed)
    n_s, n_a = momdp.num_states, momdp.num_actions
    cdf = np.cumsum(momdp.transition, axis=2)
    icdf = np.cumsum(momdp.initial)
    r_mean = momdp.reward_mean[0]
    sigma = float(momdp.reward_noise_sigma[0])
    gamma = float(momdp.discounts[0])
    horizon = momdp.episode_horizon or 0
    theta = np.zeros((n_s, n_a))
    v = np.zeros(n_s)
    onehot = np.eye(n_s)
    s = _inv_cdf(icdf, rng.random())
    t = ep_len = 0
    buf_s, buf_a, buf_d = [], [], []
    while t < max_steps:
        n = min(CHUNK, max_steps - t)
        uni = rng.random((n, PB_COLUMNS))
        nor = rng.standard_normal((n, 1))
        for k in range(n):
            u = uni[k]
            a = _inv_cdf(np.cumsum(_softmax(theta[s])), u[0])
            s2 = _inv_cdf(cdf[s, a], u[1])
            r = r_mean[s, a, s2] + sigma * nor[k, 0]
            alpha = alpha0 * (1.0 + t / scale) ** -0.55
            delta = r + gamma * v[s2] - v[s]
            v[s] += alpha * delta
            buf_s.append(s)
            buf_a.append(a)
            buf_d.append(delta)
            t += 1
            ep_len += 1
            if ep_len >= horizon > 0:
                ep_len = 0
                s = _inv_cdf(icdf, u[2])
            else:
                s = s2
            if len(buf_s) == batch_size:
                beta = beta0 * (1.0 + t / scale) ** (-(0.55 + 0.40 * 2 / 3))
                phi = onehot[buf_s]
                rows = np.arange(batch_size)
                d = np.array(buf_d)
                if method == "a2c":
                    theta = _a2c_step(theta, phi, rows, np.array(buf_a), d, beta, theta_max)
                else:
                    old = theta.copy()
                    for _ in range(epochs):
                        theta = _ppo_step(theta, old, phi, rows, np.array(buf_a), d, beta, kappa, theta_max)
                buf_s, buf_a, buf_d = [], [], []
    return theta, v


def _stable_softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_probs(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _a2c_step(theta, phi, rows, acts, d, beta, theta_max):
    pi = _stable_softmax(phi @ theta)
    score = -pi
    score[rows, acts] += 1.0
    grad = phi.T @ (score * d[:, None]) / len(rows)
    return np.clip(theta + beta * grad, -theta_max, theta_max)


def _ppo_step(theta, old, phi, rows, acts, d, beta, kappa, theta_max):
    lp, lq = _log_probs(phi @ theta), _log_probs(phi @ old)
    pi = _stable_softmax(phi @ theta)
    ratio = np.exp(lp[rows, acts] - lq[rows, acts])
    kl = np.sum(pi * (lp - lq), axis=1)
    score = -pi
    score[rows, acts] += 1.0
    g = score * (ratio * d)[:, None] - kappa * (pi * (lp - lq - kl[:, None]))
    return np.clip(theta + beta * (phi.T @ g / len(rows)), -theta_max, theta_max)
