"""Compiled inner loops for the tabular learners.

Each kernel consumes pre-drawn randomness so that a Python reference loop
built from the public operations can replay the exact same trajectory.
Per-step uniform columns:

    0 exploration coin at s        4 exploration coin at s' (SARSA)
    1 action pick at s             5 action pick at s' (SARSA)
    2 transition draw              6 initial-state draw on reset
    3 double-Q branch coin         7 unused
"""

import numpy as np
from numba import njit

N_UNIFORMS = 8

RULE_LEXQ, RULE_SARSA, RULE_ESARSA, RULE_DOUBLE = 0, 1, 2, 3
TOL_CONSTANT, TOL_PROPORTIONAL, TOL_DECAYING = 0, 1, 2
SCHED_CONSTANT, SCHED_VISIT_POWER = 0, 1

PROPORTIONAL_FLOOR = 1e-9


@njit(cache=True)
def tol_level(kind, a, b, best, t):
    if kind == TOL_CONSTANT:
        return a
    if kind == TOL_PROPORTIONAL:
        v = a * abs(best)
        return v if v > PROPORTIONAL_FLOOR else PROPORTIONAL_FLOOR
    return a * (1.0 + t) ** (-b)


@njit(cache=True)
def schedule_value(kind, a, b, n):
    if kind == SCHED_CONSTANT:
        return a
    return a / (1.0 + n) ** b


@njit(cache=True)
def nested_mask(q, s, upto, kind, ta, tb, t, mask):
    """Leave in ``mask`` the actions surviving objectives ``0 .. upto-1`` at ``s``."""
    n_a = q.shape[2]
    for k in range(n_a):
        mask[k] = True
    for i in range(upto):
        best = -np.inf
        for k in range(n_a):
            if mask[k] and q[i, s, k] > best:
                best = q[i, s, k]
        thr = best - tol_level(kind, ta, tb, best, t)
        for k in range(n_a):
            if mask[k] and not q[i, s, k] >= thr:
                mask[k] = False


@njit(cache=True)
def pick_index(u, n):
    k = int(u * n)
    return k if k < n else n - 1


@njit(cache=True)
def select_action(q, s, eps, kind, ta, tb, t, u0, u1, mask):
    n_a = q.shape[2]
    if u0 < eps:
        return pick_index(u1, n_a)
    nested_mask(q, s, q.shape[0], kind, ta, tb, t, mask)
    cnt = 0
    for k in range(n_a):
        if mask[k]:
            cnt += 1
    j = pick_index(u1, cnt)
    for k in range(n_a):
        if mask[k]:
            if j == 0:
                return k
            j -= 1
    return -1


@njit(cache=True)
def draw_cdf(cdf, u):
    x = u * cdf[cdf.shape[0] - 1]
    lo, hi = 0, cdf.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo if lo < cdf.shape[0] else cdf.shape[0] - 1


@njit(cache=True)
def vb_chunk(tcdf, rmean, sigma, gamma, icdf, terminal, horizon,
             rule, btk, bta, btb, utk, uta, utb, ssk, ssa, ssb, exk, exa, exb,
             q, qa, qb, n_sa, n_s, st, ep_acc, uni, nor,
             out_ret, out_len, out_step, out_qd, max_steps, conv_window, conv_thr):
    """Advance VB-LRL over one block of pre-drawn randomness.

    ``n_sa[0]`` counts updates per state-action; the Double-Q rule keeps
    separate counts for its B table in ``n_sa[1]``.

    ``st`` = [s, carried action or -1, episode length, t, stopped, small-delta run]
    ``ep_acc`` = [returns (m), max |dQ| this episode]. Returns episodes written.
    """
    m, n_states, n_a = q.shape
    mask = np.empty(n_a, np.bool_)
    rew = np.empty(m)
    s, carry, ep_len, t, stopped, small = st[0], st[1], st[2], st[3], st[4], st[5]
    n_out = 0
    for k in range(uni.shape[0]):
        if t >= max_steps or stopped:
            break
        u = uni[k]
        if carry >= 0:
            a = carry
        else:
            eps = schedule_value(exk, exa, exb, n_s[s])
            n_s[s] += 1
            a = select_action(q, s, eps, btk, bta, btb, t, u[0], u[1], mask)
        carry = -1
        if terminal[s]:
            s2 = s
            term = True
            for i in range(m):
                rew[i] = 0.0
        else:
            s2 = draw_cdf(tcdf[s, a], u[2])
            term = terminal[s2]
            for i in range(m):
                rew[i] = rmean[i, s, a, s2] + sigma[i] * nor[k, i]
        ep_len += 1
        trunc = (not term) and horizon > 0 and ep_len >= horizon
        a2 = -1
        if rule == RULE_SARSA and not term:
            eps2 = schedule_value(exk, exa, exb, n_s[s2])
            n_s[s2] += 1
            a2 = select_action(q, s2, eps2, btk, bta, btb, t + 1, u[4], u[5], mask)
        branch_a = u[3] < 0.5
        tab = 1 if rule == RULE_DOUBLE and not branch_a else 0
        alpha = schedule_value(ssk, ssa, ssb, n_sa[tab, s, a])
        n_sa[tab, s, a] += 1
        for i in range(m):
            boot = 0.0
            if not term:
                if rule == RULE_LEXQ:
                    nested_mask(q, s2, i, utk, uta, utb, t, mask)
                    boot = -np.inf
                    for b in range(n_a):
                        if mask[b] and q[i, s2, b] > boot:
                            boot = q[i, s2, b]
                elif rule == RULE_SARSA:
                    boot = q[i, s2, a2]
                elif rule == RULE_ESARSA:
                    eps2 = schedule_value(exk, exa, exb, n_s[s2])
                    nested_mask(q, s2, m, btk, bta, btb, t, mask)
                    cnt = 0
                    for b in range(n_a):
                        if mask[b]:
                            cnt += 1
                    for b in range(n_a):
                        p = eps2 / n_a
                        if mask[b]:
                            p += (1.0 - eps2) / cnt
                        boot += p * q[i, s2, b]
                else:
                    nested_mask(q, s2, i, utk, uta, utb, t, mask)
                    best_b = -1
                    best_v = -np.inf
                    for b in range(n_a):
                        v = qa[i, s2, b] if branch_a else qb[i, s2, b]
                        if mask[b] and v > best_v:
                            best_v = v
                            best_b = b
                    boot = qb[i, s2, best_b] if branch_a else qa[i, s2, best_b]
            target = rew[i] + gamma[i] * boot
            if rule == RULE_DOUBLE:
                if branch_a:
                    qa[i, s, a] = (1.0 - alpha) * qa[i, s, a] + alpha * target
                else:
                    qb[i, s, a] = (1.0 - alpha) * qb[i, s, a] + alpha * target
                new = 0.5 * (qa[i, s, a] + qb[i, s, a])
            else:
                new = (1.0 - alpha) * q[i, s, a] + alpha * target
            d = abs(new - q[i, s, a])
            if d > ep_acc[m]:
                ep_acc[m] = d
            q[i, s, a] = new
            ep_acc[i] += rew[i]
        t += 1
        if term or trunc:
            for i in range(m):
                out_ret[n_out, i] = ep_acc[i]
                ep_acc[i] = 0.0
            out_len[n_out] = ep_len
            out_step[n_out] = t
            out_qd[n_out] = ep_acc[m]
            if conv_thr > 0.0:
                if ep_acc[m] < conv_thr:
                    small += 1
                else:
                    small = 0
                if small >= conv_window:
                    stopped = 1
            ep_acc[m] = 0.0
            n_out += 1
            ep_len = 0
            s = draw_cdf(icdf, u[6])
        else:
            s = s2
            carry = a2
    st[0], st[1], st[2], st[3], st[4], st[5] = s, carry, ep_len, t, stopped, small
    return n_out


# -- policy-based per-step loop -------------------------------------------------
# Per-step uniform columns: 0 action draw, 1 transition draw, 2 initial-state draw.

PB_UNIFORMS = 3


@njit(cache=True)
def softmax_row(feats, theta, s, out):
    n_a = theta.shape[1]
    d = theta.shape[0]
    top = -np.inf
    for a in range(n_a):
        z = 0.0
        for k in range(d):
            z += feats[s, k] * theta[k, a]
        out[a] = z
        if z > top:
            top = z
    tot = 0.0
    for a in range(n_a):
        out[a] = np.exp(out[a] - top)
        tot += out[a]
    for a in range(n_a):
        out[a] = out[a] / tot


@njit(cache=True)
def pb_steps(tcdf, rmean, sigma, gamma, icdf, terminal, horizon, feats, theta, w,
             alpha_base, alpha_exp, t_scale, st, ep_acc, uni, nor, pos,
             b_states, b_actions, b_deltas, batch_size,
             out_ret, out_disc, out_len, out_step):
    """Run on-policy steps with TD(0) critics until the batch fills or draws run out.

    ``st`` = [s, episode length, t, batch fill, episodes written, new pos]
    ``ep_acc`` = [returns (m), discounted returns (m), discount powers (m)].
    """
    m = w.shape[0]
    n_a = theta.shape[1]
    d = theta.shape[0]
    probs = np.empty(n_a)
    cdf = np.empty(n_a)
    rew = np.empty(m)
    s, ep_len, t, fill = st[0], st[1], st[2], st[3]
    n_out = 0
    k = pos
    while k < uni.shape[0] and fill < batch_size:
        u = uni[k]
        softmax_row(feats, theta, s, probs)
        acc = 0.0
        for b in range(n_a):
            acc += probs[b]
            cdf[b] = acc
        a = draw_cdf(cdf, u[0])
        if terminal[s]:
            s2 = s
            term = True
            for i in range(m):
                rew[i] = 0.0
        else:
            s2 = draw_cdf(tcdf[s, a], u[1])
            term = terminal[s2]
            for i in range(m):
                rew[i] = rmean[i, s, a, s2] + sigma[i] * nor[k, i]
        alpha = alpha_base * (1.0 + t / t_scale) ** (-alpha_exp)
        if alpha > 1.0:
            alpha = 1.0
        for i in range(m):
            v_s = 0.0
            v_s2 = 0.0
            for j in range(d):
                v_s += feats[s, j] * w[i, j]
                v_s2 += feats[s2, j] * w[i, j]
            delta = rew[i] + (0.0 if term else gamma[i] * v_s2) - v_s
            for j in range(d):
                w[i, j] += alpha * delta * feats[s, j]
            b_deltas[i, fill] = delta
            ep_acc[i] += rew[i]
            ep_acc[m + i] += ep_acc[2 * m + i] * rew[i]
            ep_acc[2 * m + i] *= gamma[i]
        b_states[fill] = s
        b_actions[fill] = a
        fill += 1
        ep_len += 1
        t += 1
        k += 1
        if term or (horizon > 0 and ep_len >= horizon):
            for i in range(m):
                out_ret[n_out, i] = ep_acc[i]
                out_disc[n_out, i] = ep_acc[m + i]
                ep_acc[i] = 0.0
                ep_acc[m + i] = 0.0
                ep_acc[2 * m + i] = 1.0
            out_len[n_out] = ep_len
            out_step[n_out] = t
            n_out += 1
            ep_len = 0
            s = draw_cdf(icdf, u[2])
        else:
            s = s2
    st[0], st[1], st[2], st[3], st[4], st[5] = s, ep_len, t, fill, n_out, k
