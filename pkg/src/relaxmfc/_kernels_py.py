"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def circle_w1_sorted(pos, mass):
    """W1 on the unit circle from sorted positions and signed masses.

    With D the cumulative signed mass on each arc between consecutive
    support points, the distance is ``min_c sum(len * |D - c|)``; the
    minimizer is a length-weighted median of D.
    """
    pos = np.asarray(pos, dtype=np.float64)
    mass = np.asarray(mass, dtype=np.float64)
    k = pos.shape[0]
    if k == 0:
        return 0.0
    d = np.cumsum(mass)
    d[-1] = 0.0
    ell = np.empty(k)
    ell[:-1] = np.diff(pos)
    ell[-1] = 1.0 + pos[0] - pos[-1]
    order = np.argsort(d, kind="stable")
    cum = np.cumsum(ell[order])
    idx = int(np.searchsorted(cum, 0.5 * cum[-1], side="left"))
    c = d[order[min(idx, k - 1)]]
    return float(np.sum(ell * np.abs(d - c)))


def dp_backup(v_next, drift, cost, mom, dt, b_step, budget):
    """One backward Bellman step on the periodic state grid (x budget levels)."""
    G, B = v_next.shape
    A = drift.shape[1]
    xg = np.arange(G, dtype=np.float64) / G
    xn = xg[:, None] + dt * drift
    y = (xn - np.floor(xn)) * G
    i0 = np.floor(y).astype(np.intp)
    fx = y - i0
    i0 %= G
    i1 = (i0 + 1) % G
    if B == 1:
        cont = (1.0 - fx) * v_next[i0, 0] + fx * v_next[i1, 0]
        q = (dt * cost + cont)[:, None, :]
    else:
        # budget levels in chunks keep the (G, b, A) temporaries small
        value = np.empty((G, B))
        action = np.empty((G, B), dtype=np.intp)
        chunk = max(1, 4_000_000 // max(1, G * A))
        for s in range(0, B, chunk):
            lv = np.arange(s, min(B, s + chunk))
            value[:, lv], action[:, lv] = _budget_block(v_next, lv, i0, i1, fx, cost, mom, dt, b_step, budget)
        return value, action
    return _argmin_value(q)


def _budget_block(v_next, levels, i0, i1, fx, cost, mom, dt, b_step, budget):
    B = v_next.shape[1]
    bn = levels[:, None] * b_step + dt * mom[None, :]
    feasible = bn <= budget * (1.0 + 1e-12) + 1e-12
    yb = bn / b_step
    j0 = np.floor(yb).astype(np.intp)
    top = j0 >= B - 1
    fb = np.where(top, 0.0, yb - j0)
    j0 = np.minimum(j0, B - 1)
    j1 = np.minimum(j0 + 1, B - 1)
    a0 = i0[:, None, :]
    a1 = i1[:, None, :]
    wx = fx[:, None, :]
    v0 = (1.0 - wx) * v_next[a0, j0[None]] + wx * v_next[a1, j0[None]]
    v1 = (1.0 - wx) * v_next[a0, j1[None]] + wx * v_next[a1, j1[None]]
    wb = fb[None]
    cont = np.where(wb > 0.0, (1.0 - wb) * v0 + wb * v1, v0)
    q = dt * cost[:, None, :] + cont
    q = np.where(feasible[None], q, np.inf)
    return _argmin_value(q)


def _argmin_value(q):
    action = np.argmin(q, axis=2)
    value = np.take_along_axis(q, action[..., None], axis=2)[..., 0]
    action = np.where(np.isfinite(value), action, -1)
    return value, action.astype(np.intp)


def project_simplex_rows(v):
    """Euclidean projection of each row onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    s = -np.sort(-v, axis=1)
    cum = np.cumsum(s, axis=1)
    j = np.arange(1, v.shape[1] + 1)
    t = (cum - 1.0) / j
    ok = s - t > 0.0
    rho = v.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)
    theta = t[np.arange(v.shape[0]), rho]
    return np.maximum(v - theta[:, None], 0.0)
