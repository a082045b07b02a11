"""Best responses, best-response ensembles and the damped fixed-point iteration.

Two best-response methods share the Euler grid and left-endpoint cost:

* ``dp``: backward dynamic programming on a periodic state grid (d = 1),
  with pure atoms and pairwise simplex-lattice mixtures as actions;
* ``grad``: projected gradient over the control weights, with the exact
  discrete adjoint of the Euler scheme.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .control import RelaxedControl, enforce_budget_batch
from .cost import ensemble_cost, path_cost
from .dynamics import (
    FlowMeasure,
    PathEnsemble,
    average_drift,
    empirical_flow,
    flow_distance,
    flow_field,
    flow_ensemble,
    integrate_batch,
    integrate_path,
    support_residual,
)
from .measures import AtomicMeasure, normalize, w1

GRAD_TOL = 1e-8


class UnsupportedDimensionError(ValueError):
    pass


@dataclass
class BestResponse:
    control: RelaxedControl
    path: object
    cost: float
    method: str
    diagnostics: dict = field(default_factory=dict)


# -- discrete adjoint -------------------------------------------------------

def _forward(spec, m, U, x0, W, keep=False):
    """Euler forward pass with left-endpoint running cost, batched over paths."""
    Bn, N, _ = W.shape
    dt = spec.T / N
    pos, inc = integrate_batch(x0, W, flow_field(spec, m, U), dt, spec.wrap)
    running = np.zeros(Bn)
    Fs, Ls = [], []
    for k in range(N):
        Lk = spec.L(pos[:, k], U, m[k])
        acc = W[:, k, 0] * Lk[:, 0]
        for j in range(1, Lk.shape[1]):
            acc = acc + W[:, k, j] * Lk[:, j]
        running = running + dt * acc
        if keep:
            Ls.append(Lk)
            Fs.append(spec.f(pos[:, k], U, m[k]))
    total = running + (spec.terminal(pos[:, -1]) if spec.g is not None else 0.0)
    return total, pos, Fs, Ls


def control_costs(spec, m, U, x0, W):
    """Total cost per path for control tables W (B, N, M)."""
    return _forward(spec, m, U, np.asarray(x0, dtype=np.float64), W)[0]


def reduced_gradient(spec, m, U, x0, W):
    """Costs (B,) and d cost / d W (B, N, M) by the discrete adjoint.

    With costate lam_N = grad g(x_N) and
    lam_k = lam_{k+1} + dt * sum_j w_kj (dL/dx + (df/dx)^T lam_{k+1}),
    the weight gradient is dt * (L(x_k, u_j) + lam_{k+1} . f(x_k, u_j)).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    Bn, N, M = W.shape
    dt = spec.T / N
    total, pos, Fs, Ls = _forward(spec, m, U, x0, W, keep=True)
    grad = np.empty_like(W)
    lam = spec.grad_terminal(pos[:, -1]) if spec.g is not None else np.zeros((Bn, pos.shape[2]))
    for k in range(N - 1, -1, -1):
        X = pos[:, k]
        grad[:, k] = dt * (Ls[k] + np.einsum("bmd,bd->bm", Fs[k], lam))
        gL = spec.grad_L(X, U, m[k])
        Jf = spec.jac_f(X, U, m[k])
        jt = np.einsum("bmil,bi->bml", Jf, lam)
        lam = lam + dt * average_drift(W[:, k], gL + jt)
    return total, grad


def _project(W):
    Bn, N, M = W.shape
    return kernels.project_simplex_rows(np.ascontiguousarray(W.reshape(Bn * N, M))).reshape(Bn, N, M)


def _pg_norm(W, ghat, dt):
    diff = W - _project(W - ghat)
    return np.sqrt(dt * np.sum(diff * diff, axis=(1, 2)))


def projected_descent(W0, value, value_grad, dt, norms_q, origin, R, step=32.0, iters=500, tol=GRAD_TOL,
                      trace=None):
    """Projected gradient over B independent weight tables W (B, N, M).

    ``value(W, idx)`` returns costs (b,) of the tables W for the problems
    ``idx``; ``value_grad`` also returns d cost / d W. The step follows the
    rescaled gradient g / dt, is projected row-wise onto the simplex, then
    mixed toward the origin atom to meet the budget. Each problem keeps its
    own step: halved when a trial would raise its cost, doubled back toward
    ``step`` after an accepted move. A problem stops once its projected
    gradient norm is <= tol or its step underflows. ``trace`` (a list)
    receives the cost vector after every iteration.
    """
    W = _project(np.array(W0, dtype=np.float64))
    Bn, N, M = W.shape
    W = enforce_budget_batch(W, norms_q, dt, origin, R)
    steps = np.full(Bn, float(step))
    active = np.ones(Bn, dtype=bool)
    pg = np.full(Bn, np.inf)
    costs = value(W, np.arange(Bn))
    if trace is not None:
        trace.append(costs.copy())
    it = 0
    for it in range(1, iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            it -= 1
            break
        c, g = value_grad(W[idx], idx)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at iteration {it}")
        ghat = g / dt
        pg[idx] = _pg_norm(W[idx], ghat, dt)
        done = (pg[idx] <= tol) | (steps[idx] < 1e-14)
        active[idx[done]] = False
        keep = ~done
        idx, ghat, c = idx[keep], ghat[keep], c[keep]
        if idx.size == 0:
            break
        trial = _project(W[idx] - steps[idx, None, None] * ghat)
        trial = enforce_budget_batch(trial, norms_q, dt, origin, R)
        ct = value(trial, idx)
        ok = ct <= c
        W[idx[ok]] = trial[ok]
        costs[idx[ok]] = ct[ok]
        steps[idx[~ok]] *= 0.5
        # a halved step is restored gradually after accepted moves
        steps[idx[ok]] = np.minimum(2.0 * steps[idx[ok]], step)
        if trace is not None:
            trace.append(costs.copy())
    return W, costs, {"iterations": it, "grad_norm": pg.copy(), "steps": steps}


def grad_batch(x0, m, spec, W0, step=32.0, iters=500, tol=GRAD_TOL):
    """Projected gradient on B independent best-response problems (one per row of x0)."""
    x0 = np.asarray(x0, dtype=np.float64)
    U = spec.atoms.points
    N = np.asarray(W0).shape[1]
    return projected_descent(
        W0,
        lambda W, idx: control_costs(spec, m, U, x0[idx], W),
        lambda W, idx: reduced_gradient(spec, m, U, x0[idx], W),
        spec.T / N, spec.atoms.norms(spec.q), spec.atoms.origin, spec.R, step, iters, tol,
    )


def _starts(init_w, M):
    """Warm start followed by the M constant pure-atom controls."""
    N = init_w.shape[0]
    pure = np.repeat(np.eye(M)[:, None, :], N, axis=1)
    return np.concatenate([init_w[None], pure])


def best_response_grad(x0, m, spec, init=None, step=32.0, iters=500, tol=GRAD_TOL, multistart=False):
    """Projected-gradient best response from ``init`` (default L (x) delta_0).

    With ``multistart`` the constant pure-atom controls are run as extra
    starting points in the same batch and the cheapest result is kept
    (ties go to the earliest start, i.e. to ``init``).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    if init is None:
        init = RelaxedControl.null(spec.atoms, spec.T, m.n_steps)
    if not init.atoms.same_as(spec.atoms):
        raise ValueError("init must use the spec's control atoms")
    W0 = _starts(init.weights, len(spec.atoms)) if multistart else init.weights[None]
    W, costs, diag = grad_batch(np.repeat(x0[None], len(W0), axis=0), m, spec, W0, step, iters, tol)
    best = int(np.argmin(costs))
    mu = RelaxedControl(W[best], spec.atoms, spec.T)
    path = integrate_path(x0, mu, m, spec)
    cost = path_cost(path, mu, m, spec).total
    return BestResponse(mu, path, cost, "gradient",
                        {"iterations": diag["iterations"], "grad_norm": float(diag["grad_norm"][best]),
                         "start": best})


# -- dynamic programming oracle -------------------------------------------

def lattice_actions(M, s):
    """Pure atoms, then pair mixtures (k/s, 1 - k/s) for each pair i < j."""
    rows = [np.eye(M)]
    if s > 1:
        for i in range(M):
            for j in range(i + 1, M):
                for k in range(1, s):
                    r = np.zeros(M)
                    r[i] = k / s
                    r[j] = 1.0 - k / s
                    rows.append(r[None])
    return np.vstack(rows)


def _interp(V, x, b, b_step):
    """Linear interpolation of V (G, B) at periodic x and budget level b (arrays)."""
    G, B = V.shape
    y = normalize(x) * G
    i0 = np.floor(y).astype(np.intp)
    fx = y - i0
    i0 %= G
    i1 = (i0 + 1) % G
    if B == 1:
        return (1 - fx) * V[i0, 0] + fx * V[i1, 0]
    yb = b / b_step
    j0 = np.minimum(np.floor(yb).astype(np.intp), B - 1)
    fb = np.where(j0 >= B - 1, 0.0, yb - j0)
    j1 = np.minimum(j0 + 1, B - 1)
    v0 = (1 - fx) * V[i0, j0] + fx * V[i1, j0]
    v1 = (1 - fx) * V[i0, j1] + fx * V[i1, j1]
    return np.where(fb > 0, (1 - fb) * v0 + fb * v1, v0)


@dataclass
class DPTables:
    """Backward value tables; independent of the initial state."""

    values: list
    actions: np.ndarray
    mom: np.ndarray
    b_step: float
    budget_active: bool
    flow: FlowMeasure
    x_grid: int
    simplex_lattice: int


def dp_tables(m, spec, x_grid=128, simplex_lattice=4):
    """Backward dynamic programming on the periodic grid (d = 1).

    The budget enters as a second state (accumulated q-moment, ``x_grid``
    levels) unless it cannot bind, i.e. T * max|u|^q <= R.
    """
    if spec.d != 1:
        raise UnsupportedDimensionError(f"the DP oracle supports d = 1 only (got d = {spec.d})")
    if x_grid < 8:
        raise ValueError("x_grid must be >= 8")
    if not spec.wrap:
        raise UnsupportedDimensionError("the DP oracle needs a torus state space")
    U = spec.atoms.points
    N = m.n_steps
    dt = spec.T / N
    acts = lattice_actions(U.shape[0], int(simplex_lattice))
    mom = np.ascontiguousarray(acts @ spec.atoms.norms(spec.q))
    budget_active = spec.T * float(np.max(spec.atoms.norms(spec.q))) > spec.R * (1 + 1e-12)
    B = x_grid if budget_active else 1
    b_step = spec.R / (B - 1) if budget_active else 1.0
    xg = (np.arange(x_grid) / x_grid)[:, None]
    V = [None] * (N + 1)
    VN = spec.terminal(xg) if spec.g is not None else np.zeros(x_grid)
    V[N] = np.ascontiguousarray(np.repeat(np.asarray(VN, dtype=np.float64)[:, None], B, axis=1))
    for k in range(N - 1, -1, -1):
        F = spec.f(xg, U, m[k])[:, :, 0]
        Lk = spec.L(xg, U, m[k])
        drift = np.ascontiguousarray(F @ acts.T)
        cost = np.ascontiguousarray(Lk @ acts.T)
        V[k], _ = kernels.dp_backup(V[k + 1], drift, cost, mom, dt, b_step, spec.R)
    return DPTables(V, acts, mom, b_step, bool(budget_active), m, int(x_grid), int(simplex_lattice))


def dp_reconstruct(tables, x0s, spec):
    """Greedy forward pass from the exact initial states (B, 1); returns weights (B, N, M)."""
    m = tables.flow
    acts, mom = tables.actions, tables.mom
    U = spec.atoms.points
    N = m.n_steps
    dt = spec.T / N
    X = normalize(np.asarray(x0s, dtype=np.float64).reshape(-1, 1))
    Bn = X.shape[0]
    b = np.zeros(Bn)
    rows = np.empty((Bn, N, U.shape[0]))
    for k in range(N):
        F = spec.f(X, U, m[k])
        q = dt * (spec.L(X, U, m[k]) @ acts.T)
        bn = b[:, None] + dt * mom[None, :]
        q = q + _interp(tables.values[k + 1], X + dt * (F[:, :, 0] @ acts.T), bn, tables.b_step)
        if tables.budget_active:
            q = np.where(bn <= spec.R * (1 + 1e-12) + 1e-12, q, np.inf)
        a = np.argmin(q, axis=1)
        rows[:, k] = acts[a]
        X = normalize(X + dt * average_drift(rows[:, k], F))
        b = bn[np.arange(Bn), a]
    return rows


def best_response_dp(x0, m, spec, x_grid=128, simplex_lattice=4):
    """Dynamic-programming best response on the 1-d torus, greedy reconstruction."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    tab = dp_tables(m, spec, x_grid, simplex_lattice)
    mu = RelaxedControl(dp_reconstruct(tab, x0[None], spec)[0], spec.atoms, spec.T)
    path = integrate_path(x0, mu, m, spec)
    cost = path_cost(path, mu, m, spec).total
    value = float(_interp(tab.values[0], np.array([x0[0]]), np.array([0.0]), tab.b_step)[0])
    B = tab.values[0].shape[1]
    return BestResponse(mu, path, cost, "dp", {
        "value": value, "actions": int(len(tab.actions)), "table_size": int(x_grid * B * (m.n_steps + 1)),
        "budget_active": tab.budget_active, "simplex_lattice": int(simplex_lattice),
    })


# -- ensembles ------------------------------------------------------------

def best_response_pairs(x0s, weights, m, spec, method="grad", init=None, **kw):
    """One best response per initial point; returns a PathEnsemble.

    ``init`` is an optional (B, N, M) warm start for the gradient method.
    """
    x0s = np.asarray(x0s, dtype=np.float64)
    if x0s.ndim == 1:
        x0s = x0s[:, None]
    Bn = x0s.shape[0]
    if method == "grad":
        if init is None:
            init = np.zeros((Bn, m.n_steps, len(spec.atoms)))
            init[:, :, spec.atoms.origin] = 1.0
        step, iters, tol = kw.get("step", 32.0), kw.get("iters", 500), kw.get("tol", GRAD_TOL)
        if kw.get("multistart", False):
            S = len(spec.atoms) + 1
            W0 = np.concatenate([_starts(w, S - 1) for w in init])
            W, c, _ = grad_batch(np.repeat(x0s, S, axis=0), m, spec, W0, step, iters, tol)
            pick = np.argmin(c.reshape(Bn, S), axis=1) + S * np.arange(Bn)
            W = W[pick]
        else:
            W, _, _ = grad_batch(x0s, m, spec, init, step, iters, tol)
        controls = tuple(RelaxedControl(W[i], spec.atoms, spec.T) for i in range(Bn))
    elif method == "dp":
        tab = dp_tables(m, spec, kw.get("x_grid", 128), kw.get("simplex_lattice", 4))
        W = dp_reconstruct(tab, x0s, spec)
        controls = tuple(RelaxedControl(W[i], spec.atoms, spec.T) for i in range(Bn))
    else:
        raise ValueError(f"unknown method {method!r}; expected 'dp' or 'grad'")
    particles = [(x0s[i], controls[i], weights[i]) for i in range(Bn)]
    return flow_ensemble(particles, m, spec)


def best_response_measure(m, m0, spec, method="grad", init=None, **kw):
    """Discrete image of the best-response map: one response per atom of m0."""
    return best_response_pairs(m0.support, m0.weights, m, spec, method, init, **kw)


def null_ensemble(m0, spec, n_steps, m=None):
    """Every agent uses L (x) delta_0; integrated against ``m`` (default: m0 frozen)."""
    if m is None:
        m = FlowMeasure.constant(m0, n_steps, spec.T)
    mu = RelaxedControl.null(spec.atoms, spec.T, n_steps)
    return flow_ensemble([(x, mu, w) for x, w in zip(m0.support, m0.weights)], m, spec)


@dataclass
class EquilibriumResult:
    ensemble: PathEnsemble
    flow: FlowMeasure
    consistency_gap: float
    optimality_gap: float
    trace: list
    damping: float
    converged: bool
    iterations: int

    def summary(self):
        return {
            "consistency_gap": self.consistency_gap,
            "optimality_gap": self.optimality_gap,
            "damping": self.damping,
            "converged": self.converged,
            "iterations": self.iterations,
        }


def fixed_point_iterate(spec, m0, damping=0.5, max_iters=200, tol=1e-3, n_steps=32, method="grad", **kw):
    """Damped best-response iteration on the flow.

    Iteration k: P = BR(m_k); mhat = flow(P); Phat = BR(mhat) warm-started
    at P. The candidate P is scored by its optimality gap
    J(mhat, P) - J(mhat, Phat) and consistency gap d(mhat, flow(Phat));
    then m_{k+1} = (1 - damping) m_k + damping mhat. Convergence is only
    reported when both gaps are <= tol.
    """
    if not (0.0 < damping <= 1.0):
        raise ValueError("damping must lie in (0, 1]")
    init_P = null_ensemble(m0, spec, n_steps)
    m = empirical_flow(init_P)
    warm = init_P.control_weights() if method == "grad" else None
    trace = []
    P = init_P
    mhat = m
    cons = opt = np.inf
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        P = best_response_measure(m, m0, spec, method, init=warm, **kw)
        mhat = empirical_flow(P)
        wP = P.control_weights() if method == "grad" else None
        Phat = best_response_measure(mhat, m0, spec, method, init=wP, **kw)
        opt = ensemble_cost(mhat, P, spec) - ensemble_cost(mhat, Phat, spec)
        cons = flow_distance(mhat, empirical_flow(Phat))
        resid = flow_distance(m, mhat)
        trace.append({"iteration": it, "optimality_gap": opt, "consistency_gap": cons, "flow_residual": resid,
                      "cost": ensemble_cost(mhat, P, spec)})
        if opt <= tol and cons <= tol:
            converged = True
            break
        m = m.mix(mhat, damping)
        warm = Phat.control_weights() if method == "grad" else None
    return EquilibriumResult(P, mhat, float(cons), float(opt), trace, damping, converged, it)


def certify(P, spec, tol, m0=None, method="grad", **kw):
    """Check P against the relaxed-equilibrium definition at tolerance tol."""
    m = empirical_flow(P)
    report = {}
    init = P.initial_measure()
    report["initial_condition"] = float(w1(init, m0)) if m0 is not None else 0.0
    report["support_residual"] = support_residual(P, m, spec)
    x0s = P.positions[:, 0]
    warm = P.control_weights() if (method == "grad" and P.shared_atoms() is not None
                                   and P.shared_atoms().same_as(spec.atoms)) else None
    BR = best_response_pairs(x0s, P.weights, m, spec, method, init=warm, **kw)
    report["optimality_gap"] = ensemble_cost(m, P, spec) - ensemble_cost(m, BR, spec)
    failed = [k for k in ("initial_condition", "support_residual", "optimality_gap") if report[k] > tol]
    report["tol"] = tol
    report["failed"] = failed
    report["passed"] = not failed
    return report
