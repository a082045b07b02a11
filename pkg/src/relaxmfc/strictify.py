"""From relaxed ensembles to feedback controls and pure-control equilibria.

The ensemble is lifted to an atomic measure on (t, x, u), disintegrated
by histogram binning into a feedback table q(t, x), and each cell is
collapsed to one control whose drift matches the cell's mean drift with
no increase in running cost or q-moment (possible under convexity).
"""

from dataclasses import dataclass

import numpy as np

from .control import ControlAtoms, FeedbackControl, RelaxedControl, dirac_control, moment
from .cost import ensemble_cost
from .dynamics import average_drift, empirical_flow, flow_distance, flow_ensemble
from .measures import JointMeasure, _nearest_cells, disintegrate, normalize

F_MATCH_TOL = 1e-8
SLACK_TOL = 1e-9
NEWTON_ITERS = 60
FD_U = 1e-7


class NonConvexityError(RuntimeError):
    """A cell admits no control matching its drift without extra cost."""

    def __init__(self, cell, witness):
        self.cell = cell
        self.witness = witness
        super().__init__(f"barycentric selection failed in cell {cell}: {witness}")


def _shared_atoms(P):
    atoms = P.shared_atoms()
    if atoms is None:
        raise ValueError("ensemble controls must share one atom set")
    return atoms


def lift_to_joint(P):
    """eta = (1/T) int int delta_(t, gamma(t), u) mu dP on the time grid."""
    atoms = _shared_atoms(P)
    N = P.n_steps
    times = np.arange(N) * (P.horizon / N)
    T_, X_, J_, W_ = [], [], [], []
    for w, path, mu in zip(P.weights, P.paths, P.controls):
        k, j = np.nonzero(mu.weights > 0)
        T_.append(times[k])
        X_.append(path.positions[k])
        J_.append(j)
        W_.append(w * mu.weights[k, j] / N)
    return JointMeasure(np.concatenate(T_), np.concatenate(X_), np.concatenate(J_),
                        np.concatenate(W_), atoms.points, P.horizon)


def feedback_from(P, t_bins=None, x_bins=32):
    """Disintegrated feedback table; t_bins defaults to the control grid."""
    return disintegrate(lift_to_joint(P), P.n_steps if t_bins is None else t_bins, x_bins)


def _closed_loop(x0s, lookup, m, spec):
    """Euler closed loop; ``lookup(k, X)`` returns (B, M) rows. Returns (B, N, M)."""
    N = m.n_steps
    dt = spec.T / N
    U = spec.atoms.points
    X = normalize(x0s) if spec.wrap else x0s.copy()
    rows = []
    for k in range(N):
        Wk = lookup(k, X)
        rows.append(Wk)
        X = X + dt * average_drift(Wk, spec.f(X, U, m[k]))
        X = normalize(X) if spec.wrap else X
    return np.stack(rows, axis=1)


def replay_feedback(qhat, m0, m, spec):
    """Integrate every atom of m0 under q read along its own trajectory."""
    if not np.array_equal(np.asarray(qhat.atoms), spec.atoms.points):
        raise ValueError("feedback table and spec use different control atoms")
    dt = spec.T / m.n_steps
    W = _closed_loop(np.array(m0.support), lambda k, X: qhat.rows_at(k * dt, X), m, spec)
    mus = [RelaxedControl(W[i], spec.atoms, spec.T) for i in range(W.shape[0])]
    return flow_ensemble(list(zip(m0.support, mus, m0.weights)), m, spec)


# -- convexity and selection --------------------------------------------------

def _f_at(spec, x, u, nu):
    return spec.f(x[None, :], np.atleast_2d(u), nu)[0]


def _L_at(spec, x, u, nu):
    return spec.L(x[None, :], np.atleast_2d(u), nu)[0]


def _qnorm(u, q):
    return np.linalg.norm(np.atleast_2d(u), axis=1) ** q


def _newton(spec, x, nu, target, u0, lo, hi):
    """Damped Newton on f(x, u) = target with a finite-difference Jacobian."""
    u = np.clip(np.asarray(u0, dtype=np.float64), lo, hi)
    n = u.size
    res = _f_at(spec, x, u, nu)[0] - target
    err = np.linalg.norm(res)
    for _ in range(NEWTON_ITERS):
        if err <= 1e-14 * max(1.0, np.linalg.norm(target)):
            break
        probes = np.concatenate([u + FD_U * np.eye(n), u - FD_U * np.eye(n)])
        Fp = _f_at(spec, x, probes, nu)
        J = ((Fp[:n] - Fp[n:]) / (2 * FD_U)).T
        delta = np.linalg.lstsq(J, -res, rcond=None)[0]
        t = 1.0
        while t > 1e-6:
            cand = np.clip(u + t * delta, lo, hi)
            r2 = _f_at(spec, x, cand, nu)[0] - target
            if np.linalg.norm(r2) < err:
                break
            t *= 0.5
        else:
            break
        u, res, err = cand, r2, np.linalg.norm(r2)
    return u, err


@dataclass
class Selection:
    ok: bool
    alpha: np.ndarray
    z1: float
    z2: float
    f_match: float
    witness: dict = None


def _witness(q, U, reason, **extra):
    support = np.flatnonzero(q > 0)
    w = {"reason": reason, "support": U[support].tolist(), "weights": q[support].tolist()}
    if support.size == 2:
        w.update(u1=U[support[0]].tolist(), u2=U[support[1]].tolist(), lam=float(q[support[0]]))
    w.update(extra)
    return w


def barycentric_selection(q, spec, nu, x, grid=201):
    """One control alpha with f(x, alpha) = sum q_j f(x, u_j) and no cost or moment increase.

    Newton starts at the control barycenter; if that root violates a slack,
    the atom box is scanned for further starting points.
    """
    q = np.asarray(q, dtype=np.float64)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    U = spec.atoms.points
    lo, hi = np.asarray(spec.box_lo, float), np.asarray(spec.box_hi, float)
    support = np.flatnonzero(q > 0)
    if support.size == 1:
        u = U[support[0]].copy()
        return Selection(True, u, 0.0, 0.0, 0.0)
    F = _f_at(spec, x, U, nu)
    target = q @ F
    Lbar = float(q @ _L_at(spec, x, U, nu))
    mbar = float(q @ _qnorm(U, spec.q))

    def score(u):
        fm = float(np.linalg.norm(_f_at(spec, x, u, nu)[0] - target))
        return fm, float(_L_at(spec, x, u, nu)[0] - Lbar), float(_qnorm(u, spec.q)[0] - mbar)

    def good(s):
        return s[0] <= F_MATCH_TOL and s[1] <= SLACK_TOL and s[2] <= SLACK_TOL

    u, _ = _newton(spec, x, nu, target, q @ U, lo, hi)
    s = score(u)
    first = (u, s)
    if not good(s):
        axes = [np.linspace(a, b, grid if lo.size == 1 else 21) for a, b in zip(lo, hi)]
        cands = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        Fc = spec.f(x[None, :], cands, nu)[0]
        order = np.argsort(np.linalg.norm(Fc - target, axis=1), kind="stable")
        for c in cands[order[:10]]:
            u2, _ = _newton(spec, x, nu, target, c, lo, hi)
            s2 = score(u2)
            if good(s2):
                u, s = u2, s2
                break
    if good(s):
        return Selection(True, u, s[1], s[2], s[0])
    u, s = first
    reason = "f-match" if s[0] > F_MATCH_TOL else ("L-slack" if s[1] > SLACK_TOL else "moment-slack")
    return Selection(False, u, s[1], s[2], s[0],
                     _witness(q, U, reason, alpha=u.tolist(), z1=s[1], z2=s[2], f_match=s[0]))


def convexity_probe(spec, m, t, x, pairs=64, seed=0, grid=401):
    """Test mixtures of atom pairs for a control matching the mixed drift without extra cost.

    Every atom pair is probed at lambda = 1/2, then ``pairs`` random pairs
    at random lambda. The reported witness is the largest violation.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    k = min(int(round(t / m.dt)), m.n_steps)
    nu = m[k]
    U = spec.atoms.points
    M = U.shape[0]
    plan = [(i, j, 0.5) for i in range(M) for j in range(i + 1, M)]
    for _ in range(pairs if M > 1 else 0):
        i, j = rng.choice(M, size=2, replace=False)
        plan.append((int(min(i, j)), int(max(i, j)), float(rng.uniform(0.05, 0.95))))
    failures = []
    for i, j, lam in plan:
        q = np.zeros(M)
        q[i] += lam
        q[j] += 1.0 - lam
        sel = barycentric_selection(q, spec, nu, x, grid=grid)
        if not sel.ok:
            excess = max(sel.z1 - SLACK_TOL, sel.z2 - SLACK_TOL, sel.f_match - F_MATCH_TOL)
            failures.append({"u1": U[i].tolist(), "u2": U[j].tolist(), "lam": lam, "alpha": sel.alpha.tolist(),
                             "z1": sel.z1, "z2": sel.z2, "f_match": sel.f_match, "excess": excess})
    worst = max(failures, key=lambda w: w["excess"]) if failures else None
    return {"passed": not failures, "probes": len(plan), "failures": failures,
            "witness": worst, "t": float(t), "x": x.tolist()}


# -- strict equilibrium -------------------------------------------------------

@dataclass
class StrictResult:
    ensemble: object
    feedback: FeedbackControl
    alpha: np.ndarray
    cells: np.ndarray
    slack_z1: np.ndarray
    slack_z2: np.ndarray
    f_match_error: np.ndarray
    cost_relaxed: float
    cost_strict: float
    flow_gap: float
    budget: np.ndarray

    def report_rows(self):
        rows = []
        for i, c in enumerate(self.cells):
            rows.append({"cell": int(c), "alpha": self.alpha[c].tolist(), "z1": float(self.slack_z1[i]),
                         "z2": float(self.slack_z2[i]), "f_match": float(self.f_match_error[i])})
        return rows

    def summary(self):
        return {
            "cost_relaxed": self.cost_relaxed,
            "cost_strict": self.cost_strict,
            "flow_gap": self.flow_gap,
            "max_z1": float(np.max(self.slack_z1)),
            "max_z2": float(np.max(self.slack_z2)),
            "max_f_match": float(np.max(self.f_match_error)),
            "max_budget": float(np.max(self.budget)),
        }


def _midpoint_witness(sel, q, spec, nu, x):
    """Prefer the equal mixture of a failing two-atom support as the witness.

    The cell's own weights are kept under ``cell_weights``; if the midpoint
    happens to be selectable the observed failure is reported instead.
    """
    support = np.flatnonzero(q > 0)
    if support.size != 2:
        return sel.witness
    half = np.zeros_like(q)
    half[support] = 0.5
    mid = barycentric_selection(half, spec, nu, x)
    if mid.ok:
        return sel.witness
    return dict(mid.witness, cell_weights=q[support].tolist())


def _snap(alpha, U, tol=1e-12):
    """Round selections onto atoms and onto each other when within tol."""
    out = alpha.copy()
    dist = np.max(np.abs(out[:, None, :] - U[None, :, :]), axis=-1)
    near = dist.min(axis=1) <= tol
    out[near] = U[np.argmin(dist[near], axis=1)]
    order = np.lexsort(out.T[::-1])
    for a, b in zip(order[:-1], order[1:]):
        if np.max(np.abs(out[b] - out[a])) <= tol:
            out[b] = out[a]
    return out


def _cell_centers(qhat):
    per_t = qhat.x_bins**qhat.dim
    idx = np.stack(np.unravel_index(np.arange(per_t), (qhat.x_bins,) * qhat.dim), axis=-1)
    return (idx + 0.5) / qhat.x_bins


def strict_equilibrium_from(P, spec, t_bins=None, x_bins=32):
    """Pure ensemble P0 from a relaxed one by barycentric selection per cell.

    Cells visited by P are evaluated at their centre and at the flow node
    of their left time edge; unvisited cells copy the nearest visited one.
    Raises NonConvexityError on the first failing cell.
    """
    atoms = _shared_atoms(P)
    if not atoms.same_as(spec.atoms):
        raise ValueError("ensemble controls must use the spec's atoms")
    m = empirical_flow(P)
    qhat = feedback_from(P, t_bins, x_bins)
    tb, per_t = qhat.t_bins, qhat.x_bins**qhat.dim
    centers = _cell_centers(qhat)
    n_cells = tb * per_t
    visited = np.flatnonzero(qhat.bin_mass.reshape(-1) > 0)
    alpha = np.empty((n_cells, spec.n))
    z1, z2, fm = np.empty(visited.size), np.empty(visited.size), np.empty(visited.size)
    for i, c in enumerate(visited):
        b, s = divmod(int(c), per_t)
        k = min(int(np.floor(b * m.n_steps / tb + 1e-9)), m.n_steps)
        sel = barycentric_selection(qhat.table[b, s], spec, m[k], centers[s])
        if not sel.ok:
            raise NonConvexityError(int(c), dict(_midpoint_witness(sel, qhat.table[b, s], spec, m[k], centers[s]),
                                                 t_bin=b, x_bin=s))
        alpha[c], z1[i], z2[i], fm[i] = sel.alpha, sel.z1, sel.z2, sel.f_match
    # P-null cells copy the nearest visited cell, as the feedback table does
    empty = np.setdiff1d(np.arange(n_cells), visited)
    if empty.size:
        alpha[empty] = alpha[_nearest_cells(empty, visited, tb, qhat.x_bins, qhat.dim)]
    alpha = _snap(alpha, spec.atoms.points)
    # closed-loop replay of the pure feedback
    N = m.n_steps
    dt = spec.T / N
    geom = qhat.geom
    x0s = P.positions[:, 0]
    X = x0s.copy()
    U_path = np.empty((len(P), N, spec.n))
    for k in range(N):
        cell = FeedbackControl.cell_index(geom, np.full(len(P), k * dt), X)
        U_path[:, k] = alpha[cell]
        drift = np.stack([spec.f(X[i:i + 1], U_path[i, k][None], m[k])[0, 0] for i in range(len(P))])
        X = X + dt * drift
        X = normalize(X) if spec.wrap else X
    particles = []
    for i in range(len(P)):
        ua = ControlAtoms(np.unique(np.vstack([U_path[i], np.zeros((1, spec.n))]), axis=0))
        particles.append((x0s[i], dirac_control(U_path[i], ua, spec.T), P.weights[i]))
    P0 = flow_ensemble(particles, m, spec)
    budget = np.array([moment(mu, spec.q) for mu in P0.controls])
    return StrictResult(P0, qhat, alpha, visited, z1, z2, fm, ensemble_cost(m, P, spec), ensemble_cost(m, P0, spec),
                        flow_distance(empirical_flow(P0), m), budget)

