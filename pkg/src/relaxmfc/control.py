"""Relaxed controls on a fixed atom set, the q-moment budget, feedback tables."""

from dataclasses import dataclass

import numpy as np

from .measures import transport_lp

ROW_TOL = 1e-12
BUDGET_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class ControlAtoms:
    """M distinct control vectors in R^n; one of them is the origin."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("atoms must be a nonempty (M, n) array")
        diff = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=-1)
        np.fill_diagonal(diff, np.inf)
        if np.any(diff <= 1e-14):
            raise ValueError("control atoms must be pairwise distinct")
        zero = np.flatnonzero(np.all(pts == 0.0, axis=1))
        if zero.size != 1:
            raise ValueError("control atoms must contain the origin")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "origin", int(zero[0]))

    @classmethod
    def from_box(cls, lo, hi, per_axis):
        """Tensor grid over the box [lo, hi]; the origin is appended if missing."""
        lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if np.any(lo > 0) or np.any(hi < 0):
            raise ValueError("the atom box must contain the origin")
        axes = [np.linspace(a, b, int(per_axis)) for a, b in zip(lo, hi)]
        for ax in axes:
            ax[np.abs(ax) < 1e-15] = 0.0
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        if not np.any(np.all(grid == 0.0, axis=1)):
            grid = np.vstack([grid, np.zeros(lo.size)])
        return cls(grid)

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def norms(self, s):
        return np.linalg.norm(self.points, axis=1) ** s

    def index_of(self, u, tol=1e-12):
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        hit = np.flatnonzero(np.max(np.abs(self.points - u), axis=1) <= tol)
        if hit.size == 0:
            raise ValueError(f"{u.tolist()} is not a control atom")
        return int(hit[0])

    def same_as(self, other):
        return self is other or (
            self.points.shape == other.points.shape and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    """Piecewise-constant family of probability vectors over ``atoms``.

    Row k is the Young measure on the k-th step of a uniform grid of
    ``N = weights.shape[0]`` steps over [0, horizon].
    """

    weights: np.ndarray
    atoms: ControlAtoms
    horizon: float

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != len(self.atoms):
            raise ValueError(f"weights must have shape (N, {len(self.atoms)})")
        if w.shape[0] < 1:
            raise ValueError("need at least one time step")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > ROW_TOL)
        if bad.size:
            raise ValueError(f"row {int(bad[0])} is not a probability vector")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def n_steps(self):
        return self.weights.shape[0]

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps) * self.dt

    @classmethod
    def constant(cls, row, atoms, horizon, n_steps):
        row = np.asarray(row, dtype=np.float64)
        return cls(np.tile(row, (n_steps, 1)), atoms, horizon)

    @classmethod
    def null(cls, atoms, horizon, n_steps):
        """L (x) delta_0."""
        row = np.zeros(len(atoms))
        row[atoms.origin] = 1.0
        return cls.constant(row, atoms, horizon, n_steps)

    def mix(self, other, lam):
        check_same_grid(self, other)
        return RelaxedControl((1.0 - lam) * self.weights + lam * other.weights, self.atoms, self.horizon)

    def to_dict(self):
        return {
            "grid": self.n_steps,
            "horizon": self.horizon,
            "atoms": self.atoms.points,
            "weights": self.weights,
        }

    @classmethod
    def from_dict(cls, data, atoms=None):
        atoms = atoms if atoms is not None else ControlAtoms(np.asarray(data["atoms"], dtype=np.float64))
        w = np.asarray(data["weights"], dtype=np.float64)
        if w.shape[0] != int(data["grid"]):
            raise ValueError("grid size does not match the weight table")
        return cls(w, atoms, float(data["horizon"]))


def check_same_grid(mu1, mu2):
    if mu1.n_steps != mu2.n_steps or mu1.horizon != mu2.horizon:
        raise ValueError("controls live on different time grids")
    if not mu1.atoms.same_as(mu2.atoms):
        raise ValueError("controls use different atom sets")


def moment(mu, s):
    """Integral of |u|^s against the relaxed control."""
    if s < 1:
        raise ValueError("moment order must be >= 1")
    per_step = mu.weights @ mu.atoms.norms(s)
    return float(mu.dt * per_step.sum())


def enforce_budget(mu, R, q):
    """Smallest mixture toward L (x) delta_0 with q-moment at most R."""
    mom = moment(mu, q)
    if mom <= R + BUDGET_SLACK * max(1.0, R):
        return mu
    theta = 1.0 - R / mom
    w = (1.0 - theta) * mu.weights
    w[:, mu.atoms.origin] += theta
    return RelaxedControl(w, mu.atoms, mu.horizon)


def enforce_budget_batch(weights, norms_q, dt, origin, R):
    """Row-block version of :func:`enforce_budget` for arrays (B, N, M)."""
    mom = dt * np.einsum("bnm,m->b", weights, norms_q)
    over = mom > R + BUDGET_SLACK * max(1.0, R)
    if not np.any(over):
        return weights
    out = weights.copy()
    theta = np.where(over, 1.0 - R / np.where(over, mom, 1.0), 0.0)
    out[over] *= (1.0 - theta[over])[:, None, None]
    out[over, :, origin] += theta[over][:, None]
    return out


def random_control(rng, atoms, horizon, n_steps, R, q, max_support=3):
    """Seeded feasible control: sparse Dirichlet rows, pulled into the budget set."""
    M = len(atoms)
    w = np.zeros((n_steps, M))
    for k in range(n_steps):
        j = rng.choice(M, size=min(M, int(rng.integers(1, max_support + 1))), replace=False)
        w[k, j] = rng.dirichlet(np.ones(j.size))
    w /= w.sum(axis=1, keepdims=True)
    return enforce_budget(RelaxedControl(w, atoms, horizon), R, q)


def control_distance(mu1, mu2):
    """d1(mu1/T, mu2/T) on [0, T] x R^n with ground metric |dt| + |du|."""
    check_same_grid(mu1, mu2)
    N, M = mu1.weights.shape
    t = (np.arange(N) + 0.5) * mu1.dt
    u = mu1.atoms.points
    tt = np.repeat(t, M)
    uu = np.tile(u, (N, 1))
    a = (mu1.weights / N).ravel()
    b = (mu2.weights / N).ravel()
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    cost = np.abs(tt[ia, None] - tt[None, ib]) + np.linalg.norm(
        uu[ia, None, :] - uu[None, ib, :], axis=-1
    )
    return max(0.0, transport_lp(cost, a[ia], b[ib]))


def dirac_control(u_path, atoms, horizon):
    """L (x) delta_{u(t)} for a path of atom values, one per time step."""
    u_path = np.asarray(u_path, dtype=np.float64)
    if u_path.ndim == 1:
        u_path = u_path[:, None]
    w = np.zeros((u_path.shape[0], len(atoms)))
    for k, u in enumerate(u_path):
        w[k, atoms.index_of(u)] = 1.0
    return RelaxedControl(w, atoms, horizon)


@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """Table of control probability vectors indexed by (time bin, space bin).

    Space bins are a uniform ``x_bins``-per-axis partition of [0, 1)^d,
    flattened in C order; lookups use the containing bin.
    """

    table: np.ndarray
    atoms: np.ndarray
    horizon: float
    t_bins: int
    x_bins: int
    dim: int
    bin_mass: np.ndarray = None

    def __post_init__(self):
        table = np.array(self.table, dtype=np.float64)
        if table.shape[:2] != (self.t_bins, self.x_bins**self.dim):
            raise ValueError("table shape does not match the bin geometry")
        bad = np.abs(table.sum(axis=-1) - 1.0) > ROW_TOL
        if np.any(bad) or np.any(table < 0):
            raise ValueError("every cell must hold a probability vector")
        table.flags.writeable = False
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "atoms", np.asarray(self.atoms, dtype=np.float64))

    @staticmethod
    def geometry(horizon, t_bins, x_bins, dim):
        return {"horizon": float(horizon), "t_bins": int(t_bins), "x_bins": int(x_bins), "dim": int(dim)}

    @staticmethod
    def cell_index(geom, times, points):
        """Flat cell index for arrays of times (k,) and torus points (k, d)."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        tb, xb = geom["t_bins"], geom["x_bins"]
        # grid nodes k*T/N must land in bin k despite rounding
        ti = np.floor(times / geom["horizon"] * tb + 1e-9).astype(np.intp)
        ti = np.clip(ti, 0, tb - 1)
        xi = np.clip(np.floor(points * xb).astype(np.intp), 0, xb - 1)
        flat_x = np.ravel_multi_index(tuple(xi.T), (xb,) * geom["dim"])
        return ti * xb ** geom["dim"] + flat_x

    @property
    def geom(self):
        return self.geometry(self.horizon, self.t_bins, self.x_bins, self.dim)

    def rows_at(self, t, points):
        """Control vectors for the points (B, d) at time t, shape (B, M)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        idx = self.cell_index(self.geom, np.full(points.shape[0], t), points)
        per_t = self.x_bins**self.dim
        return self.table[idx // per_t, idx % per_t]

    def to_dict(self):
        out = {
            "t_bins": self.t_bins,
            "x_bins": self.x_bins,
            "dim": self.dim,
            "horizon": self.horizon,
            "atoms": self.atoms,
            "weights": self.table.reshape(-1, self.table.shape[-1]),
        }
        if self.bin_mass is not None:
            out["bin_mass"] = np.asarray(self.bin_mass).reshape(-1)
        return out

    @classmethod
    def from_dict(cls, data):
        tb, xb, d = int(data["t_bins"]), int(data["x_bins"]), int(data["dim"])
        table = np.asarray(data["weights"], dtype=np.float64).reshape(tb, xb**d, -1)
        mass = data.get("bin_mass")
        mass = None if mass is None else np.asarray(mass).reshape(tb, xb**d)
        return cls(table, np.asarray(data["atoms"]), float(data["horizon"]), tb, xb, d, bin_mass=mass)
