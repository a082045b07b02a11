"""Atomic probability measures on the flat torus and on control space.

Points of the torus are stored by their representative in ``[0, 1)^d``.
Two Wasserstein-1 backends are provided: a transport LP (any dimension,
either domain) and the exact closed form on the circle.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import kernels

TORUS = "torus"
CONTROL = "control"
DOMAINS = (TORUS, CONTROL)

MERGE_TOL = 1e-12
WEIGHT_TOL = 1e-12
LP_GAP_TOL = 1e-9


class TransportError(RuntimeError):
    pass


def normalize(x):
    """Canonical representative of ``x`` in ``[0, 1)^d``."""
    y = np.mod(np.asarray(x, dtype=np.float64), 1.0)
    # mod of a tiny negative number rounds up to exactly 1.0
    return np.where(y >= 1.0, 0.0, y)


def torus_delta(a, b):
    """Per-coordinate geodesic offsets |a - b| on the circle, in [0, 1/2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = np.abs(normalize(a) - normalize(b))
    return np.minimum(d, 1.0 - d)


def torus_dist(a, b):
    """Geodesic distance on T^d; broadcasts over leading axes."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    d = torus_delta(a, b)
    if d.ndim == 1:
        return float(np.sqrt(np.sum(d * d)))
    return np.sqrt(np.sum(d * d, axis=-1))


def pairwise_cost(x, y, domain):
    """Ground-cost matrix between two point clouds of shape (k, dim)."""
    if domain == TORUS:
        return torus_dist(x[:, None, :], y[None, :, :])
    return np.sqrt(np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1))


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Finitely supported probability measure.

    ``support`` has shape (k, dim); torus supports are normalized on
    construction. Instances are read-only.
    """

    support: np.ndarray
    weights: np.ndarray
    domain: str = TORUS

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        support = np.array(self.support, dtype=np.float64)
        if support.ndim == 1:
            support = support[:, None]
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if support.ndim != 2 or support.shape[0] != weights.shape[0]:
            raise ValueError("support and weights must have equal length")
        if weights.shape[0] < 1:
            raise ValueError("a measure needs at least one atom")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {weights.sum()!r}, not 1")
        if not np.all(np.isfinite(support)):
            raise ValueError("support points must be finite")
        if self.domain == TORUS:
            support = normalize(support)
        support.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def dirac(cls, point, domain=TORUS):
        return cls(np.atleast_1d(np.asarray(point, dtype=np.float64))[None, :], [1.0], domain)

    @classmethod
    def uniform(cls, points, domain=TORUS):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        k = points.shape[0]
        return cls(points, np.full(k, 1.0 / k), domain)

    @classmethod
    def from_unnormalized(cls, support, weights, domain=TORUS):
        """Drop zero atoms and rescale to unit mass."""
        weights = np.asarray(weights, dtype=np.float64)
        support = np.asarray(support, dtype=np.float64)
        keep = weights > 0
        total = weights[keep].sum()
        if total <= 0:
            raise ValueError("zero-mass measure")
        return cls(support[keep], weights[keep] / total, domain)

    @property
    def dim(self):
        return self.support.shape[1]

    def __len__(self):
        return self.support.shape[0]

    @cached_property
    def fourier(self):
        """First Fourier moments (E cos 2*pi*y, E sin 2*pi*y) per coordinate."""
        if self.domain != TORUS:
            raise ValueError("Fourier moments are defined for torus measures only")
        ang = 2.0 * np.pi * self.support
        return self.weights @ np.cos(ang), self.weights @ np.sin(ang)

    @cached_property
    def mean(self):
        return self.weights @ self.support

    def merged(self, tol=MERGE_TOL):
        """Merge lexicographically adjacent atoms closer than ``tol``."""
        if len(self) == 1:
            return self
        order = np.lexsort(self.support.T[::-1])
        pts = self.support[order]
        w = self.weights[order]
        if self.domain == TORUS:
            gap = torus_dist(pts[1:], pts[:-1])
        else:
            gap = np.sqrt(np.sum((pts[1:] - pts[:-1]) ** 2, axis=1))
        new_group = np.concatenate([[True], gap > tol])
        if self.domain == TORUS and self.dim == 1 and new_group.sum() > 1:
            # the last run may wrap onto the first one
            if torus_dist(pts[-1], pts[0]) <= tol:
                last = np.flatnonzero(new_group)[-1]
                n = pts.shape[0]
                pts = np.concatenate([pts[last:], pts[:last]])
                w = np.concatenate([w[last:], w[:last]])
                new_group = np.concatenate([new_group[last:], new_group[:last]])
                new_group[n - last] = False
        if new_group.all():
            return AtomicMeasure(pts, w, self.domain)
        gid = np.cumsum(new_group) - 1
        first = np.flatnonzero(new_group)
        merged_w = np.zeros(first.shape[0])
        # fixed accumulation order for reproducibility
        for i in range(w.shape[0]):
            merged_w[gid[i]] += w[i]
        return AtomicMeasure(pts[first], merged_w, self.domain)

    def mix(self, other, lam):
        """(1 - lam) * self + lam * other."""
        if other.domain != self.domain or other.dim != self.dim:
            raise ValueError("cannot mix measures on different spaces")
        if lam == 0.0:
            return self
        if lam == 1.0:
            return other
        support = np.concatenate([self.support, other.support])
        weights = np.concatenate([(1.0 - lam) * self.weights, lam * other.weights])
        weights = weights / weights.sum()
        return AtomicMeasure(support, weights, self.domain).merged()

    def same_as(self, other, tol=0.0):
        """Equality of weights on identical (merged, sorted) supports."""
        a, b = self.merged(), other.merged()
        if len(a) != len(b) or a.domain != b.domain or a.dim != b.dim:
            return False
        oa = np.lexsort(a.support.T[::-1])
        ob = np.lexsort(b.support.T[::-1])
        if a.domain == TORUS:
            ds = torus_dist(a.support[oa], b.support[ob])
        else:
            ds = np.sqrt(np.sum((a.support[oa] - b.support[ob]) ** 2, axis=1))
        return bool(np.all(ds <= MERGE_TOL) and np.all(np.abs(a.weights[oa] - b.weights[ob]) <= tol))

    def to_dict(self):
        return {"domain": self.domain, "support": self.support, "weights": self.weights}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["support"], dtype=np.float64), data["weights"], data["domain"])


def pushforward(m, fn, vectorized=False):
    """Image measure of ``m`` under ``fn``; coinciding images are merged.

    ``fn`` maps one point (dim,) to one point, or the whole support
    (k, dim) to (k, dim') when ``vectorized`` is set.
    """
    if vectorized:
        pts = np.asarray(fn(np.array(m.support)), dtype=np.float64)
    else:
        pts = np.array([np.atleast_1d(fn(p)) for p in m.support], dtype=np.float64)
    return AtomicMeasure(pts, m.weights, m.domain).merged()


def _check_pair(m1, m2):
    if m1.domain != m2.domain:
        raise ValueError(f"mixed domains: {m1.domain} vs {m2.domain}")
    if m1.dim != m2.dim:
        raise ValueError(f"dimension mismatch: {m1.dim} vs {m2.dim}")


def transport_lp(cost, a, b):
    """Optimal transport value for cost matrix (k1, k2) and marginals a, b.

    Solved with the HiGHS dual simplex; the primal/dual gap is checked
    against ``LP_GAP_TOL`` (relative to max(1, value)).
    """
    cost = np.asarray(cost, dtype=np.float64)
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    a = np.asarray(a, dtype=np.float64)[ia]
    b = np.asarray(b, dtype=np.float64)[ib]
    cost = cost[np.ix_(ia, ib)]
    k1, k2 = cost.shape
    if k1 == 1:
        return float(cost[0] @ b)
    if k2 == 1:
        return float(cost[:, 0] @ a)
    # rescale b so both marginals carry exactly the same total
    b = b * (a.sum() / b.sum())
    rows = np.concatenate([np.repeat(np.arange(k1), k2), k1 + np.tile(np.arange(k2), k1)])
    cols = np.concatenate([np.arange(k1 * k2), np.arange(k1 * k2)])
    A = sp.csr_matrix((np.ones(2 * k1 * k2), (rows, cols)), shape=(k1 + k2, k1 * k2))
    rhs = np.concatenate([a, b])
    res = linprog(
        cost.ravel(),
        A_eq=A,
        b_eq=rhs,
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise TransportError(f"transport LP failed: {res.message}")
    primal = float(res.fun)
    dual = float(rhs @ res.eqlin.marginals)
    if abs(primal - dual) > LP_GAP_TOL * max(1.0, abs(primal)):
        raise TransportError(f"duality gap {abs(primal - dual):.3e} exceeds tolerance")
    return primal


def w1_lp(m1, m2):
    _check_pair(m1, m2)
    cost = pairwise_cost(m1.support, m2.support, m1.domain)
    return transport_lp(cost, m1.weights, m2.weights)


def w1_circle(m1, m2):
    """Exact W1 between two measures on the circle T^1."""
    _check_pair(m1, m2)
    if m1.domain != TORUS or m1.dim != 1:
        raise ValueError("the closed form needs measures on the 1-d torus")
    pos = np.concatenate([m1.support[:, 0], m2.support[:, 0]])
    mass = np.concatenate([m1.weights, -m2.weights])
    order = np.argsort(pos, kind="stable")
    return max(0.0, kernels.circle_w1_sorted(np.ascontiguousarray(pos[order]),
                                             np.ascontiguousarray(mass[order])))


def w1(m1, m2, backend="auto"):
    """Kantorovich-Rubinstein distance between two atomic measures.

    ``backend`` is ``"lp"``, ``"circle"`` or ``"auto"`` (circle on T^1,
    LP elsewhere).
    """
    _check_pair(m1, m2)
    if backend == "auto":
        backend = "circle" if (m1.domain == TORUS and m1.dim == 1) else "lp"
    if backend == "circle":
        return w1_circle(m1, m2)
    if backend == "lp":
        return w1_lp(m1, m2)
    raise ValueError(f"unknown backend {backend!r}")


@dataclass(frozen=True, eq=False)
class JointMeasure:
    """Atomic measure on [0, T] x T^d x (control atoms).

    Controls are stored as indices into ``atoms`` (shape (M, n)).
    """

    times: np.ndarray
    points: np.ndarray
    controls: np.ndarray
    weights: np.ndarray
    atoms: np.ndarray
    horizon: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        controls = np.asarray(self.controls, dtype=np.intp).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        atoms = np.asarray(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        k = weights.shape[0]
        if not (times.shape[0] == points.shape[0] == controls.shape[0] == k):
            raise ValueError("joint atoms have inconsistent lengths")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if k and (controls.min() < 0 or controls.max() >= atoms.shape[0]):
            raise ValueError("control index out of range")
        for name, val in (("times", times), ("points", normalize(points)), ("controls", controls),
                          ("weights", weights), ("atoms", atoms)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def mass(self):
        return float(self.weights.sum())

    def control_marginal(self):
        return np.bincount(self.controls, weights=self.weights, minlength=self.atoms.shape[0])


def disintegrate(eta, t_bins, x_bins):
    """Binned disintegration of ``eta`` along its (t, x) marginal.

    Each nonempty (t, x) bin receives the renormalized control histogram of
    the atoms it contains; empty bins copy the nearest nonempty bin in
    index space (x wraps, t does not; ties go to the smaller flat index).
    """
    from .control import FeedbackControl

    if t_bins < 1 or x_bins < 1:
        raise ValueError("bin counts must be >= 1")
    if eta.mass <= 0:
        raise ValueError("cannot disintegrate a zero-mass measure")
    d = eta.points.shape[1]
    M = eta.atoms.shape[0]
    geom = FeedbackControl.geometry(eta.horizon, t_bins, x_bins, d)
    cell = FeedbackControl.cell_index(geom, eta.times, eta.points)
    n_cells = t_bins * x_bins**d
    hist = np.zeros((n_cells, M))
    for c, j, w in zip(cell, eta.controls, eta.weights):
        hist[c, j] += w
    mass = hist.sum(axis=1)
    nonempty = np.flatnonzero(mass > 0)
    table = np.zeros_like(hist)
    table[nonempty] = hist[nonempty] / mass[nonempty, None]
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        src = _nearest_cells(empty, nonempty, t_bins, x_bins, d)
        table[empty] = table[src]
    return FeedbackControl(
        table.reshape(t_bins, x_bins**d, M),
        eta.atoms,
        eta.horizon,
        t_bins,
        x_bins,
        d,
        bin_mass=mass.reshape(t_bins, x_bins**d),
    )


def _cell_coords(flat, x_bins, d):
    per_t = x_bins**d
    t_idx = flat // per_t
    rest = flat % per_t
    xs = np.stack(np.unravel_index(rest, (x_bins,) * d), axis=-1) if d else np.zeros((flat.size, 0))
    return t_idx, xs


def _nearest_cells(empty, nonempty, t_bins, x_bins, d, chunk=4096):
    te, xe = _cell_coords(empty, x_bins, d)
    tn, xn = _cell_coords(nonempty, x_bins, d)
    out = np.empty(empty.shape[0], dtype=np.intp)
    for s in range(0, empty.shape[0], chunk):
        sl = slice(s, s + chunk)
        dt = (te[sl, None] - tn[None, :]).astype(np.float64)
        dx = np.abs(xe[sl, None, :] - xn[None, :, :])
        dx = np.minimum(dx, x_bins - dx).astype(np.float64)
        dist2 = dt * dt + np.sum(dx * dx, axis=-1)
        # nonempty is ascending, so argmin's first hit is the smallest index
        out[sl] = nonempty[np.argmin(dist2, axis=1)]
    return out
