"""Relaxed state equation, particle ensembles and their induced flows."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .control import RelaxedControl
from .measures import AtomicMeasure, normalize, w1

HOLDER_TOL = 1e-6


class NonFiniteError(FloatingPointError):
    def __init__(self, step, where=""):
        super().__init__(f"non-finite drift at step {step}{where}")
        self.step = step


def workers():
    """Worker cap from MFC_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("MFC_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class Path:
    """Positions at the N+1 grid nodes and the N pre-wrap increments."""

    positions: np.ndarray
    increments: np.ndarray
    horizon: float

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        inc = np.array(self.increments, dtype=np.float64)
        if pos.ndim == 1:
            pos = pos[:, None]
        if inc.ndim == 1:
            inc = inc[:, None]
        if pos.shape[0] != inc.shape[0] + 1 or pos.shape[1] != inc.shape[1]:
            raise ValueError("need N+1 positions for N increments")
        pos.flags.writeable = False
        inc.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self):
        return self.increments.shape[0]

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def lifted_steps(self, wrap=True):
        """Displacements read off the positions, unwound with the increments."""
        raw = np.diff(self.positions, axis=0)
        if not wrap:
            return raw
        return raw - np.round(raw - self.increments)

    def to_dict(self):
        return {"horizon": self.horizon, "positions": self.positions, "increments": self.increments}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["positions"]), np.asarray(data["increments"]), float(data["horizon"]))


@dataclass(frozen=True, eq=False)
class FlowMeasure:
    """One torus measure per grid node; m(t) is the left-node measure between nodes."""

    measures: tuple
    horizon: float

    def __post_init__(self):
        ms = tuple(self.measures)
        if len(ms) < 2:
            raise ValueError("a flow needs at least two nodes")
        object.__setattr__(self, "measures", ms)

    @classmethod
    def constant(cls, m0, n_steps, horizon):
        return cls((m0,) * (n_steps + 1), horizon)

    @property
    def n_steps(self):
        return len(self.measures) - 1

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def __getitem__(self, k):
        return self.measures[k]

    def mix(self, other, lam):
        """Node-wise (1 - lam) * self + lam * other."""
        if other.n_steps != self.n_steps:
            raise ValueError("flows live on different grids")
        return FlowMeasure(tuple(a.mix(b, lam) for a, b in zip(self.measures, other.measures)), self.horizon)

    def to_dict(self):
        return {"horizon": self.horizon, "nodes": [m.to_dict() for m in self.measures]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(AtomicMeasure.from_dict(m) for m in data["nodes"]), float(data["horizon"]))


def flow_distance(m1, m2):
    """sup over nodes of d1(m1(t), m2(t))."""
    if m1.n_steps != m2.n_steps:
        raise ValueError("flows live on different grids")
    return max(w1(a, b) for a, b in zip(m1.measures, m2.measures))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Weighted (path, relaxed control) pairs."""

    paths: tuple
    controls: tuple
    weights: np.ndarray

    def __post_init__(self):
        paths, controls = tuple(self.paths), tuple(self.controls)
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not (len(paths) == len(controls) == w.shape[0]) or w.shape[0] == 0:
            raise ValueError("need one weight per (path, control) pair")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("ensemble weights must be a probability vector")
        for i, (pa, mu) in enumerate(zip(paths, controls)):
            if pa.n_steps != mu.n_steps:
                raise ValueError(f"pair {i}: path and control grids differ")
        w.flags.writeable = False
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "controls", controls)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.paths)

    @property
    def n_steps(self):
        return self.paths[0].n_steps

    @property
    def horizon(self):
        return self.paths[0].horizon

    @property
    def positions(self):
        return np.stack([p.positions for p in self.paths])

    def initial_measure(self):
        return AtomicMeasure(self.positions[:, 0], self.weights).merged()

    def shared_atoms(self):
        first = self.controls[0].atoms
        return first if all(c.atoms.same_as(first) for c in self.controls) else None

    def control_weights(self):
        return np.stack([c.weights for c in self.controls])

    def to_dict(self):
        return {
            "weights": self.weights,
            "paths": [p.to_dict() for p in self.paths],
            "controls": [c.to_dict() for c in self.controls],
        }

    @classmethod
    def from_dict(cls, data):
        controls = [RelaxedControl.from_dict(c) for c in data["controls"]]
        # share one atom object when tables agree
        first = controls[0].atoms
        controls = [RelaxedControl(c.weights, first, c.horizon) if c.atoms.same_as(first) else c
                    for c in controls]
        return cls(tuple(Path.from_dict(p) for p in data["paths"]), tuple(controls),
                   np.asarray(data["weights"], dtype=np.float64))


def mix_ensembles(P1, P2, lam):
    """lam * P1 + (1 - lam) * P2 as a union of weighted pairs."""
    return PathEnsemble(P1.paths + P2.paths, P1.controls + P2.controls,
                        np.concatenate([lam * P1.weights, (1.0 - lam) * P2.weights]))


# -- integration --------------------------------------------------------------

def average_drift(w, F):
    """sum_j w[:, j] * F[:, j, :] accumulated in atom order."""
    acc = w[:, 0, None] * F[:, 0, :]
    for j in range(1, w.shape[1]):
        acc = acc + w[:, j, None] * F[:, j, :]
    return acc


def flow_field(spec, m, U):
    def field(k, X):
        return spec.f(X, U, m[k])

    return field


def integrate_batch(x0, W, field, dt, wrap=True, scheme="euler"):
    """Integrate B paths with control tables W (B, N, M).

    ``field(k, X)`` returns per-atom drifts (B, M, d) at step k. Returns
    positions (B, N+1, d) and pre-wrap increments (B, N, d).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    Bn, N, _ = W.shape
    d = x0.shape[1]
    pos = np.empty((Bn, N + 1, d))
    inc = np.empty((Bn, N, d))
    pos[:, 0] = normalize(x0) if wrap else x0
    wrapf = normalize if wrap else (lambda y: y)
    for k in range(N):
        X = pos[:, k]
        wk = W[:, k]
        if scheme == "euler":
            step = dt * average_drift(wk, field(k, X))
        elif scheme == "rk4":
            k1 = average_drift(wk, field(k, X))
            k2 = average_drift(wk, field(k, wrapf(X + 0.5 * dt * k1)))
            k3 = average_drift(wk, field(k, wrapf(X + 0.5 * dt * k2)))
            k4 = average_drift(wk, field(k, wrapf(X + dt * k3)))
            step = dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        if not np.all(np.isfinite(step)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(step), axis=1))[0])
            raise NonFiniteError(k, f" (path {bad})")
        inc[:, k] = step
        pos[:, k + 1] = wrapf(X + step)
    return pos, inc


def _check_grid(mu, m, spec):
    if mu.n_steps != m.n_steps:
        raise ValueError(f"control has {mu.n_steps} steps but the flow has {m.n_steps}")
    if abs(mu.horizon - spec.T) > 1e-12 or abs(m.horizon - spec.T) > 1e-12:
        raise ValueError("control, flow and spec horizons differ")


def integrate_path(x0, mu, m, spec, scheme="euler"):
    _check_grid(mu, m, spec)
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))[None, :]
    pos, inc = integrate_batch(x0, mu.weights[None], flow_field(spec, m, mu.atoms.points), mu.dt,
                               spec.wrap, scheme)
    return Path(pos[0], inc[0], spec.T)


def flow_ensemble(particles, m, spec, scheme="euler"):
    """Integrate weighted (x0, mu, weight) triples independently."""
    x0s = [np.atleast_1d(np.asarray(x, dtype=np.float64)) for x, _, _ in particles]
    mus = [mu for _, mu, _ in particles]
    w = np.array([float(wt) for _, _, wt in particles])
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("particle weights must sum to 1")
    paths = [None] * len(particles)
    groups = {}
    for i, mu in enumerate(mus):
        _check_grid(mu, m, spec)
        groups.setdefault(id(mu.atoms), []).append(i)
    for idx in groups.values():
        U = mus[idx[0]].atoms.points
        W = np.stack([mus[i].weights for i in idx])
        try:
            pos, inc = integrate_batch(np.stack([x0s[i] for i in idx]), W, flow_field(spec, m, U),
                                       m.dt, spec.wrap, scheme)
        except NonFiniteError as exc:
            raise NonFiniteError(exc.step, f" (particle {idx[0]} group)") from exc
        for a, i in enumerate(idx):
            paths[i] = Path(pos[a], inc[a], spec.T)
    return PathEnsemble(tuple(paths), tuple(mus), w)


def empirical_flow(P):
    """Node-wise push-forward of the path weights."""
    pos = P.positions
    nodes = tuple(AtomicMeasure(pos[:, k], P.weights).merged() for k in range(pos.shape[1]))
    return FlowMeasure(nodes, P.horizon)


def velocity_budget(path, spec):
    """(sum dt |increment/dt|^(q/p))^(p/q), the discrete L_{q/p} norm of the velocity."""
    s = spec.q / spec.p
    speed = np.linalg.norm(path.increments, axis=1) / path.dt
    return float((path.dt * np.sum(speed**s)) ** (1.0 / s))


def check_holder(m, K, r):
    """Worst ratio d1(m(ti), m(tj)) / (K |ti - tj|^(1/r)) over node pairs."""
    t = m.times
    pairs = [(i, j) for i in range(len(t)) for j in range(i + 1, len(t))]

    def one(ij):
        i, j = ij
        return w1(m[i], m[j]) / (K * abs(t[j] - t[i]) ** (1.0 / r))

    nw = workers()
    if nw > 1:
        with ThreadPoolExecutor(nw) as ex:
            ratios = list(ex.map(one, pairs))
    else:
        ratios = [one(ij) for ij in pairs]
    k = int(np.argmax(ratios)) if ratios else 0
    worst = float(ratios[k]) if ratios else 0.0
    return {"max_ratio": worst, "passed": worst <= 1.0 + HOLDER_TOL,
            "witness": list(pairs[k]) if ratios else None, "pairs": len(pairs)}


def support_residual(P, m, spec):
    """Max over pairs and nodes of |gamma(t_k) - gamma(0) - sum_{j<k} dt <f>_j|."""
    worst = 0.0
    for i, (path, mu) in enumerate(zip(P.paths, P.controls)):
        _check_grid(mu, m, spec)
        U = mu.atoms.points
        lifted = path.lifted_steps(spec.wrap)
        drift = np.empty_like(lifted)
        for k in range(path.n_steps):
            X = path.positions[k][None, :]
            drift[k] = path.dt * average_drift(mu.weights[k][None, :], spec.f(X, U, m[k]))[0]
        err = np.cumsum(lifted - drift, axis=0)
        worst = max(worst, float(np.max(np.linalg.norm(err, axis=1))))
    return worst
