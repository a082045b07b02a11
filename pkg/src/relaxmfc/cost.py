"""Individual cost J^m(gamma, mu) and total cost J(m, P)."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CostBreakdown:
    running: float
    terminal: float

    @property
    def total(self):
        return self.running + self.terminal

    def to_dict(self):
        return {"running": self.running, "terminal": self.terminal, "total": self.total}


def running_cost_rows(spec, m, U, positions, W, dt):
    """Left-endpoint quadrature of L per path for a batch.

    positions (B, N+1, d), W (B, N, M); returns (B,).
    """
    N = W.shape[1]
    total = np.zeros(W.shape[0])
    for k in range(N):
        Lk = spec.L(positions[:, k], U, m[k])
        if not np.all(np.isfinite(Lk)):
            b, j = np.argwhere(~np.isfinite(Lk))[0]
            raise FloatingPointError(f"non-finite Lagrangian at step {k}, atom {j} (path {b})")
        acc = W[:, k, 0] * Lk[:, 0]
        for j in range(1, Lk.shape[1]):
            acc = acc + W[:, k, j] * Lk[:, j]
        total = total + dt * acc
    return total


def path_cost(path, mu, m, spec):
    if path.n_steps != mu.n_steps or mu.n_steps != m.n_steps:
        raise ValueError("path, control and flow grids differ")
    running = running_cost_rows(spec, m, mu.atoms.points, path.positions[None], mu.weights[None], mu.dt)[0]
    terminal = float(spec.terminal(path.positions[-1][None, :])[0]) if spec.g is not None else 0.0
    return CostBreakdown(float(running), terminal)


def ensemble_cost(m, P, spec):
    """Weight-averaged total path cost (summed in pair order)."""
    total = 0.0
    for w, path, mu in zip(P.weights, P.paths, P.controls):
        total += w * path_cost(path, mu, m, spec).total
    return float(total)


def ensemble_costs(m, P, spec):
    return np.array([path_cost(pa, mu, m, spec).total for pa, mu in zip(P.paths, P.controls)])
