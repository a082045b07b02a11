"""Mean-field ResNet: one relaxed control shared by every training sample.

Layer k applies X_{k+1} = X_k + dt * sum_j w_kj * beta_j tanh(alpha_j X_k + rho_j zeta_k)
with parameter atoms a_j = (alpha_j, beta_j, rho_j). Training minimizes the
dataset mean of (X_T - y)^2, plus an optional penalty on the q-moment of
the control, by the projected-gradient engine of the best-response solver.
"""

from dataclasses import dataclass

import numpy as np

from .control import ControlAtoms, RelaxedControl, moment
from .dynamics import NonFiniteError, average_drift, integrate_batch
from .problem import resnet_field, resnet_field_dz
from .solver import projected_descent


@dataclass(frozen=True, eq=False)
class ResNetTask:
    """Samples xi (S,), side inputs zeta (S,) or (S, N), targets y (S,)."""

    xi: np.ndarray
    zeta: np.ndarray
    targets: np.ndarray
    atoms: ControlAtoms
    n_layers: int
    horizon: float = 1.0
    q: float = 2.0
    budget: float = np.inf
    penalty: float = 0.0

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=np.float64).reshape(-1)
        if xi.size == 0:
            raise ValueError("the dataset must be nonempty")
        zeta = np.asarray(self.zeta, dtype=np.float64)
        if zeta.ndim == 1:
            zeta = np.repeat(zeta[:, None], self.n_layers, axis=1)
        if zeta.shape != (xi.size, self.n_layers):
            raise ValueError("zeta must have shape (S,) or (S, n_layers)")
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if y.size != xi.size:
            raise ValueError("one target per sample")
        if self.atoms.dim != 3:
            raise ValueError("parameter atoms are (alpha, beta, rho) triples")
        if not np.any(self.atoms.points[:, 1] == 0.0):
            raise ValueError("atoms must include a zero-output atom (beta = 0)")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "zeta", zeta)
        object.__setattr__(self, "targets", y)

    @property
    def dt(self):
        return self.horizon / self.n_layers

    def field(self, rows=None):
        """Per-atom drifts field(k, X) -> (B, M, 1) for the samples in ``rows``."""
        zeta = self.zeta if rows is None else self.zeta[rows]
        U = self.atoms.points

        def fn(k, X):
            out = resnet_field(X[:, 0], U, zeta[:, k])
            if not np.all(np.isfinite(out)):
                raise NonFiniteError(k, " (activation)")
            return out[:, :, None]

        return fn


def toy_regression(samples=64, layers=16, seed=0):
    """Targets sin(2 pi xi) on uniform inputs.

    The side input of layer k is zeta_k = xi - c_k with centres c_k
    spread over [0, 1], so every layer sees the input through a shifted
    window. The atoms are z-independent steps of several widths, one
    z-dependent atom, and the zero atom.
    """
    rng = np.random.default_rng(seed)
    xi = np.sort(rng.random(samples))
    centres = (np.arange(layers) + 0.5) / layers
    atoms = ControlAtoms(np.array([
        [0.0, 0.0, 0.0],
        [0.0, 3.0, 8.0],
        [0.0, -3.0, 8.0],
        [0.0, 3.0, 32.0],
        [0.0, -3.0, 32.0],
        [0.0, 3.0, 2.0],
        [0.0, -3.0, 2.0],
        [0.0, 3.0, 0.5],
    ]))
    return ResNetTask(xi, xi[:, None] - centres[None, :], np.sin(2 * np.pi * xi), atoms, layers)


def resnet_forward(task, nu, sample=None):
    """Terminal states X_T for all samples (or the index array ``sample``)."""
    if not nu.atoms.same_as(task.atoms):
        raise ValueError("the control must use the task's parameter atoms")
    if nu.n_steps != task.n_layers:
        raise ValueError("the control grid must have one step per layer")
    rows = np.arange(task.xi.size) if sample is None else np.atleast_1d(sample)
    x0 = task.xi[rows, None]
    W = np.broadcast_to(nu.weights, (rows.size,) + nu.weights.shape)
    pos, _ = integrate_batch(x0, W, task.field(rows), task.dt, wrap=False)
    return pos[:, -1, 0]


def _loss_and_grad(task, W, want_grad):
    """Mean squared error of the shared control W (N, M) and its gradient."""
    S = task.xi.size
    dt = task.dt
    U = task.atoms.points
    Wb = np.broadcast_to(W, (S,) + W.shape)
    pos, _ = integrate_batch(task.xi[:, None], Wb, task.field(), dt, wrap=False)
    err = pos[:, -1, 0] - task.targets
    loss = float(np.mean(err * err))
    norms = task.atoms.norms(task.q)
    if task.penalty:
        loss += task.penalty * dt * float(np.sum(W @ norms))
    if not want_grad:
        return loss, None
    lam = 2.0 * err / S
    grad = np.empty_like(W)
    for k in range(task.n_layers - 1, -1, -1):
        X = pos[:, k, 0]
        psi = resnet_field(X, U, task.zeta[:, k])
        # index-ordered sum of the per-sample contributions
        grad[k] = dt * np.add.reduce(lam[:, None] * psi, axis=0)
        dpsi = resnet_field_dz(X, U, task.zeta[:, k])
        lam = lam + dt * average_drift(Wb[:, k], (dpsi * lam[:, None])[:, :, None])[:, 0]
    if task.penalty:
        grad += task.penalty * dt * norms[None, :]
    return loss, grad


def resnet_loss(task, nu):
    return _loss_and_grad(task, nu.weights, False)[0]


def resnet_gradient(task, nu):
    return _loss_and_grad(task, nu.weights, True)


def _per_sample(task, W, rows, want_grad):
    """Squared errors of per-sample controls W (b, N, M) for the samples ``rows``."""
    dt = task.dt
    U = task.atoms.points
    pos, _ = integrate_batch(task.xi[rows, None], W, task.field(rows), dt, wrap=False)
    err = pos[:, -1, 0] - task.targets[rows]
    norms = task.atoms.norms(task.q)
    loss = err * err
    if task.penalty:
        loss = loss + task.penalty * dt * np.einsum("bnm,m->b", W, norms)
    if not want_grad:
        return loss, None
    zeta = task.zeta[rows]
    lam = 2.0 * err
    grad = np.empty_like(W)
    for k in range(task.n_layers - 1, -1, -1):
        X = pos[:, k, 0]
        grad[:, k] = dt * lam[:, None] * resnet_field(X, U, zeta[:, k])
        dpsi = resnet_field_dz(X, U, zeta[:, k])
        lam = lam + dt * average_drift(W[:, k], (dpsi * lam[:, None])[:, :, None])[:, 0]
    if task.penalty:
        grad += task.penalty * dt * norms[None, None, :]
    return loss, grad


def resnet_train(task, nu_init, epochs=500, step=32.0, common=True):
    """Train the control; returns (nu, info) with the loss after each epoch.

    One epoch is one projected-gradient iteration on the full dataset and
    the loss trace never increases. With ``common=False`` every sample gets
    its own control (the per-agent setting); ``nu`` is then a list and the
    trace holds the dataset-mean loss.
    """
    if not nu_init.atoms.same_as(task.atoms):
        raise ValueError("the control must use the task's parameter atoms")
    norms = task.atoms.norms(task.q)
    trace = []
    if common:
        def value(W, idx):
            return np.array([_loss_and_grad(task, w, False)[0] for w in W])

        def value_grad(W, idx):
            out = [_loss_and_grad(task, w, True) for w in W]
            return np.array([o[0] for o in out]), np.stack([o[1] for o in out])

        W0 = nu_init.weights[None]
    else:
        def value(W, idx):
            return _per_sample(task, W, idx, False)[0]

        def value_grad(W, idx):
            return _per_sample(task, W, idx, True)

        W0 = np.repeat(nu_init.weights[None], task.xi.size, axis=0)
    W, _, diag = projected_descent(W0, value, value_grad, task.dt, norms, task.atoms.origin, task.budget,
                                   step, epochs, tol=0.0, trace=trace)
    controls = [RelaxedControl(w, task.atoms, task.horizon) for w in W]
    losses = [float(np.mean(c)) for c in trace]
    if common:
        return controls[0], {"loss": losses, "epochs": diag["iterations"], "moment": moment(controls[0], task.q)}
    return controls, {"loss": losses, "epochs": diag["iterations"],
                      "moment": max(moment(c, task.q) for c in controls)}
