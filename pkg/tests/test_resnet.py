import numpy as np
import pytest

from relaxmfc.control import ControlAtoms, RelaxedControl
from relaxmfc.dynamics import FlowMeasure, NonFiniteError, integrate_path
from relaxmfc.measures import AtomicMeasure
from relaxmfc.problem import builtin
from relaxmfc.resnet import (ResNetTask, _loss_and_grad, resnet_forward, resnet_gradient, resnet_loss, resnet_train,
                             toy_regression)

ZERO_AND_ONE = ControlAtoms(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0]]))


def _pure(atoms, j, N):
    row = np.zeros(len(atoms))
    row[j] = 1.0
    return RelaxedControl.constant(row, atoms, 1.0, N)


def test_trivial_forwards():
    xi = np.array([0.1, -0.4, 2.0])
    task = ResNetTask(xi, np.full(3, 0.7), xi, ZERO_AND_ONE, 8)
    np.testing.assert_array_equal(resnet_forward(task, _pure(ZERO_AND_ONE, 0, 8)), xi)
    np.testing.assert_array_equal(resnet_forward(task, _pure(ZERO_AND_ONE, 2, 8)), xi)
    np.testing.assert_allclose(resnet_forward(task, _pure(ZERO_AND_ONE, 1, 8)), xi + np.tanh(0.7), atol=1e-14)
    assert resnet_loss(task, _pure(ZERO_AND_ONE, 0, 8)) == 0.0
    np.testing.assert_allclose(resnet_forward(task, _pure(ZERO_AND_ONE, 1, 8), sample=[2]), [2.0 + np.tanh(0.7)])


def test_identity_task_trains_to_zero_immediately():
    xi = np.linspace(-1, 1, 5)
    task = ResNetTask(xi, np.zeros(5), xi, ZERO_AND_ONE, 4)
    nu, info = resnet_train(task, _pure(ZERO_AND_ONE, 0, 4), epochs=10)
    assert info["loss"][0] == 0.0 and info["loss"][-1] == 0.0


def test_task_validation():
    with pytest.raises(ValueError):
        ResNetTask([], [], [], ZERO_AND_ONE, 4)
    with pytest.raises(ValueError):
        ResNetTask([0.0, 1.0], [0.0, 1.0], [0.0], ZERO_AND_ONE, 4)
    with pytest.raises(ValueError):
        ResNetTask([0.0], np.zeros((1, 3)), [0.0], ZERO_AND_ONE, 4)
    with pytest.raises(ValueError, match="triples"):
        ResNetTask([0.0], [0.0], [0.0], ControlAtoms(np.array([[0.0], [1.0]])), 4)
    task = ResNetTask([0.0], [0.0], [0.0], ZERO_AND_ONE, 4)
    with pytest.raises(ValueError):
        resnet_forward(task, _pure(ZERO_AND_ONE, 0, 5))
    with pytest.raises(ValueError):
        resnet_forward(task, RelaxedControl.null(builtin("resnet-1d").atoms, 1.0, 4))


def test_nonfinite_activation_names_layer():
    atoms = ControlAtoms(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 1.0]]))
    zeta = np.zeros((1, 4))
    zeta[0, 2] = np.nan
    task = ResNetTask([0.0], zeta, [0.0], atoms, 4)
    with pytest.raises(NonFiniteError, match="step 2"):
        resnet_forward(task, _pure(atoms, 1, 4))


def test_forward_agrees_with_integrate_path():
    spec = builtin("resnet-1d", zeta=0.4)
    rng = np.random.default_rng(0)
    xi = rng.uniform(-1, 1, 6)
    task = ResNetTask(xi, np.full(6, 0.4), np.zeros(6), spec.atoms, 12)
    w = rng.dirichlet(np.ones(len(spec.atoms)), size=12)
    nu = RelaxedControl(w, spec.atoms, 1.0)
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.0]), 12, 1.0)
    out = resnet_forward(task, nu)
    ref = np.array([integrate_path([x], nu, m, spec).positions[-1, 0] for x in xi])
    np.testing.assert_array_equal(out, ref)


def test_common_gradient_matches_fd():
    task = toy_regression(samples=16, layers=8, seed=2)
    task = ResNetTask(task.xi, task.zeta, task.targets, task.atoms, task.n_layers, penalty=1e-3)
    rng = np.random.default_rng(1)
    nu = RelaxedControl(rng.dirichlet(np.ones(len(task.atoms)), size=8), task.atoms, 1.0)
    _, g = resnet_gradient(task, nu)
    h = 1e-6
    fd = np.empty_like(g)
    for k in range(8):
        for j in range(len(task.atoms)):
            wp, wm = nu.weights.copy(), nu.weights.copy()
            wp[k, j] += h
            wm[k, j] -= h
            fd[k, j] = (_loss_and_grad(task, wp, False)[0] - _loss_and_grad(task, wm, False)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_training_trace_non_increasing():
    task = toy_regression(samples=32, layers=8, seed=0)
    nu0 = RelaxedControl.null(task.atoms, 1.0, 8)
    nu, info = resnet_train(task, nu0, epochs=60)
    L = np.array(info["loss"])
    assert np.all(np.diff(L) <= 0.0)
    assert L[-1] < 0.5 * L[0]
    assert resnet_loss(task, nu) == pytest.approx(L[-1])


def test_per_sample_mode():
    task = toy_regression(samples=8, layers=8, seed=0)
    nus, info = resnet_train(task, RelaxedControl.null(task.atoms, 1.0, 8), epochs=40, common=False)
    assert len(nus) == 8
    assert info["loss"][-1] <= info["loss"][0]
