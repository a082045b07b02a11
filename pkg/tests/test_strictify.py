import numpy as np
import pytest

from relaxmfc.control import RelaxedControl
from relaxmfc.cost import ensemble_cost
from relaxmfc.dynamics import FlowMeasure, empirical_flow, flow_ensemble
from relaxmfc.measures import AtomicMeasure
from relaxmfc.problem import builtin
from relaxmfc.solver import best_response_measure, null_ensemble
from relaxmfc.strictify import (NonConvexityError, barycentric_selection, convexity_probe, feedback_from,
                                lift_to_joint, replay_feedback, strict_equilibrium_from)


def _pair_row(spec, u1, u2, lam):
    row = np.zeros(len(spec.atoms))
    row[spec.atoms.index_of([u1])] += lam
    row[spec.atoms.index_of([u2])] += 1.0 - lam
    return row


@pytest.fixture
def dw_anchor():
    """Relaxed equilibrium at the double-well anchor: half mass on -1 and +1."""
    spec = builtin("double-well")
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.5]), 16, 1.0)
    mu = RelaxedControl.constant(_pair_row(spec, -1.0, 1.0, 0.5), spec.atoms, 1.0, 16)
    return spec, m, flow_ensemble([(np.array([0.5]), mu, 1.0)], m, spec)


def test_lift_to_joint_mass_and_marginal():
    spec = builtin("linear-quadratic")
    m0 = AtomicMeasure(np.array([[0.2], [0.6]]), [0.25, 0.75])
    P = null_ensemble(m0, spec, 4)
    eta = lift_to_joint(P)
    assert eta.mass == pytest.approx(1.0)
    assert eta.control_marginal()[spec.atoms.origin] == pytest.approx(1.0)


def test_feedback_replay_of_pure_ensemble_is_exact():
    spec = builtin("linear-quadratic")
    m0 = AtomicMeasure(np.array([[0.1], [0.6]]), [0.5, 0.5])
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.35]), 8, 1.0)
    P = best_response_measure(m, m0, spec, iters=100)
    Ph = replay_feedback(feedback_from(P, x_bins=256), m0, m, spec)
    assert ensemble_cost(m, Ph, spec) == pytest.approx(ensemble_cost(m, P, spec), abs=1e-12)


def test_selection_convex_lq():
    spec = builtin("linear-quadratic")
    nu = AtomicMeasure.dirac([0.3])
    q = _pair_row(spec, -0.5, 1.0, 0.5)
    sel = barycentric_selection(q, spec, nu, [0.4])
    assert sel.ok
    assert sel.alpha[0] == pytest.approx(0.25)
    assert sel.f_match <= 1e-12 and sel.z1 <= 0.0 and sel.z2 <= 0.0
    pure = barycentric_selection(np.eye(len(spec.atoms))[2], spec, nu, [0.4])
    assert pure.ok and pure.alpha[0] == spec.atoms.points[2, 0]


def test_selection_double_well_witness():
    spec = builtin("double-well")
    sel = barycentric_selection(_pair_row(spec, -1.0, 1.0, 0.5), spec, AtomicMeasure.dirac([0.5]), [0.5])
    assert not sel.ok
    w = sel.witness
    assert w["reason"] == "L-slack"
    assert (w["u1"], w["u2"], w["lam"]) == ([-1.0], [1.0], 0.5)
    assert sel.z1 == pytest.approx(1.0)


def test_convexity_probe():
    lq = builtin("linear-quadratic")
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.5]), 4, 1.0)
    assert convexity_probe(lq, m, 0.0, [0.5], pairs=8)["passed"]
    rep = convexity_probe(builtin("double-well"), m, 0.0, [0.5], pairs=8)
    assert not rep["passed"] and rep["failures"]
    assert rep["witness"]["lam"] == 0.5
    with pytest.raises(ValueError):
        convexity_probe(lq, m, 0.0, [0.5], pairs=0)


def test_strict_double_well_aborts(dw_anchor):
    spec, m, P = dw_anchor
    assert ensemble_cost(m, P, spec) == 0.0
    with pytest.raises(NonConvexityError) as err:
        strict_equilibrium_from(P, spec)
    w = err.value.witness
    assert (w["u1"], w["u2"], w["lam"]) == ([-1.0], [1.0], 0.5)
    assert w["t_bin"] == 0 and w["x_bin"] == 16


def test_strict_lq_small():
    spec = builtin("linear-quadratic")
    m0 = AtomicMeasure(np.array([[0.3], [0.35], [0.6]]), [0.3, 0.3, 0.4])
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.45]), 8, 1.0)
    P = best_response_measure(m, m0, spec, iters=200)
    P = flow_ensemble([(x, mu, w) for x, mu, w in zip(m0.support, P.controls, P.weights)], empirical_flow(P), spec)
    res = strict_equilibrium_from(P, spec, x_bins=64)
    s = res.summary()
    assert s["max_z1"] <= 1e-9 and s["max_z2"] <= 1e-9 and s["max_f_match"] <= 1e-8
    assert s["max_budget"] <= spec.R + 1e-6
    # every strict control is pure
    assert all(np.all(np.isin(c.weights, (0.0, 1.0))) for c in res.ensemble.controls)
    assert len(res.report_rows()) == res.cells.size


def test_strict_rejects_foreign_atoms(dw_anchor):
    _, _, P = dw_anchor
    with pytest.raises(ValueError):
        strict_equilibrium_from(P, builtin("linear-quadratic"))
