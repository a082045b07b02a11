import numpy as np
import pytest

from relaxmfc.measures import AtomicMeasure
from relaxmfc.problem import (BUILTINS, ProblemSpec, builtin, derive_constants, load_spec, parse_spec_text,
                              validate_assumptions)


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_pass_their_declared_constants(name):
    rep = validate_assumptions(builtin(name), samples=500, seed=1)
    assert rep.passed, rep.violations
    d = rep.to_dict()
    assert d["samples"] == 500 and d["violations"] == []


def test_derive_constants_formula():
    s = builtin("linear-quadratic")
    c = derive_constants(s)
    p, q, T, C, R = s.p, s.q, s.T, s.C, s.R
    K = (2 ** (q / p - 1) * T * C ** (q / p) + 2 ** (q / p - 1) * C ** (q / p) * R) ** (p / q)
    assert c["K"] == pytest.approx(K)
    assert c["r"] == pytest.approx(q / (q - p)) == s.r
    assert c["moment_p_bound"] == pytest.approx(R ** (p / q) * T ** (1 / c["r"]))


def test_spec_validation():
    with pytest.raises(ValueError):
        builtin("linear-quadratic", p=2.0, q=2.0)
    with pytest.raises(ValueError):
        builtin("linear-quadratic", R=0.0)
    with pytest.raises(ValueError):
        builtin("linear-quadratic", box_lo=(0.5,), box_hi=(1.0,))
    with pytest.raises(ValueError, match="unknown builtin"):
        builtin("nope")


def test_atoms_include_origin():
    for name in BUILTINS:
        s = builtin(name)
        assert np.all(s.atoms.points[s.atoms.origin] == 0.0)


def test_lq_coupling_is_distance_to_flow():
    s = builtin("linear-quadratic", coupling=2.0)
    nu = AtomicMeasure(np.array([[0.7], [0.8]]), [0.5, 0.5])
    x = np.array([[0.9]])
    U = np.array([[0.5]])
    # d1(delta_0.9, nu) = 0.5 * 0.2 + 0.5 * 0.1, both offsets positive
    assert s.L(x, U, nu)[0, 0] == pytest.approx(0.25 + 2.0 * 0.15)
    assert s.grad_L(x, U, nu)[0, 0, 0] == pytest.approx(2.0)
    # opposite offsets cancel
    nu2 = AtomicMeasure(np.array([[0.8], [0.0]]), [0.5, 0.5])
    assert s.grad_L(x, U, nu2)[0, 0, 0] == pytest.approx(0.0)


def test_double_well_control_cost():
    s = builtin("double-well")
    nu = AtomicMeasure.dirac([0.5])
    U = np.array([[-1.0], [0.0], [1.0]])
    np.testing.assert_allclose(s.L(np.array([[0.5]]), U, nu)[0], [0.0, 1.0, 0.0], atol=1e-15)


def test_parse_spec_builtin_and_expression(tmp_path):
    s = parse_spec_text("problem = crowd-aversion\nbudget = 1.5  # tighter\n")
    assert s.name == "crowd-aversion" and s.R == 1.5
    e = parse_spec_text("f = u\nL = u**2 + sin(2*pi*x)**2\nq = 3\n")
    assert e.name == "expression" and e.q == 3.0
    nu = AtomicMeasure.dirac([0.0])
    out = e.L(np.array([[0.25]]), np.array([[0.5]]), nu)
    assert out[0, 0] == pytest.approx(1.25)
    assert e.f(np.array([[0.1]]), np.array([[0.5], [-1.0]]), nu).shape == (1, 2, 1)
    path = tmp_path / "lq.spec"
    path.write_text("problem = linear-quadratic\n")
    assert load_spec(str(path)).name == "linear-quadratic"
    assert load_spec("builtin:zero").name == "zero"


def test_parse_spec_errors():
    with pytest.raises(ValueError, match="valid keys"):
        parse_spec_text("colour = blue\n")
    with pytest.raises(ValueError, match="expected key"):
        parse_spec_text("just text\n")
    with pytest.raises(ValueError, match="unknown name"):
        parse_spec_text("f = __import__('os')\nL = u\n")
    with pytest.raises(ValueError):
        parse_spec_text("f = u\n")
    with pytest.raises(ValueError):
        parse_spec_text("f = u\nL = u\ndim = 2\n")


def test_validate_detects_understated_constant():
    s = builtin("linear-quadratic").replace(C2=0.1)
    rep = validate_assumptions(s, samples=300)
    assert not rep.passed
    assert rep.violations


def test_describe_is_json_friendly():
    import json
    out = json.dumps(builtin("resnet-1d").describe())
    assert "resnet-1d" in out
    assert isinstance(builtin("zero"), ProblemSpec)
