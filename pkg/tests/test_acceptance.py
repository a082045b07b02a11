"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal.

Reference values marked "frozen" were recorded on the first successful run
and are kept as seeded regressions.
"""

import os
import time

import numpy as np
import pytest

from relaxmfc import jsonio
from relaxmfc.cli import bounds_suite, initial_measure, run_experiment, strip_volatile
from relaxmfc.control import RelaxedControl, moment, random_control
from relaxmfc.cost import ensemble_cost
from relaxmfc.dynamics import FlowMeasure, empirical_flow, flow_ensemble, integrate_path
from relaxmfc.measures import AtomicMeasure, w1_circle, w1_lp
from relaxmfc.problem import builtin, random_measure
from relaxmfc.resnet import ResNetTask, resnet_forward, resnet_train, toy_regression
from relaxmfc.solver import (best_response_dp, best_response_grad, best_response_measure, certify, control_costs,
                             fixed_point_iterate, null_ensemble, reduced_gradient)
from relaxmfc.strictify import NonConvexityError, feedback_from, replay_feedback, strict_equilibrium_from

# frozen from the first successful runs
DW_PURE_DP_COST = 4.867145332250789e-4
CROWD_GAPS = {"optimality_gap": 7.135650753539724e-07, "consistency_gap": 4.400688771591071e-04, "iterations": 4}
TOY_LOSS_RATIO = 2.603451629263847e-03


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def test_c01_w1_oracle(report):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        a = random_measure(rng, 1, max_atoms=8)
        b = random_measure(rng, 1, max_atoms=8)
        lp, cf = w1_lp(a, b), w1_circle(a, b)
        worst = max(worst, abs(lp - cf) / max(lp, 1e-300) if lp > 0 else abs(cf))
    dt = time.perf_counter() - t0
    report(1, worst <= 1e-9 and dt < 5.0, f"200 pairs, max rel err {worst:.2e} (<= 1e-9), {dt:.2f} s (< 5 s)")


@pytest.mark.parametrize("name", ["linear-quadratic", "double-well"])
def test_c02_velocity_and_moment_bounds(report, name):
    b = bounds_suite(builtin(name), samples=1000, seed=2, ensembles=0)
    v, m = b["velocity_budget"], b["moment_p"]
    report(2, v["violations"] == 0 and m["violations"] == 0,
           f"{name}: 1000 samples, budget <= K violations {v['violations']} (worst ratio {v['worst_ratio']:.3f}), "
           f"p-moment violations {m['violations']} (worst ratio {m['worst_ratio']:.3f})")


def test_c03_holder(report):
    b = bounds_suite(builtin("linear-quadratic"), samples=0, seed=3, ensembles=100)["holder"]
    report(3, b["passed"] and b["ensembles"] == 100,
           f"100 ensembles, worst Hoelder ratio {b['worst_ratio']:.3f} (<= 1 + 1e-6)")


def test_c04_adjoint_fd(report):
    worst = 0.0
    N, h = 16, 1e-6
    for name in ("linear-quadratic", "double-well"):
        spec = builtin(name)
        U = spec.atoms.points
        M = U.shape[0]
        E = np.eye(N * M).reshape(N * M, N, M)
        rng = np.random.default_rng(4)
        for _ in range(20):
            m = FlowMeasure(tuple(random_measure(rng, 1) for _ in range(N + 1)), spec.T)
            mu = random_control(rng, spec.atoms, spec.T, N, spec.R, spec.q, max_support=M)
            x0 = rng.random((1, 1))
            W = mu.weights[None]
            _, g = reduced_gradient(spec, m, U, x0, W)
            xs = np.repeat(x0, N * M, axis=0)
            fd = (control_costs(spec, m, U, xs, W + h * E) - control_costs(spec, m, U, xs, W - h * E)) / (2 * h)
            worst = max(worst, np.linalg.norm(g[0].ravel() - fd) / np.linalg.norm(fd))
    report(4, worst <= 1e-4, f"40 points, max relative error {worst:.2e} (<= 1e-4)")


def test_c05_grad_vs_dp(report):
    names = ["linear-quadratic", "double-well", "crowd-aversion"]
    worst, active = 0.0, False
    for seed in range(10):
        spec = builtin(names[seed % 3])
        rng = np.random.default_rng(seed)
        m0 = AtomicMeasure(rng.random((3, 1)), rng.dirichlet(np.ones(3)))
        m = empirical_flow(null_ensemble(m0, spec, 32))
        x0 = rng.random(1)
        g = best_response_grad(x0, m, spec, multistart=True)
        d = best_response_dp(x0, m, spec, x_grid=256, simplex_lattice=8)
        active |= d.diagnostics["budget_active"]
        worst = max(worst, (g.cost - d.cost) / abs(d.cost))
    report(5, worst <= 0.02 and not active,
           f"10 instances, max (J_grad - J_dp)/|J_dp| = {worst:.2e} (<= 2%), budget slack in all")


def test_c06_relaxation_gap(report):
    spec = builtin("double-well")
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.5]), 32, spec.T)
    relaxed = best_response_grad(np.array([0.5]), m, spec).cost
    pure = best_response_dp(np.array([0.5]), m, spec, x_grid=128, simplex_lattice=1).cost
    ok = relaxed <= 0.1 * pure and pure == pytest.approx(DW_PURE_DP_COST, rel=1e-9)
    report(6, ok, f"relaxed {relaxed:.3e} <= 0.1 x pure-atom DP {pure:.4e} (frozen {DW_PURE_DP_COST:.4e})")


def test_c07_cost_preservation(report):
    spec = builtin("linear-quadratic")
    n = 512
    x = np.random.default_rng(0).random(n)
    m0 = AtomicMeasure(x[:, None], np.full(n, 1.0 / n))
    bins = [16, 32, 64, 128]
    errs, budget = [], 0.0
    for c in (0.3, 0.45, 0.6833, 0.91):
        m = FlowMeasure.constant(AtomicMeasure.dirac([c]), 32, spec.T)
        P = best_response_measure(m, m0, spec, iters=300)
        J = ensemble_cost(m, P, spec)
        row = []
        for xb in bins:
            Ph = replay_feedback(feedback_from(P, x_bins=xb), m0, m, spec)
            row.append(abs(ensemble_cost(m, Ph, spec) - J))
            budget = max(budget, max(moment(mu, spec.q) for mu in Ph.controls))
        errs.append(row)
    mean = np.mean(errs, axis=0)
    ratio = (mean[0] / mean[-1]) ** (1.0 / (len(bins) - 1))
    ok = 1.5 <= ratio <= 2.5 and budget <= spec.R + 1e-6
    report(7, ok, f"mean |dJ| over x-bins {bins}: {np.array2string(mean, precision=2)}, "
                  f"geometric-mean halving ratio {ratio:.2f} (in [1.5, 2.5]), max budget {budget:.3f} <= R={spec.R}")


def test_c08_strict_pipeline_lq(report):
    spec = builtin("linear-quadratic")
    n = 32
    rng = np.random.default_rng(0)
    x = (np.where(np.arange(n) % 2 == 0, 0.3, 0.6) + 0.05 * rng.standard_normal(n)) % 1
    m0 = AtomicMeasure(x[:, None], np.full(n, 1.0 / n))
    res = fixed_point_iterate(spec, m0, damping=0.5, max_iters=60, tol=1e-4, n_steps=32, iters=300)
    cert = certify(res.ensemble, spec, 1e-3, m0=m0, iters=300)
    s = strict_equilibrium_from(res.ensemble, spec, x_bins=256).summary()
    ok = (res.converged and cert["passed"] and s["max_z1"] <= 1e-9 and s["max_z2"] <= 1e-9
          and s["max_f_match"] <= 1e-8 and s["cost_strict"] <= s["cost_relaxed"] + 1e-6)
    report(8, ok, f"linear-quadratic: all visited cells selected, max z1 {s['max_z1']:.1e}, z2 {s['max_z2']:.1e}, "
                  f"f_match {s['max_f_match']:.1e}; J(m,P0) {s['cost_strict']:.6f} <= J(m,P) {s['cost_relaxed']:.6f}")


def test_c08_strict_pipeline_double_well(report):
    spec = builtin("double-well")
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.5]), 32, spec.T)
    row = np.zeros(len(spec.atoms))
    row[[spec.atoms.index_of([-1.0]), spec.atoms.index_of([1.0])]] = 0.5
    mu = RelaxedControl.constant(row, spec.atoms, spec.T, 32)
    P = flow_ensemble([(np.array([0.5]), mu, 1.0)], m, spec)
    cert = certify(P, spec, 1e-9, m0=AtomicMeasure.dirac([0.5]))
    try:
        strict_equilibrium_from(P, spec)
        w = None
    except NonConvexityError as err:
        w = err.witness
    ok = cert["passed"] and w is not None and (w["u1"], w["u2"], w["lam"]) == ([-1.0], [1.0], 0.5)
    report(8, ok, f"double-well: certified relaxed equilibrium aborts with witness "
                  f"u1={w and w['u1']}, u2={w and w['u2']}, lambda={w and w['lam']} ({w and w['reason']})")


def test_c09_fixed_point(report):
    z = builtin("zero")
    rz = fixed_point_iterate(z, initial_measure(z, 16, 0), n_steps=16, tol=0.0, max_iters=5)
    dec = builtin("linear-quadratic", coupling=0.0).replace(
        g=lambda x: np.sin(np.pi * (x[:, 0] - 0.3)) ** 2,
        dgdx=lambda x: (np.pi * np.sin(2 * np.pi * (x[:, 0] - 0.3)))[:, None])
    rd = fixed_point_iterate(dec, initial_measure(dec, 4, 0), n_steps=8, tol=0.0, max_iters=5, iters=500)
    trivial = all(r.iterations <= 1 and r.optimality_gap == 0.0 and r.consistency_gap == 0.0 for r in (rz, rd))
    spec = builtin("crowd-aversion")
    r = fixed_point_iterate(spec, initial_measure(spec, 64, 0), damping=0.5, max_iters=200, tol=1e-3, n_steps=32,
                            iters=200)
    frozen = (r.iterations == CROWD_GAPS["iterations"]
              and r.optimality_gap == pytest.approx(CROWD_GAPS["optimality_gap"], rel=1e-6, abs=1e-12)
              and r.consistency_gap == pytest.approx(CROWD_GAPS["consistency_gap"], rel=1e-6))
    ok = trivial and r.converged and r.optimality_gap <= 1e-3 and r.consistency_gap <= 1e-3 and frozen
    report(9, ok, f"zero/decoupled gaps 0 after {rz.iterations}/{rd.iterations} iteration(s); crowd-aversion "
                  f"opt {r.optimality_gap:.2e}, cons {r.consistency_gap:.2e} after {r.iterations} iterations")


def test_c10_resnet(report):
    task = toy_regression(samples=64, layers=16, seed=0)
    nu, info = resnet_train(task, RelaxedControl.null(task.atoms, task.horizon, task.n_layers), epochs=500)
    ratio = info["loss"][-1] / info["loss"][0]
    spec = builtin("resnet-1d", zeta=0.3)
    rng = np.random.default_rng(10)
    xi = rng.uniform(-1, 1, 8)
    eq = ResNetTask(xi, np.full(8, 0.3), np.zeros(8), spec.atoms, 16)
    mu = RelaxedControl(rng.dirichlet(np.ones(len(spec.atoms)), size=16), spec.atoms, spec.T)
    m = FlowMeasure.constant(AtomicMeasure.dirac([0.0]), 16, spec.T)
    ref = np.array([integrate_path([v], mu, m, spec).positions[-1, 0] for v in xi])
    exact = bool(np.array_equal(resnet_forward(eq, mu), ref))
    ok = ratio <= 0.1 and exact and ratio == pytest.approx(TOY_LOSS_RATIO, rel=1e-6)
    report(10, ok, f"toy loss ratio {ratio:.4f} after {info['epochs']} epochs (<= 0.10, frozen {TOY_LOSS_RATIO:.4f}); "
                   f"resnet_forward == integrate_path exactly: {exact}")


def test_c11_determinism(report, tmp_path):
    cfg = {"command": "solve", "spec": "builtin:crowd-aversion", "particles": 16, "steps": 16, "seed": 3,
           "tol": 1e-4, "iters": 100}
    a = run_experiment(dict(cfg, out=str(tmp_path / "a")))
    b = run_experiment(dict(cfg, out=str(tmp_path / "b")))
    ta = jsonio.dumps(strip_volatile(jsonio.load(os.path.join(a["output_dir"], "manifest.json"))))
    tb = jsonio.dumps(strip_volatile(jsonio.load(os.path.join(b["output_dir"], "manifest.json"))))
    same_art = all(open(os.path.join(a["output_dir"], v["path"]), "rb").read()
                   == open(os.path.join(b["output_dir"], v["path"]), "rb").read() for v in a["artifacts"].values())
    report(11, ta == tb and same_art, f"identical config+seed: manifests byte-identical modulo timings: {ta == tb}, "
                                      f"artifacts identical: {same_art} (suite runtime is checked at session end)")
