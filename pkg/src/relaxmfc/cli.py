"""Command line front end and run manifests.

Every run is described by a flat config dict. The output directory is
``<out>/<command>-<hash>`` where the hash covers the config (minus ``out``)
and the spec echo, so identical inputs land in the same place. Wall-clock
timings live in the manifest's ``timings`` field, which is excluded from
the manifest's ``reproducibility_hash``.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, jsonio
from .control import RelaxedControl, moment, random_control
from .dynamics import (FlowMeasure, PathEnsemble, check_holder, empirical_flow, flow_ensemble, integrate_batch,
                       support_residual, velocity_budget)
from .kernels import BACKEND
from .measures import AtomicMeasure, normalize
from .problem import derive_constants, load_spec, random_measure, validate_assumptions
from .resnet import resnet_train, toy_regression
from .solver import best_response_dp, best_response_grad, certify, fixed_point_iterate, null_ensemble
from .strictify import NonConvexityError, strict_equilibrium_from

SCHEMA_VERSION = 1
BUDGET_TOL = 1e-6

_COMMON = {"command", "out", "seed"}
_SPEC = {"spec", "particles", "steps", "init", "spread"}
_BR = {"method", "iters", "step", "multistart", "x_grid", "lattice"}
VALID_KEYS = {
    "simulate": _COMMON | _SPEC | {"u"},
    "best-response": _COMMON | _SPEC | _BR | {"x0"},
    "solve": _COMMON | _SPEC | _BR | {"damping", "tol", "max_iters"},
    "certify": _COMMON | {"run", "tol"},
    "strictify": _COMMON | {"run", "t_bins", "x_bins", "tol"},
    "resnet-train": _COMMON | {"samples", "layers", "epochs", "step", "common_control"},
    "check": _COMMON | {"spec", "samples", "steps"},
}
DEFAULTS = {
    "seed": 0, "spec": "builtin:linear-quadratic", "particles": 64, "steps": 32, "init": "normal", "spread": 0.1,
    "method": "grad", "iters": 300, "step": 32.0, "multistart": False, "x_grid": 128, "lattice": 4,
    "damping": 0.5, "tol": 1e-3, "max_iters": 200, "u": None, "x0": None, "t_bins": None, "x_bins": 32,
    "samples": 64, "layers": 16, "epochs": 500, "common_control": True,
}


class UsageError(ValueError):
    pass


class CertificationFailure(RuntimeError):
    def __init__(self, failed, manifest):
        self.failed = failed
        self.manifest = manifest
        super().__init__("violated invariants: " + ", ".join(failed))


# -- config and files ---------------------------------------------------------

def complete_config(config):
    """Check keys against the command and fill in defaults."""
    cmd = config.get("command")
    if cmd not in VALID_KEYS:
        raise UsageError(f"unknown subcommand {cmd!r}; valid: {', '.join(VALID_KEYS)}")
    bad = sorted(set(config) - VALID_KEYS[cmd])
    if bad:
        raise UsageError(f"unknown key(s) {', '.join(bad)} for {cmd}; valid keys: {', '.join(sorted(VALID_KEYS[cmd]))}")
    out = {k: DEFAULTS[k] for k in VALID_KEYS[cmd] if k in DEFAULTS}
    out.update({k: v for k, v in config.items() if v is not None})
    out.setdefault("out", "runs")
    if cmd in ("certify", "strictify") and "run" not in out:
        raise UsageError(f"{cmd} needs run=PATH")
    return out


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _f(x):
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_f(v) if isinstance(v, (float, np.floating)) else v for v in row])


def paths_rows(P):
    """One row per (particle, node): particle, node, t, weight, x_0..x_{d-1}."""
    rows = []
    for i, (w, path) in enumerate(zip(P.weights, P.paths)):
        for k, (t, x) in enumerate(zip(path.times, path.positions)):
            rows.append([i, k, float(t), float(w)] + [float(v) for v in x])
    return rows


def flow_rows(m):
    rows = []
    for k, t in enumerate(m.times):
        nu = m[k]
        for a, (x, w) in enumerate(zip(nu.support, nu.weights)):
            rows.append([k, float(t), a, float(w)] + [float(v) for v in x])
    return rows


class _Run:
    """Collects artifacts, results and timings for one output directory."""

    def __init__(self, config, spec_echo):
        self.config = config
        key = {k: v for k, v in config.items() if k != "out"}
        self.config_hash = _digest({"config": key, "spec": spec_echo})[:16]
        self.dir = os.path.join(config["out"], f"{config['command']}-{self.config_hash}")
        os.makedirs(self.dir, exist_ok=True)
        self.artifacts = {}
        self.timings = {}
        self._t = time.perf_counter()

    def lap(self, stage):
        now = time.perf_counter()
        self.timings[stage] = now - self._t
        self._t = now

    def json(self, name, obj):
        path = os.path.join(self.dir, name)
        jsonio.dump(obj, path)
        self.artifacts[name.rsplit(".", 1)[0]] = name

    def csv(self, name, header, rows):
        _write_csv(os.path.join(self.dir, name), header, rows)
        self.artifacts[name.rsplit(".", 1)[0]] = name

    def finish(self, body):
        arts = {k: {"path": v, "sha256": _file_digest(os.path.join(self.dir, v))} for k, v in self.artifacts.items()}
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "kernel_backend": BACKEND,
            "command": self.config["command"],
            "config": {k: v for k, v in self.config.items() if k != "out"},
            "config_hash": self.config_hash,
        }
        manifest.update(body)
        manifest["artifacts"] = arts
        manifest["reproducibility_hash"] = _digest(json.loads(jsonio.dumps(manifest)))
        manifest["timings"] = self.timings
        manifest["output_dir"] = self.dir
        jsonio.dump(manifest, os.path.join(self.dir, "manifest.json"))
        return manifest


def strip_volatile(manifest):
    """Manifest without the fields allowed to differ between reruns."""
    return {k: v for k, v in manifest.items() if k not in ("timings", "output_dir")}


def initial_measure(spec, particles, seed, init="normal", spread=0.1):
    """Seeded equal-weight particles: wrapped normal around 1/2 or uniform."""
    if particles < 1:
        raise UsageError("particles must be >= 1")
    rng = np.random.default_rng(seed)
    if init == "normal":
        x = 0.5 + spread * rng.standard_normal((particles, spec.d))
    elif init == "uniform":
        x = rng.random((particles, spec.d))
    else:
        raise UsageError(f"unknown init {init!r}; valid: normal, uniform")
    x = normalize(x) if spec.wrap else x
    return AtomicMeasure(x, np.full(particles, 1.0 / particles))


def _spec_body(spec, config):
    return {"spec": spec.describe(), "constants": derive_constants(spec), "seeds": {"seed": config["seed"]}}


def _br_kw(config):
    if config["method"] == "dp":
        return {"x_grid": config["x_grid"], "simplex_lattice": config["lattice"]}
    if config["method"] == "grad":
        return {"iters": config["iters"], "step": config["step"], "multistart": config["multistart"]}
    raise UsageError(f"unknown method {config['method']!r}; valid: grad, dp")


def _load_run(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise UsageError(f"no manifest.json in {path}")
    return jsonio.load(mpath)


# -- subcommands ----------------------------------------------------------------

def _interacting_positions(spec, m0, mu, n_steps):
    """Particle system whose drift sees the current empirical measure."""
    x0 = m0.support
    W = np.broadcast_to(mu.weights, (x0.shape[0],) + mu.weights.shape)
    U = spec.atoms.points

    def field(k, X):
        return spec.f(X, U, AtomicMeasure(normalize(X) if spec.wrap else X, m0.weights).merged())

    pos, _ = integrate_batch(x0, W, field, spec.T / n_steps, wrap=spec.wrap)
    return pos


def cmd_simulate(config):
    spec = load_spec(config["spec"])
    run = _Run(config, spec.describe())
    N = config["steps"]
    m0 = initial_measure(spec, config["particles"], config["seed"], config["init"], config["spread"])
    if config["u"] is None:
        mu = RelaxedControl.null(spec.atoms, spec.T, N)
    else:
        u = np.atleast_1d(np.asarray(config["u"], dtype=np.float64))
        try:
            j = spec.atoms.index_of(u)
        except ValueError:
            raise UsageError(f"u={u.tolist()} is not a control atom; atoms: {spec.atoms.points.tolist()}") from None
        row = np.zeros(len(spec.atoms))
        row[j] = 1.0
        mu = RelaxedControl.constant(row, spec.atoms, spec.T, N)
    pos = _interacting_positions(spec, m0, mu, N)
    m = FlowMeasure(tuple(AtomicMeasure(pos[:, k], m0.weights).merged() for k in range(N + 1)), spec.T)
    P = flow_ensemble([(x, mu, w) for x, w in zip(m0.support, m0.weights)], m, spec)
    run.lap("simulate")
    xs = [f"x{i}" for i in range(spec.d)]
    run.csv("paths.csv", ["particle", "node", "t", "weight"] + xs, paths_rows(P))
    run.csv("flow.csv", ["node", "t", "atom", "weight"] + xs, flow_rows(empirical_flow(P)))
    run.json("ensemble.json", P.to_dict())
    run.json("flow.json", m.to_dict())
    run.lap("write")
    body = _spec_body(spec, config)
    body["grid"] = {"steps": N, "particles": config["particles"]}
    body["results"] = {
        "support_residual": support_residual(P, m, spec),
        "max_velocity_budget": max(velocity_budget(p, spec) for p in P.paths),
    }
    return run.finish(body)


def cmd_best_response(config):
    spec = load_spec(config["spec"])
    run = _Run(config, spec.describe())
    N = config["steps"]
    m0 = initial_measure(spec, config["particles"], config["seed"], config["init"], config["spread"])
    m = empirical_flow(null_ensemble(m0, spec, N))
    x0 = np.full(spec.d, 0.5) if config["x0"] is None else np.atleast_1d(np.asarray(config["x0"], dtype=np.float64))
    if x0.shape != (spec.d,):
        raise UsageError(f"x0 needs {spec.d} coordinate(s)")
    kw = _br_kw(config)
    run.lap("setup")
    br = best_response_dp(x0, m, spec, **kw) if config["method"] == "dp" else best_response_grad(x0, m, spec, **kw)
    run.lap("best_response")
    P = PathEnsemble((br.path,), (br.control,), np.ones(1))
    run.csv("path.csv", ["particle", "node", "t", "weight"] + [f"x{i}" for i in range(spec.d)], paths_rows(P))
    run.json("control.json", br.control.to_dict())
    run.lap("write")
    body = _spec_body(spec, config)
    body["grid"] = {"steps": N, "particles": config["particles"]}
    diag = {k: v for k, v in br.diagnostics.items() if np.isscalar(v)}
    body["results"] = {"cost": br.cost, "method": br.method, "moment_q": moment(br.control, spec.q),
                       "diagnostics": diag}
    return run.finish(body)


def cmd_solve(config):
    spec = load_spec(config["spec"])
    run = _Run(config, spec.describe())
    N = config["steps"]
    m0 = initial_measure(spec, config["particles"], config["seed"], config["init"], config["spread"])
    res = fixed_point_iterate(spec, m0, config["damping"], config["max_iters"], config["tol"], N,
                              config["method"], **_br_kw(config))
    run.lap("solve")
    keys = ["iteration", "optimality_gap", "consistency_gap", "flow_residual", "cost"]
    run.csv("trace.csv", keys, [[e[k] for k in keys] for e in res.trace])
    run.json("ensemble.json", res.ensemble.to_dict())
    run.json("flow.json", res.flow.to_dict())
    run.json("m0.json", m0.to_dict())
    run.lap("write")
    body = _spec_body(spec, config)
    body["grid"] = {"steps": N, "particles": config["particles"]}
    body["results"] = dict(res.summary(), max_moment_q=max(moment(c, spec.q) for c in res.ensemble.controls))
    return run.finish(body)


def _verify_artifacts(path, manifest):
    bad = []
    for name, art in manifest.get("artifacts", {}).items():
        fp = os.path.join(path, art["path"])
        if not os.path.exists(fp) or _file_digest(fp) != art["sha256"]:
            bad.append(name)
    return bad


def cmd_certify(config):
    src = _load_run(config["run"])
    if src["command"] != "solve":
        raise UsageError("certify needs the directory of a solve run")
    scfg = src["config"]
    spec = load_spec(scfg["spec"])
    tol = config.get("tol", scfg["tol"])
    config = dict(config, tol=tol)
    run = _Run(dict(config, source=src["reproducibility_hash"]), spec.describe())
    tampered = _verify_artifacts(config["run"], src)
    P = PathEnsemble.from_dict(jsonio.load(os.path.join(config["run"], "ensemble.json")))
    m0 = AtomicMeasure.from_dict(jsonio.load(os.path.join(config["run"], "m0.json")))
    report = certify(P, spec, tol, m0=m0, method=scfg["method"], **_br_kw(dict(DEFAULTS, **scfg)))
    budget = max(moment(c, spec.q) for c in P.controls) - spec.R
    report["budget_excess"] = budget
    failed = list(report["failed"])
    if budget > BUDGET_TOL:
        failed.append("budget")
    if tampered:
        failed.insert(0, "artifact_digest")
    report["tampered_artifacts"] = tampered
    report["failed"] = failed
    report["passed"] = not failed
    run.lap("certify")
    run.json("certificate.json", report)
    body = _spec_body(spec, scfg)
    body["source_run"] = src["reproducibility_hash"]
    body["results"] = report
    manifest = run.finish(body)
    if failed:
        raise CertificationFailure(failed, manifest)
    return manifest


def cmd_strictify(config):
    src = _load_run(config["run"])
    if src["command"] != "solve":
        raise UsageError("strictify needs the directory of a solve run")
    scfg = src["config"]
    spec = load_spec(scfg["spec"])
    tol = config.get("tol", BUDGET_TOL)
    run = _Run(dict(config, tol=tol, source=src["reproducibility_hash"]), spec.describe())
    P = PathEnsemble.from_dict(jsonio.load(os.path.join(config["run"], "ensemble.json")))
    body = _spec_body(spec, scfg)
    body["source_run"] = src["reproducibility_hash"]
    body["grid"] = {"t_bins": config["t_bins"] or P.n_steps, "x_bins": config["x_bins"]}
    try:
        res = strict_equilibrium_from(P, spec, config["t_bins"], config["x_bins"])
    except NonConvexityError as err:
        run.lap("strictify")
        body["results"] = {"status": "aborted", "cell": err.cell, "witness": err.witness}
        return run.finish(body)
    run.lap("strictify")
    run.json("feedback.json", res.feedback.to_dict())
    run.csv("selection.csv", ["cell", "alpha", "z1", "z2", "f_match"],
            [[r["cell"], " ".join(_f(a) for a in r["alpha"]), r["z1"], r["z2"], r["f_match"]]
             for r in res.report_rows()])
    run.json("ensemble.json", res.ensemble.to_dict())
    run.lap("write")
    summary = res.summary()
    checks = {
        "cost": summary["cost_strict"] <= summary["cost_relaxed"] + tol,
        "budget": summary["max_budget"] <= spec.R + tol,
    }
    body["results"] = dict(summary, status="ok", checks=checks, passed=all(checks.values()))
    return run.finish(body)


def cmd_resnet_train(config):
    task = toy_regression(config["samples"], config["layers"], config["seed"])
    echo = {"task": "toy-regression", "samples": config["samples"], "layers": config["layers"]}
    run = _Run(config, echo)
    nu0 = RelaxedControl.null(task.atoms, task.horizon, task.n_layers)
    nu, info = resnet_train(task, nu0, config["epochs"], config["step"], common=config["common_control"])
    run.lap("train")
    run.csv("loss.csv", ["epoch", "loss"], [[i, v] for i, v in enumerate(info["loss"])])
    if config["common_control"]:
        run.json("control.json", nu.to_dict())
    else:
        run.json("controls.json", [c.to_dict() for c in nu])
    run.lap("write")
    body = {"task": echo, "seeds": {"seed": config["seed"]}}
    first, last = info["loss"][0], info["loss"][-1]
    body["results"] = {"initial_loss": first, "final_loss": last, "ratio": last / first if first > 0 else 0.0,
                       "epochs": info["epochs"], "moment_q": info["moment"]}
    return run.finish(body)


def bounds_suite(spec, samples=1000, seed=0, n_steps=16, ensembles=None):
    """Sampled a-priori bounds: velocity budget, p-moment and Hoelder regularity."""
    rng = np.random.default_rng(seed)
    const = derive_constants(spec)
    K, r = const["K"], const["r"]
    worst_v = worst_m = 0.0
    viol_v = viol_m = 0
    for _ in range(samples):
        mu = random_control(rng, spec.atoms, spec.T, n_steps, spec.R, spec.q)
        m = FlowMeasure(tuple(random_measure(rng, spec.d) for _ in range(n_steps + 1)), spec.T)
        x0 = rng.random(spec.d) if spec.wrap else rng.uniform(-2.0, 2.0, spec.d)
        P = flow_ensemble([(x0, mu, 1.0)], m, spec)
        v = velocity_budget(P.paths[0], spec)
        mp = moment(mu, spec.p)
        worst_v, worst_m = max(worst_v, v / K), max(worst_m, mp / const["moment_p_bound"])
        viol_v += v > K * (1 + 1e-12)
        viol_m += mp > const["moment_p_bound"] * (1 + 1e-12)
    holder = []
    for _ in range(samples // 10 if ensembles is None else ensembles):
        n = int(rng.integers(1, 6))
        m = FlowMeasure(tuple(random_measure(rng, spec.d) for _ in range(n_steps + 1)), spec.T)
        parts = [(rng.random(spec.d), random_control(rng, spec.atoms, spec.T, n_steps, spec.R, spec.q), w)
                 for w in rng.dirichlet(np.ones(n))]
        holder.append(check_holder(empirical_flow(flow_ensemble(parts, m, spec)), K, r)["max_ratio"])
    worst_h = max(holder) if holder else 0.0
    return {
        "velocity_budget": {"worst_ratio": worst_v, "violations": int(viol_v), "passed": viol_v == 0},
        "moment_p": {"worst_ratio": worst_m, "violations": int(viol_m), "passed": viol_m == 0},
        "holder": {"worst_ratio": worst_h, "ensembles": len(holder), "passed": worst_h <= 1.0 + 1e-6},
    }


def cmd_check(config):
    spec = load_spec(config["spec"])
    run = _Run(config, spec.describe())
    samples = config.get("samples", 1000)
    report = validate_assumptions(spec, samples, config["seed"]).to_dict()
    run.lap("assumptions")
    bounds = bounds_suite(spec, samples, config["seed"], config.get("steps", 16))
    run.lap("bounds")
    run.json("checks.json", {"assumptions": report, "bounds": bounds})
    body = _spec_body(spec, config)
    failed = [k for k, v in bounds.items() if not v["passed"]]
    if not report["passed"]:
        failed.insert(0, "assumptions")
    body["results"] = {"failed": failed, "passed": not failed}
    return run.finish(body)


COMMANDS = {
    "simulate": cmd_simulate,
    "best-response": cmd_best_response,
    "solve": cmd_solve,
    "certify": cmd_certify,
    "strictify": cmd_strictify,
    "resnet-train": cmd_resnet_train,
    "check": cmd_check,
}


def run_experiment(config):
    """Dispatch one config dict; returns the written manifest."""
    config = complete_config(dict(config))
    return COMMANDS[config["command"]](config)


# -- argparse -------------------------------------------------------------------

def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser():
    ap = argparse.ArgumentParser(prog="mfc", description="Relaxed-control mean field control toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="root directory for run folders (default: runs)")
        return p

    def problem(p):
        p.add_argument("--spec", help="builtin:NAME or a spec file")
        p.add_argument("--particles", type=int)
        p.add_argument("--steps", type=int, help="time steps N")
        p.add_argument("--init", choices=["normal", "uniform"])
        p.add_argument("--spread", type=float, help="std of the wrapped-normal initial law")

    def br(p):
        p.add_argument("--method", choices=["grad", "dp"])
        p.add_argument("--iters", type=int, help="projected-gradient iterations")
        p.add_argument("--step", type=float)
        p.add_argument("--multistart", action="store_true", default=None)
        p.add_argument("--x-grid", dest="x_grid", type=int)
        p.add_argument("--lattice", type=int, help="simplex lattice denominator of the DP actions")

    p = common(sub.add_parser("simulate", help="interacting particles under a fixed control"))
    problem(p)
    p.add_argument("--u", type=_floats, help="constant control atom (default: the null control)")
    p = common(sub.add_parser("best-response", help="one agent against the frozen initial flow"))
    problem(p)
    br(p)
    p.add_argument("--x0", type=_floats)
    p = common(sub.add_parser("solve", help="damped fixed-point iteration"))
    problem(p)
    br(p)
    p.add_argument("--damping", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p = common(sub.add_parser("certify", help="re-check a solve run"))
    p.add_argument("--run", required=True)
    p.add_argument("--tol", type=float)
    p = common(sub.add_parser("strictify", help="pure-control equilibrium from a solve run"))
    p.add_argument("--run", required=True)
    p.add_argument("--t-bins", dest="t_bins", type=int)
    p.add_argument("--x-bins", dest="x_bins", type=int)
    p.add_argument("--tol", type=float)
    p = common(sub.add_parser("resnet-train", help="mean-field ResNet toy regression"))
    p.add_argument("--samples", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--common-control", dest="common_control", action=argparse.BooleanOptionalAction)
    p = common(sub.add_parser("check", help="sampled assumption and bound checks"))
    p.add_argument("--spec")
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = {k: v for k, v in vars(args).items() if v is not None}
    try:
        manifest = run_experiment(config)
    except UsageError as err:
        print(f"mfc: error: {err}", file=sys.stderr)
        return 2
    except CertificationFailure as err:
        print(f"certify failed: {', '.join(err.failed)}", file=sys.stderr)
        print(err.manifest["output_dir"])
        return 1
    res = manifest.get("results", {})
    print(manifest["output_dir"])
    print(jsonio.dumps({k: v for k, v in res.items() if not isinstance(v, (dict, list))}), end="")
    if manifest["command"] == "strictify" and res.get("status") == "aborted":
        print(f"strictify aborted: non-convex cell {res['cell']}", file=sys.stderr)
        return 3
    if res.get("passed") is False:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
