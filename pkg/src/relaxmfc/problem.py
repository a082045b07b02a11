"""Problem data (dynamics f, Lagrangian L, growth constants) and checks.

Evaluators are vectorized over states and control atoms:

* ``f(x, U, nu) -> (B, M, d)`` for states ``x`` (B, d), atoms ``U`` (M, n)
  and a torus measure ``nu``;
* ``L(x, U, nu) -> (B, M)``;
* ``dLdx -> (B, M, d)`` and ``dfdx -> (B, M, d, d)`` (``[..., i, l]`` is
  d f_i / d x_l); both fall back to central differences when omitted;
* optional terminal cost ``g(x) -> (B,)`` with gradient ``dgdx -> (B, d)``.
"""

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .control import ControlAtoms
from .measures import AtomicMeasure, normalize, torus_dist, w1

FD_STEP = 1e-6
RATIO_TOL = 1e-9


class AssumptionError(RuntimeError):
    """An evaluator failed while a named assumption was under test."""

    def __init__(self, assumption, cause):
        super().__init__(f"evaluator failed while checking {assumption}: {cause}")
        self.assumption = assumption


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    d: int
    n: int
    T: float
    p: float
    q: float
    R: float
    f: object
    L: object
    dLdx: object = None
    dfdx: object = None
    C: float = 1.0
    C1: float = 1.0
    C2: float = 1.0
    lip_x: float = 0.0
    lip_nu: float = 0.0
    L_slope: float = 0.0
    L_offset: float = 0.0
    g: object = None
    dgdx: object = None
    box_lo: tuple = (-1.0,)
    box_hi: tuple = (1.0,)
    atoms_per_axis: int = 9
    wrap: bool = True
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.q > self.p >= 1):
            raise ValueError(f"need q > p >= 1, got p={self.p}, q={self.q}")
        if self.T <= 0 or self.R <= 0:
            raise ValueError("horizon and budget must be positive")
        lo = tuple(float(v) for v in np.atleast_1d(self.box_lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.box_hi))
        if len(lo) == 1 and self.n > 1:
            lo, hi = lo * self.n, hi * self.n
        if len(lo) != self.n or len(hi) != self.n:
            raise ValueError("atom box dimension must equal control_dim")
        if any(a > 0 or b < 0 for a, b in zip(lo, hi)):
            raise ValueError("the atom box must contain the origin")
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)

    @cached_property
    def atoms(self):
        return ControlAtoms.from_box(self.box_lo, self.box_hi, self.atoms_per_axis)

    @property
    def r(self):
        return self.q / (self.q - self.p)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def grad_L(self, x, U, nu):
        if self.dLdx is not None:
            return self.dLdx(x, U, nu)
        return _fd_x(lambda y: self.L(y, U, nu), x, self.wrap)

    def jac_f(self, x, U, nu):
        if self.dfdx is not None:
            return self.dfdx(x, U, nu)
        return _fd_x(lambda y: self.f(y, U, nu), x, self.wrap)

    def terminal(self, x):
        if self.g is None:
            return np.zeros(np.asarray(x).shape[0])
        return self.g(x)

    def grad_terminal(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.g is None:
            return np.zeros_like(x)
        if self.dgdx is not None:
            return self.dgdx(x)
        return _fd_x(self.g, x, self.wrap)

    def describe(self):
        """JSON-friendly echo (evaluators are named, not serialized)."""
        return {
            "name": self.name,
            "dim": self.d,
            "control_dim": self.n,
            "horizon": self.T,
            "p": self.p,
            "q": self.q,
            "budget": self.R,
            "C": self.C,
            "C1": self.C1,
            "C2": self.C2,
            "lip_x": self.lip_x,
            "lip_nu": self.lip_nu,
            "L_slope": self.L_slope,
            "L_offset": self.L_offset,
            "box_lo": list(self.box_lo),
            "box_hi": list(self.box_hi),
            "atoms_per_axis": self.atoms_per_axis,
            "wrap": self.wrap,
            "params": dict(self.params),
        }


def _fd_x(fn, x, wrap):
    """Central differences in x; stacks the derivative on a new last axis."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = FD_STEP
        xp, xm = x + e, x - e
        if wrap:
            xp, xm = normalize(xp), normalize(xm)
        cols.append((np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2 * FD_STEP))
    return np.stack(cols, axis=-1)


def derive_constants(spec):
    """Velocity bound K, Hoelder exponent r and the p-moment bound."""
    p, q, T, C, R = spec.p, spec.q, spec.T, spec.C, spec.R
    a = 2.0 ** (q / p - 1.0) * C ** (q / p)
    K = (a * T + a * R) ** (p / q)
    r = q / (q - p)
    return {"K": K, "r": r, "moment_p_bound": R ** (p / q) * T ** (1.0 / r)}


# -- builtin problems -------------------------------------------------------

def _cos_sin(x):
    ang = 2.0 * np.pi * x
    return np.cos(ang), np.sin(ang)


def _attraction(x, nu):
    """E_nu sum_i sin^2(pi (x_i - y_i)) / pi^2; per-point shape (B,)."""
    cx, sx = _cos_sin(x)
    Cm, Sm = nu.fourier
    return np.sum(1.0 - (cx * Cm + sx * Sm), axis=1) / (2.0 * np.pi**2)


def _attraction_grad(x, nu):
    cx, sx = _cos_sin(x)
    Cm, Sm = nu.fourier
    return (sx * Cm - cx * Sm) / np.pi


def _wrapped_diff(x, nu):
    """Signed geodesic offsets x - y_k in [-1/2, 1/2)^d, shape (B, k, d)."""
    diff = x[:, None, :] - nu.support[None, :, :]
    return diff - np.floor(diff + 0.5)


def _d1_point(x, nu):
    """d1(delta_x, nu) = E_nu |x - y|_T; shape (B,)."""
    return np.linalg.norm(_wrapped_diff(x, nu), axis=-1) @ nu.weights


def _d1_point_grad(x, nu):
    diff = _wrapped_diff(x, nu)
    r = np.linalg.norm(diff, axis=-1, keepdims=True)
    unit = np.divide(diff, r, out=np.zeros_like(diff), where=r > 0)
    return np.einsum("bkd,k->bd", unit, nu.weights)


def _aversion(x, nu):
    """E_nu sum_i cos(2 pi (x_i - y_i))."""
    cx, sx = _cos_sin(x)
    Cm, Sm = nu.fourier
    return np.sum(cx * Cm + sx * Sm, axis=1)


def _aversion_grad(x, nu):
    cx, sx = _cos_sin(x)
    Cm, Sm = nu.fourier
    return 2.0 * np.pi * (cx * Sm - sx * Cm)


def _drift_u(x, U, nu):
    return np.broadcast_to(U[None, :, :], (x.shape[0],) + U.shape).copy()


def _zero_jac(x, U, nu):
    d = x.shape[1]
    return np.zeros((x.shape[0], U.shape[0], d, d))


def _sq(U):
    return np.sum(U * U, axis=1)


def _zero(d=1, **kw):
    def f(x, U, nu):
        return np.zeros((x.shape[0], U.shape[0], d))

    def L(x, U, nu):
        return np.zeros((x.shape[0], U.shape[0]))

    def dLdx(x, U, nu):
        return np.zeros((x.shape[0], U.shape[0], d))

    return dict(d=d, n=d, T=1.0, p=1.0, q=2.0, R=1.0, f=f, L=L, dLdx=dLdx, dfdx=_zero_jac,
                C=1.0, C1=1.0, C2=1.0, box_lo=(-1.0,), box_hi=(1.0,), atoms_per_axis=3)


def _linear_quadratic(d=1, coupling=1.0, **kw):
    c = float(coupling)

    def L(x, U, nu):
        return _sq(U)[None, :] + c * _d1_point(x, nu)[:, None]

    def dLdx(x, U, nu):
        return np.broadcast_to(c * _d1_point_grad(x, nu)[:, None, :], (x.shape[0], U.shape[0], d)).copy()

    rd = np.sqrt(d)
    return dict(d=d, n=d, T=1.0, p=1.0, q=2.0, R=2.0, f=_drift_u, L=L, dLdx=dLdx, dfdx=_zero_jac,
                C=1.0, C1=max(1.0, 0.5 * c * rd), C2=c, lip_x=0.0, lip_nu=0.0,
                L_slope=c, box_lo=(-1.0,), box_hi=(1.0,), atoms_per_axis=9,
                params={"coupling": c})


def _double_well(d=1, coupling=1.0, **kw):
    c = float(coupling)

    def L(x, U, nu):
        return ((_sq(U) - 1.0) ** 2)[None, :] + c * _attraction(x, nu)[:, None]

    def dLdx(x, U, nu):
        return np.broadcast_to(c * _attraction_grad(x, nu)[:, None, :], (x.shape[0], U.shape[0], d)).copy()

    rd = np.sqrt(d)
    return dict(d=d, n=d, T=1.0, p=1.0, q=4.0, R=6.0, f=_drift_u, L=L, dLdx=dLdx, dfdx=_zero_jac,
                C=1.0, C1=1.0 + c * d / np.pi**2, C2=c * rd / np.pi, L_slope=c * rd / np.pi,
                box_lo=(-1.5,), box_hi=(1.5,), atoms_per_axis=7, params={"coupling": c})


def _crowd_aversion(d=1, coupling=0.1, **kw):
    c = float(coupling)

    def L(x, U, nu):
        return 0.5 * _sq(U)[None, :] + c * _aversion(x, nu)[:, None]

    def dLdx(x, U, nu):
        return np.broadcast_to(c * _aversion_grad(x, nu)[:, None, :], (x.shape[0], U.shape[0], d)).copy()

    rd = np.sqrt(d)
    return dict(d=d, n=d, T=1.0, p=1.0, q=2.0, R=2.0, f=_drift_u, L=L, dLdx=dLdx, dfdx=_zero_jac,
                C=1.0, C1=0.5 + c * d, C2=2 * np.pi * c * rd, L_slope=2 * np.pi * c * rd,
                box_lo=(-1.0,), box_hi=(1.0,), atoms_per_axis=9, params={"coupling": c})


def resnet_field(z, A, zeta, activation=np.tanh):
    """psi(z, a, zeta) = beta * phi(alpha * z + rho * zeta) for atoms a = (alpha, beta, rho).

    ``z`` (B,), ``A`` (M, 3), ``zeta`` scalar or (B,); returns (B, M).
    """
    z = np.asarray(z, dtype=np.float64)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=np.float64), z.shape)
    alpha, beta, rho = A[:, 0], A[:, 1], A[:, 2]
    return beta[None, :] * activation(alpha[None, :] * z[:, None] + rho[None, :] * zeta[:, None])


def resnet_field_dz(z, A, zeta):
    z = np.asarray(z, dtype=np.float64)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=np.float64), z.shape)
    alpha, beta, rho = A[:, 0], A[:, 1], A[:, 2]
    th = np.tanh(alpha[None, :] * z[:, None] + rho[None, :] * zeta[:, None])
    return beta[None, :] * alpha[None, :] * (1.0 - th * th)


def _resnet_1d(zeta=0.0, box=1.0, **kw):
    zeta = float(zeta)
    b = float(box)

    def f(x, U, nu):
        return resnet_field(x[:, 0], U, zeta)[:, :, None]

    def dfdx(x, U, nu):
        return resnet_field_dz(x[:, 0], U, zeta)[:, :, None, None]

    def L(x, U, nu):
        return np.zeros((x.shape[0], U.shape[0]))

    def dLdx(x, U, nu):
        return np.zeros((x.shape[0], U.shape[0], 1))

    return dict(d=1, n=3, T=1.0, p=1.0, q=2.0, R=3.0 * b * b, f=f, L=L, dLdx=dLdx, dfdx=dfdx,
                C=1.0, C1=1.0, C2=1.0, lip_x=b * b, lip_nu=0.0, box_lo=(-b,) * 3, box_hi=(b,) * 3,
                atoms_per_axis=3, wrap=False, params={"zeta": zeta, "box": b})


BUILTINS = {
    "zero": _zero,
    "linear-quadratic": _linear_quadratic,
    "double-well": _double_well,
    "crowd-aversion": _crowd_aversion,
    "resnet-1d": _resnet_1d,
}

def builtin(name, **overrides):
    """Named benchmark problem; ``overrides`` replace spec fields or builder parameters."""
    if name not in BUILTINS:
        raise ValueError(f"unknown builtin {name!r}; choices: {', '.join(BUILTINS)}")
    builder_kw = {k: overrides.pop(k) for k in list(overrides) if k in ("d", "coupling", "zeta", "box")}
    fields = BUILTINS[name](**builder_kw)
    params = dict(fields.pop("params", {}))
    fields.update(overrides)
    return ProblemSpec(name=name, params=params, **fields)


# -- spec files -------------------------------------------------------------

_FILE_KEYS = {
    "dim": ("d", int),
    "control_dim": ("n", int),
    "horizon": ("T", float),
    "p": ("p", float),
    "q": ("q", float),
    "budget": ("R", float),
    "C": ("C", float),
    "C1": ("C1", float),
    "C2": ("C2", float),
    "lip_x": ("lip_x", float),
    "lip_nu": ("lip_nu", float),
    "L_slope": ("L_slope", float),
    "L_offset": ("L_offset", float),
    "atoms_per_axis": ("atoms_per_axis", int),
    "box_lo": ("box_lo", lambda s: tuple(float(v) for v in s.split(","))),
    "box_hi": ("box_hi", lambda s: tuple(float(v) for v in s.split(","))),
    "coupling": ("coupling", float),
    "zeta": ("zeta", float),
}
_EXPR_KEYS = ("f", "L", "problem")

_EXPR_NAMES = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "tanh", "exp", "log", "sqrt", "abs", "minimum", "maximum", "pi", "where")
}


def _compile_expr(text, key):
    code = compile(text, f"<spec {key}>", "eval")
    for name in code.co_names:
        if name not in _EXPR_NAMES and name not in ("x", "u", "nu_cos", "nu_sin", "nu_mean"):
            raise ValueError(f"unknown name {name!r} in expression for {key}")

    def ev(x, U, nu):
        Cm, Sm = nu.fourier
        env = dict(_EXPR_NAMES)
        env.update(x=x[:, 0][:, None], u=U[:, 0][None, :], nu_cos=float(Cm[0]), nu_sin=float(Sm[0]),
                   nu_mean=float(nu.mean[0]))
        out = eval(code, {"__builtins__": {}}, env)  # names were whitelisted above
        return np.broadcast_to(np.asarray(out, dtype=np.float64), (x.shape[0], U.shape[0])).copy()

    return ev


def parse_spec_text(text):
    """Flat ``key = value`` spec format; ``#`` starts a comment."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FILE_KEYS and key not in _EXPR_KEYS:
            valid = ", ".join(sorted(list(_FILE_KEYS) + list(_EXPR_KEYS)))
            raise ValueError(f"line {lineno}: unknown key {key!r}; valid keys: {valid}")
        entries[key] = val
    conv = {}
    for key, val in entries.items():
        if key in _FILE_KEYS:
            name, cast = _FILE_KEYS[key]
            conv[name] = cast(val)
    if "problem" in entries:
        if "f" in entries or "L" in entries:
            raise ValueError("give either problem = <builtin> or f/L expressions, not both")
        return builtin(entries["problem"], **conv)
    if "f" not in entries or "L" not in entries:
        raise ValueError("a spec file needs problem = <builtin>, or both f and L")
    conv.setdefault("d", 1)
    conv.setdefault("n", 1)
    if conv["d"] != 1 or conv["n"] != 1:
        raise ValueError("expression specs support dim = control_dim = 1 only")
    conv.pop("coupling", None)
    conv.pop("zeta", None)
    f_expr = _compile_expr(entries["f"], "f")
    defaults = dict(T=1.0, p=1.0, q=2.0, R=1.0)
    defaults.update(conv)
    return ProblemSpec(
        f=lambda x, U, nu: f_expr(x, U, nu)[:, :, None],
        L=_compile_expr(entries["L"], "L"),
        name="expression",
        params={"f": entries["f"], "L": entries["L"]},
        **defaults,
    )


def load_spec(ref):
    """``builtin:NAME`` or a path to a spec file."""
    if ref.startswith("builtin:"):
        return builtin(ref.split(":", 1)[1])
    with open(ref, encoding="utf-8") as fh:
        return parse_spec_text(fh.read())


# -- sampled assumption checks ----------------------------------------------

@dataclass
class BoundsReport:
    checks: dict
    samples: int
    seed: int

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks.values())

    @property
    def violations(self):
        return [k for k, c in self.checks.items() if not c["passed"]]

    def to_dict(self):
        return {"passed": self.passed, "samples": self.samples, "seed": self.seed,
                "violations": self.violations, "checks": self.checks}


def random_measure(rng, d, max_atoms=5):
    k = int(rng.integers(1, max_atoms + 1))
    w = rng.dirichlet(np.ones(k))
    return AtomicMeasure(rng.random((k, d)), w / w.sum())


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.broadcast_to(np.asarray(den, dtype=np.float64), num.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num <= 1e-12, 0.0, np.inf))
    return out


class _Tracker:
    def __init__(self):
        self.worst = {}

    def add(self, name, ratios, witnesses):
        ratios = np.asarray(ratios, dtype=np.float64).reshape(-1)
        i = int(np.argmax(ratios))
        cur = self.worst.get(name)
        if cur is None or ratios[i] > cur[0]:
            self.worst[name] = (float(ratios[i]), witnesses(i))


def validate_assumptions(spec, samples=1000, seed=0, group=100):
    """Sampled checks of the growth, Lipschitz and continuity constants.

    States are uniform on the torus (on [-2, 2]^d for unwrapped specs),
    controls uniform in the atom box plus the atoms themselves, and
    measures random with 1-5 atoms. Each reported ratio is
    observed/declared; a check passes iff its worst ratio is <= 1.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = np.array(spec.box_lo), np.array(spec.box_hi)
    track = _Tracker()
    done = 0
    while done < samples:
        b = min(group, samples - done)
        if spec.wrap:
            x = rng.random((b, spec.d))
        else:
            x = rng.uniform(-2.0, 2.0, (b, spec.d))
        U = np.vstack([lo + (hi - lo) * rng.random((b, spec.n)), spec.atoms.points])
        nu1 = random_measure(rng, spec.d)
        nu2 = random_measure(rng, spec.d)
        un = np.linalg.norm(U, axis=1)
        step = 10.0 ** rng.uniform(-4, -0.5, (b, 1))
        direction = rng.normal(size=(b, spec.d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        x2 = x + step * direction
        if spec.wrap:
            x2 = normalize(x2)
            dx = torus_dist(x, x2)
        else:
            dx = np.linalg.norm(x - x2, axis=1)

        def call(assumption, fn, *args):
            try:
                out = np.asarray(fn(*args), dtype=np.float64)
            except Exception as exc:  # reported with the assumption name
                raise AssumptionError(assumption, exc) from exc
            if not np.all(np.isfinite(out)):
                raise AssumptionError(assumption, "non-finite value")
            return out

        def wit(i, **extra):
            bi, mi = np.unravel_index(i, (b, U.shape[0]))
            out = {"x": x[bi].tolist(), "u": U[mi].tolist()}
            out.update({k: (v[bi].tolist() if isinstance(v, np.ndarray) else v) for k, v in extra.items()})
            return out

        fv = call("F1", spec.f, x, U, nu1)
        track.add("F1", _ratio(np.linalg.norm(fv, axis=-1), spec.C * (1 + un**spec.p)[None, :]), wit)
        Lv = call("L3", spec.L, x, U, nu1)
        track.add("L3", _ratio(np.abs(Lv), spec.C1 * (1 + un**spec.q)[None, :]), wit)
        gL = call("L4", spec.grad_L, x, U, nu1)
        track.add("L4", _ratio(np.linalg.norm(gL, axis=-1), spec.C2 * (1 + un**spec.q)[None, :]), wit)
        f2 = call("F2", spec.f, x2, U, nu1)
        dq = np.linalg.norm(fv - f2, axis=-1) / dx[:, None]
        track.add("F2", _ratio(dq, spec.lip_x), lambda i: wit(i, x2=x2))
        dnu = w1(nu1, nu2)
        fn2 = call("F3", spec.f, x, U, nu2)
        if dnu > 0:
            dq = np.linalg.norm(fv - fn2, axis=-1) / dnu
            track.add("F3", _ratio(dq, spec.lip_nu), lambda i: wit(i, d1=dnu))
            Ln2 = call("L2", spec.L, x, U, nu2)
            excess = np.abs(Lv - Ln2) - spec.L_offset
            track.add("L2", _ratio(np.maximum(excess, 0.0), spec.L_slope * dnu), lambda i: wit(i, d1=dnu))
        done += b
    checks = {}
    for name in ("F1", "F2", "F3", "L2", "L3", "L4"):
        worst, witness = track.worst.get(name, (0.0, None))
        checks[name] = {"passed": bool(worst <= 1.0 + RATIO_TOL), "worst_ratio": worst, "witness": witness}
    return BoundsReport(checks, samples, seed)
