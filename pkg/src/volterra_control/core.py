"""Time grids, Brownian ensembles and benchmark problem definitions.

Everything downstream (forward simulation, the backward adjoint solver, the
maximum-principle checks) works on a uniform grid t_i = i*dt, i = 0..N, with
the delay aligned to the grid (delta = k*dt).  Times are always produced by
index multiplication, never by repeated addition, so t_0 = 0 and t_N = T are
exact and index arithmetic carries no drift.

Coefficient functions are supplied with their analytic partial derivatives.
The driver of the adjoint equation needs mixed second derivatives of the
kernels, which would be too noisy to nest inside a Monte Carlo loop as finite
differences; `validate_derivatives` cross-checks every supplied derivative
against a central difference of its parent instead.
"""

import math

import numpy as np

__all__ = [
    "VolterraError", "AlignmentError", "DivergenceError", "ConditioningError",
    "OrderingError", "ConsistencyError", "ProjectionError", "ConfigError",
    "TimeGrid", "DelaySpec", "BrownianEnsemble", "ProblemSpec",
    "build_grid", "sample_brownian", "catalog_problem", "constant_control",
    "as_control", "evalc", "validate_derivatives", "CATALOG_NAMES",
]


class VolterraError(Exception):
    """Base class for all errors raised by this package."""
    pass


class AlignmentError(VolterraError):
    """Delay is not an integer multiple of the grid step."""
    pass


class DivergenceError(VolterraError):
    """A simulated path produced a non-finite value."""
    pass


class ConditioningError(VolterraError):
    """A regression design was unusable even with the ridge term."""
    pass


class OrderingError(VolterraError):
    """An adjoint value was requested before its block was solved."""
    pass


class ConsistencyError(VolterraError):
    """Two discretizations that must agree did not."""
    pass


class ProjectionError(VolterraError):
    """A perturbed control left the admissible box."""
    pass


class ConfigError(VolterraError):
    """Bad configuration file or command-line arguments."""
    pass


class TimeGrid(object):
    """Uniform grid on [0, T] with N steps.

    Attributes:
        T: horizon.
        N: number of steps (N >= 2).
        dt: step T/N.
        times: array of length N+1 with times[i] = i*T/N.
    """

    def __init__(self, T, N):
        if not (T > 0):
            raise ValueError("horizon T must be positive, got %r" % (T,))
        if not (isinstance(N, (int, np.integer)) and N >= 2):
            raise ValueError("step count N must be an integer >= 2, got %r" % (N,))
        self.T = float(T)
        self.N = int(N)
        self.dt = self.T / self.N
        # i*T/N keeps t_0 = 0 and t_N = T exact; for dyadic dt every time is exact.
        self.times = np.arange(self.N + 1) * self.T / self.N

    def __repr__(self):
        return "TimeGrid(T=%g, N=%d)" % (self.T, self.N)


class DelaySpec(object):
    """Grid-aligned delay delta = k*dt, 0 <= k <= N."""

    def __init__(self, delta, k):
        self.delta = float(delta)
        self.k = int(k)

    def __repr__(self):
        return "DelaySpec(delta=%g, k=%d)" % (self.delta, self.k)


def build_grid(T, N, delta):
    """Build the time grid and the aligned delay.

    Args:
        T: horizon, > 0.
        N: step count, integer >= 2.
        delta: delay, >= 0; must equal k*dt for an integer k within 1e-12
            relative tolerance.

    Returns:
        (TimeGrid, DelaySpec) with delay.k = round(delta/dt).

    Raises:
        AlignmentError: delta is not a grid multiple; the message names the
            two nearest valid delays.
        ValueError: T, N or delta out of range.
    """
    grid = TimeGrid(T, N)
    if delta < 0:
        raise ValueError("delay must be >= 0, got %r" % (delta,))
    ratio = delta * N / T
    k = int(round(ratio))
    if abs(ratio - k) > 1e-12 * max(1.0, abs(ratio)):
        lo = math.floor(ratio) * grid.dt
        hi = math.ceil(ratio) * grid.dt
        raise AlignmentError(
            "delay %g is not an integer multiple of dt=%g; "
            "nearest valid delays are %.17g and %.17g" % (delta, grid.dt, lo, hi))
    if k > N:
        raise ValueError(
            "delay %g exceeds the horizon T=%g (k=%d > N=%d)" % (delta, T, k, N))
    return grid, DelaySpec(delta, k)


class BrownianEnsemble(object):
    """M independent paths of Brownian increments on a grid.

    Attributes:
        increments: (M, N) array, increments[m, j] ~ Normal(0, dt) i.i.d.
        M, N, dt: counts and step.
        seed: the key the ensemble was drawn from (None if assembled by hand).
    """

    def __init__(self, increments, dt, seed=None):
        increments = np.asarray(increments, dtype=float)
        if increments.ndim != 2:
            raise ValueError("increments must be a (M, N) array")
        self.increments = increments
        self.M, self.N = increments.shape
        self.dt = float(dt)
        self.seed = seed
        self._cumulative = None

    @property
    def cumulative(self):
        """(M, N+1) array of Brownian values B(t_i), B(t_0) = 0."""
        if self._cumulative is None:
            B = np.empty((self.M, self.N + 1))
            B[:, 0] = 0.0
            np.cumsum(self.increments, axis=1, out=B[:, 1:])
            self._cumulative = B
        return self._cumulative

    def bumped(self, j, bump):
        """Copy of the increments with dB_j shifted by `bump` on every path."""
        inc = self.increments.copy()
        inc[:, j] += bump
        return inc


def sample_brownian(grid, M, seed):
    """Draw a reproducible Brownian increment ensemble.

    Identical (grid, M, seed) give a bit-identical ensemble.  Paths are rows;
    partitioning by path index is safe because nothing downstream mixes rows
    except fixed-order reductions.
    """
    if M < 1:
        raise ValueError("path count M must be >= 1, got %r" % (M,))
    rng = np.random.default_rng(seed)
    increments = rng.standard_normal((int(M), grid.N)) * math.sqrt(grid.dt)
    return BrownianEnsemble(increments, grid.dt, seed=seed)


def evalc(fn, *args):
    """Evaluate a coefficient function and broadcast the result.

    Coefficient callables may return scalars for constant coefficients; every
    consumer in this package goes through here so the result always has the
    broadcast shape of the arguments.
    """
    shape = np.broadcast_shapes(*[np.shape(a) for a in args])
    out = np.asarray(fn(*args), dtype=float)
    if out.shape != shape:
        out = np.broadcast_to(out, shape)
    return out


class ProblemSpec(object):
    """Coefficients of one control problem and their derivative suite.

    The state equation drift/diffusion kernels b, sigma are functions of
    (t, s, x, u) where t is the observation time, s the integration time,
    x the delayed state X(s - delta) and u the control.  The running reward
    f is a function of (t, x, u) with x the delayed state, g a function of
    the terminal state, and x0 the initial segment on [-delta, 0] which also
    supplies the free term x0(t) for t in [0, T].

    All callables must accept numpy arrays and broadcast.  Derivative
    attributes follow the pattern b_x, b_u, b_t (first-argument derivative),
    b_tx, b_tu (mixed), and the same for sigma; plus f_x, f_u, g_x.
    Controls live in the box [u_min, u_max].
    """

    _FIELDS = ("b", "sigma", "f", "g", "x0",
               "b_x", "b_u", "b_t", "b_tx", "b_tu",
               "sigma_x", "sigma_u", "sigma_t", "sigma_tx", "sigma_tu",
               "f_x", "f_u", "g_x")

    def __init__(self, name, params, u_min, u_max, **coeffs):
        missing = [f for f in self._FIELDS if f not in coeffs]
        if missing:
            raise ValueError("ProblemSpec missing coefficients: %s" % ", ".join(missing))
        unknown = [f for f in coeffs if f not in self._FIELDS]
        if unknown:
            raise ValueError("ProblemSpec got unknown coefficients: %s" % ", ".join(unknown))
        if not (u_min <= u_max):
            raise ValueError("need u_min <= u_max, got [%r, %r]" % (u_min, u_max))
        self.name = name
        self.params = dict(params)
        self.u_min = float(u_min)
        self.u_max = float(u_max)
        for field in self._FIELDS:
            setattr(self, field, coeffs[field])

    def __repr__(self):
        return "ProblemSpec(%r, params=%r)" % (self.name, self.params)


def constant_control(grid, value):
    """Control path equal to `value` on every cell [t_j, t_{j+1})."""
    return np.full(grid.N, float(value))


def as_control(grid, u):
    """Coerce a scalar or length-N sequence to a control path array."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        return np.full(grid.N, float(u))
    if u.shape != (grid.N,):
        raise ValueError("control path must have shape (%d,), got %r" % (grid.N, u.shape))
    return u


def _require(params, keys, name):
    for key in keys:
        if key not in params:
            raise ValueError("catalog problem %r is missing parameter %r" % (name, key))
    allowed = set(keys) | {"u_min", "u_max"}
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ValueError("catalog problem %r got unknown parameters: %s"
                         % (name, ", ".join(unknown)))


def _floats(params, keys):
    return {k: float(params[k]) for k in keys if k in params}


def _lq_coeffs(alpha, sigma0, kappa, a):
    """Shared coefficient suite for the linear-quadratic problems."""
    zero = lambda t, s, x, u: np.zeros(np.broadcast_shapes(
        np.shape(t), np.shape(s), np.shape(x), np.shape(u)))
    return dict(
        b=lambda t, s, x, u: alpha * x + u,
        sigma=lambda t, s, x, u: np.full(np.broadcast_shapes(
            np.shape(t), np.shape(s), np.shape(x), np.shape(u)), sigma0),
        f=lambda t, x, u: -0.5 * kappa * u ** 2,
        g=lambda x: a * x,
        b_x=lambda t, s, x, u: np.full(np.broadcast_shapes(
            np.shape(t), np.shape(s), np.shape(x), np.shape(u)), alpha),
        b_u=lambda t, s, x, u: np.ones(np.broadcast_shapes(
            np.shape(t), np.shape(s), np.shape(x), np.shape(u))),
        b_t=zero, b_tx=zero, b_tu=zero,
        sigma_x=zero, sigma_u=zero, sigma_t=zero, sigma_tx=zero, sigma_tu=zero,
        f_x=lambda t, x, u: np.zeros(np.broadcast_shapes(
            np.shape(t), np.shape(x), np.shape(u))),
        f_u=lambda t, x, u: -kappa * u,
        g_x=lambda x: np.full(np.shape(x), a),
    )


def _build_lq1(params):
    _require(params, ("a", "kappa", "sigma0", "c"), "LQ1")
    p = _floats(params, ("a", "kappa", "sigma0", "c", "u_min", "u_max"))
    coeffs = _lq_coeffs(0.0, p["sigma0"], p["kappa"], p["a"])
    c = p["c"]
    coeffs["x0"] = lambda t: np.full(np.shape(t), c)
    return ProblemSpec("LQ1", p, p.get("u_min", -2.0), p.get("u_max", 2.0), **coeffs)


def _build_lq2(params):
    _require(params, ("alpha", "a", "kappa", "sigma0", "c"), "LQ2")
    p = _floats(params, ("alpha", "a", "kappa", "sigma0", "c", "u_min", "u_max"))
    coeffs = _lq_coeffs(p["alpha"], p["sigma0"], p["kappa"], p["a"])
    c = p["c"]
    coeffs["x0"] = lambda t: np.full(np.shape(t), c)
    return ProblemSpec("LQ2", p, p.get("u_min", -2.0), p.get("u_max", 2.0), **coeffs)


def _build_quad_term(params):
    unknown = sorted(set(params) - {"sigma0", "c", "u_min", "u_max"})
    if unknown:
        raise ValueError("catalog problem 'QUAD_TERM' got unknown parameters: %s"
                         % ", ".join(unknown))
    p = _floats(params, ("sigma0", "c", "u_min", "u_max"))
    p.setdefault("sigma0", 1.0)
    p.setdefault("c", 0.0)
    coeffs = _lq_coeffs(0.0, p["sigma0"], 0.0, 0.0)
    coeffs["f"] = lambda t, x, u: np.zeros(np.broadcast_shapes(
        np.shape(t), np.shape(x), np.shape(u)))
    coeffs["f_u"] = coeffs["f"]
    coeffs["g"] = lambda x: x ** 2
    coeffs["g_x"] = lambda x: 2.0 * x
    c = p["c"]
    coeffs["x0"] = lambda t: np.full(np.shape(t), c)
    return ProblemSpec("QUAD_TERM", p, p.get("u_min", -1.0), p.get("u_max", 1.0), **coeffs)


# Defaults keep every coefficient derivative deterministic (constant or
# affine in t), which is what makes the adjoint gradient identity exact at
# the discrete level; see the gradient tests.
_CUSTOM_DEFAULTS = {
    "b_expr": "0.4*u + 0.25*x + 0.1*t*x + 0.05*t*u",
    "sigma_expr": "0.3 + 0.1*x + 0.05*t*x + 0.05*u",
    "f_expr": "-0.5*u**2 + 0.2*x + 0.1*x**2",
    "g_expr": "0.5*x + 0.3*x**2",
    "c": 0.1,
    "u_min": -1.0,
    "u_max": 1.0,
}


def _lambdify_poly(expr, variables, kind):
    import sympy

    free_ok = {sympy.Symbol(v) for v in variables.split()}
    expr = sympy.sympify(expr)
    if not expr.free_symbols <= free_ok:
        raise ValueError("%s expression uses unknown symbols %s (allowed: %s)"
                         % (kind, sorted(map(str, expr.free_symbols - free_ok)), variables))
    if not expr.is_polynomial(*free_ok):
        raise ValueError("%s expression must be polynomial, got %r" % (kind, str(expr)))
    return expr


def _build_custom_poly(params):
    import sympy

    known = set(_CUSTOM_DEFAULTS)
    unknown = [k for k in params if k not in known]
    if unknown:
        raise ValueError("CUSTOM_POLY got unknown parameters: %s" % ", ".join(sorted(unknown)))
    p = dict(_CUSTOM_DEFAULTS)
    p.update(params)
    t, s, x, u = sympy.symbols("t s x u")
    b = _lambdify_poly(p["b_expr"], "t s x u", "b")
    sg = _lambdify_poly(p["sigma_expr"], "t s x u", "sigma")
    f = _lambdify_poly(p["f_expr"], "t x u", "f")
    g = _lambdify_poly(p["g_expr"], "x", "g")

    def lam(expr, *variables):
        fn = sympy.lambdify(variables, expr, modules="numpy")
        def wrapped(*args, _fn=fn):
            shape = np.broadcast_shapes(*[np.shape(a) for a in args])
            return np.broadcast_to(np.asarray(_fn(*args), dtype=float), shape)
        return wrapped

    coeffs = dict(
        b=lam(b, t, s, x, u),
        sigma=lam(sg, t, s, x, u),
        f=lam(f, t, x, u),
        g=lam(g, x),
        b_x=lam(b.diff(x), t, s, x, u),
        b_u=lam(b.diff(u), t, s, x, u),
        b_t=lam(b.diff(t), t, s, x, u),
        b_tx=lam(b.diff(t, x), t, s, x, u),
        b_tu=lam(b.diff(t, u), t, s, x, u),
        sigma_x=lam(sg.diff(x), t, s, x, u),
        sigma_u=lam(sg.diff(u), t, s, x, u),
        sigma_t=lam(sg.diff(t), t, s, x, u),
        sigma_tx=lam(sg.diff(t, x), t, s, x, u),
        sigma_tu=lam(sg.diff(t, u), t, s, x, u),
        f_x=lam(f.diff(x), t, x, u),
        f_u=lam(f.diff(u), t, x, u),
        g_x=lam(g.diff(x), x),
    )
    c = float(p["c"])
    coeffs["x0"] = lambda tt: np.full(np.shape(tt), c)
    keep = {k: (str(v) if k.endswith("_expr") else float(v)) for k, v in p.items()}
    return ProblemSpec("CUSTOM_POLY", keep, float(p["u_min"]), float(p["u_max"]), **coeffs)


_CATALOG = {
    "LQ1": _build_lq1,
    "LQ2": _build_lq2,
    "QUAD_TERM": _build_quad_term,
    "CUSTOM_POLY": _build_custom_poly,
}

CATALOG_NAMES = tuple(sorted(_CATALOG))


def catalog_problem(name, params=None):
    """Build one of the benchmark problems.

    LQ1:        b = u,            sigma = sigma0, f = -(kappa/2) u^2, g = a*x.
    LQ2:        b = alpha*x + u   (x is the delayed state), rest as LQ1.
    QUAD_TERM:  b = u,            sigma = sigma0, f = 0,              g = x^2.
    CUSTOM_POLY: polynomial expressions for b, sigma, f, g given as params
        (b_expr, sigma_expr, f_expr, g_expr in the variables t, s, x, u);
        derivatives are generated symbolically at build time.

    Args:
        name: one of CATALOG_NAMES.
        params: key-value map; LQ1 requires a, kappa, sigma0, c and LQ2
            additionally alpha; u_min/u_max are optional everywhere.

    Raises:
        ValueError: unknown name or missing/unknown parameter.
    """
    if name not in _CATALOG:
        raise ValueError("unknown catalog problem %r (have: %s)"
                         % (name, ", ".join(CATALOG_NAMES)))
    return _CATALOG[name](dict(params or {}))


# (parent attribute, derivative attribute, index of the bumped argument)
_DERIVATIVE_SUITE = [
    ("b", "b_t", 0), ("b", "b_x", 2), ("b", "b_u", 3),
    ("b_x", "b_tx", 0), ("b_u", "b_tu", 0),
    ("sigma", "sigma_t", 0), ("sigma", "sigma_x", 2), ("sigma", "sigma_u", 3),
    ("sigma_x", "sigma_tx", 0), ("sigma_u", "sigma_tu", 0),
    ("f", "f_x", 1), ("f", "f_u", 2),
    ("g", "g_x", 0),
]


def validate_derivatives(spec, n_points=100, seed=0, rtol=1e-5, t_range=(0.0, 2.0),
                         x_range=(-2.0, 2.0)):
    """Cross-check every supplied derivative against a central difference.

    Samples n_points random argument tuples, bumps one argument by
    1e-5*max(1, |arg|) and compares.  The error measure is
    |fd - analytic| / max(1, |analytic|).

    Returns:
        dict mapping derivative name to its worst relative error.

    Raises:
        ConsistencyError: some derivative exceeds rtol.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(t_range[0], t_range[1], n_points)
    s = rng.uniform(t_range[0], t_range[1], n_points)
    x = rng.uniform(x_range[0], x_range[1], n_points)
    u = rng.uniform(spec.u_min, spec.u_max, n_points)
    report = {}
    for parent_name, deriv_name, arg_index in _DERIVATIVE_SUITE:
        if parent_name.startswith(("b", "sigma")):
            args = (t, s, x, u)
        elif parent_name == "f":
            args = (t, x, u)
        else:
            args = (x,)
        parent = getattr(spec, parent_name)
        deriv = getattr(spec, deriv_name)
        bump = 1e-5 * np.maximum(1.0, np.abs(args[arg_index]))
        hi = list(args)
        lo = list(args)
        hi[arg_index] = args[arg_index] + bump
        lo[arg_index] = args[arg_index] - bump
        fd = (evalc(parent, *hi) - evalc(parent, *lo)) / (2.0 * bump)
        an = evalc(deriv, *args)
        err = np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an)))
        report[deriv_name] = float(err)
        if err > rtol:
            raise ConsistencyError(
                "derivative %s disagrees with the finite difference of %s: "
                "relative error %.3g > %.3g" % (deriv_name, parent_name, err, rtol))
    return report
