"""Backward solver for the time-advanced adjoint Volterra equation.

The adjoint pair (p, q) satisfies

    p(t) = g'(X(T)) + int_t^T h(s) ds - int_t^T q(t,s) dB(s),

where the driver h at time t reads adjoint data at the advanced time t+delta.
Per path we accumulate G_i = g'(X(T)) + dt * sum_{r>=i} h_r, so that
p(t_i) = E[G_i | F_i] and the kernel on the whole square is

    q(t_a, s_c) = E[G_a * dB_c / dt | F_c],

the conditional-covariance estimator.  The solver walks the grid backward;
every driver value at index r only reads adjoint data at indices >= r+k+1,
which is exactly the delta-block ordering: the block [T-delta, T] has h = 0
and is solved first, each earlier block only consumes already-solved ones,
and k = 0 degenerates to a plain backward sweep (still with no
self-reference, because the discrete driver's diagonal weights sit one index
in the future).

Index conventions.  The discrete driver at cell r, active only when
r+k <= N-1, is

    h_r = f_x(t_{r+k}, X(t_r), u_{r+k})
        + b_x(t_{r+k}, t_{r+k}, X(t_r), u_{r+k}) * p[r+k+1]
        + sigma_x(t_{r+k}, t_{r+k}, X(t_r), u_{r+k}) * q_d[r+k]
        + dt * sum_{l=r+k}^{N-1} ( d2b/dtdx(t_l, t_{r+k}, .) * p[l+1]
                                 + d2sigma/dtdx(t_l, t_{r+k}, .) * q(l, r+k) )

with q_d[j] = E[G_{j+1} dB_j / dt | F_j] the advanced diagonal and
q(l, j) = E[G_{l+1} dB_j / dt | F_j] the advanced kernel column.  These
one-step shifts (p[j+1] instead of p[j], G_{j+1} instead of G_j) are what the
exact transposition of the discrete forward scheme produces; with them the
adjoint cost gradient reproduces the finite-difference derivative of the
discrete cost with no O(dt) bias.
"""

import numpy as np

from .core import OrderingError, evalc
from .forward import simulate_state
from .malliavin import (DEFAULT_RIDGE, conditional_expectation, default_bump,
                        regression_features, _solve_ridge)
from . import core as _core

__all__ = ["AdjointSolution", "solve_adjoint", "driver_h", "q_regression",
           "q_malliavin", "diagonal_q", "hamiltonian_assembly", "bsvie_residual"]


def hamiltonian_assembly(grid, j, x, v, p, diag_q_j, column_getter,
                         f_fn, b_fn, s_fn, bker_fn, sker_fn):
    """Shared assembly behind the Hamiltonian and the adjoint driver.

    Computes, per path,

        f_fn(t_j, x, v) + b_fn(t_j, t_j, x, v) * p[j+1]
                        + s_fn(t_j, t_j, x, v) * diag_q_j
        + dt * sum_{l=j}^{N-1} ( bker_fn(t_l, t_j, x, v) * p[l+1]
                               + sker_fn(t_l, t_j, x, v) * q_col[l] ),

    which is the Hamiltonian itself for (f, b, sigma, db/dt, dsigma/dt), its
    x-gradient (equal to the driver at the shifted index) for the _x
    derivative suite, and its u-gradient for the _u suite.

    Args:
        j: time index of the Hamiltonian, 0 <= j <= N-1.
        x: per-path delayed-state argument, shape (M,).
        v: control argument, scalar or shape (M,).
        p: (M, N+1) adjoint values, columns >= j+1 must be solved.
        diag_q_j: per-path advanced diagonal at j.
        column_getter: callable j -> (M, N-j) advanced kernel column, only
            invoked when the sker_fn terms are not structurally zero.
    """
    N, dt = grid.N, grid.dt
    t = grid.times
    x = np.asarray(x, dtype=float)
    out = evalc(f_fn, t[j], x, v)
    out = out + evalc(b_fn, t[j], t[j], x, v) * p[:, j + 1]
    out = out + evalc(s_fn, t[j], t[j], x, v) * diag_q_j
    tl = t[j:N][None, :]
    xcol = x[:, None] if x.ndim == 1 else x
    vcol = v[:, None] if np.ndim(v) == 1 else v
    bk = evalc(bker_fn, tl, t[j], xcol, vcol)
    if np.any(bk):
        out = out + (bk * p[:, j + 1:N + 1]).sum(axis=1) * dt
    sk = evalc(sker_fn, tl, t[j], xcol, vcol)
    if np.any(sk):
        out = out + (sk * column_getter(j)).sum(axis=1) * dt
    return out


def q_regression(G_values, j, W, features, ridge=DEFAULT_RIDGE):
    """Kernel estimate q(., s_j) = E[G * dB_j / dt | F_j] by regression."""
    target = np.asarray(G_values, dtype=float) * (W.increments[:, j] / W.dt)
    return conditional_expectation(target, features, ridge=ridge)


def diagonal_q(G_values, i, W, features, ridge=DEFAULT_RIDGE):
    """Diagonal kernel value q(t_i, t_i), the j -> i limit of q_regression.

    The caller picks which G accumulation to condition: the solver passes
    G_{i+1} (the driver's advanced diagonal), the residual checks pass G_i.
    """
    return q_regression(G_values, i, W, features, ridge=ridge)


def q_malliavin(F, j, W, features, bump=None, ridge=DEFAULT_RIDGE):
    """Kernel estimate E[D_j F | F_j] via the increment-bump derivative.

    Independent of q_regression: differentiates the functional F in dB_j and
    regresses the derivative instead of the covariance target.
    """
    from .malliavin import malliavin_derivative
    D = malliavin_derivative(F, W.increments, j, bump=bump, dt=W.dt)
    return conditional_expectation(D, features, ridge=ridge)


class AdjointSolution(object):
    """Solved adjoint data for one (problem, control, ensemble) triple.

    Attributes:
        p: (M, N+1) array, p[:, i] = E[G_i | F_i]; p[:, N] is the terminal
            condition g'(X(T)) bitwise.
        h: (M, N) driver values, identically zero where the advance t+delta
            leaves the grid.
        diag_q: (M, N) advanced diagonal q_d[j] = E[G_{j+1} dB_j / dt | F_j].
        G: (M, N+1) per-path accumulations g'(X(T)) + dt * sum_{r>=i} h_r.

    Kernel columns are fitted lazily; `advanced_column(j)` returns the
    (M, N-j) block q(l, j), l = j..N-1, and `row_kernel(i, cols)` the row
    q(t_i, s_j) for j in cols.  Regression coefficient tables are kept so
    the whole G functional can be re-evaluated under bumped increments with
    every conditional-expectation surrogate frozen (`reevaluate_G`), which
    is what the Malliavin kernel estimator differentiates.
    """

    def __init__(self, spec, grid, delay, X, u, W, degree, ridge):
        self.spec = spec
        self.grid = grid
        self.delay = delay
        self.X = X
        self.u = np.asarray(u, dtype=float)
        self.W = W
        self.degree = degree
        self.ridge = ridge
        M, N = W.M, grid.N
        self.p = np.full((M, N + 1), np.nan)
        self.h = np.full((M, N), np.nan)
        self.diag_q = np.full((M, N), np.nan)
        self.G = np.full((M, N + 1), np.nan)
        self.solved_from = N + 1          # lowest solved time index so far
        self._p_coef = [None] * (N + 1)
        self._diag_coef = [None] * N
        self._col_coef = {}
        self._col_cache = {}

    def features(self, j):
        """Regression design at index j (state-augmented basis)."""
        return regression_features(self.W, j, self.X, self.degree)

    def _fit(self, targets, j, coef_sink=None, key=None):
        feats = self.features(j)
        M = feats.shape[0]
        flat = np.asarray(targets, dtype=float).reshape(M, -1)
        coef = _solve_ridge(feats, flat, self.ridge)
        if coef_sink is not None:
            coef_sink[key] = coef
        fitted = feats @ coef
        return fitted.reshape(np.shape(targets)), coef

    def advanced_column(self, j):
        """Advanced kernel column q(l, j) = E[G_{l+1} dB_j/dt | F_j], l >= j."""
        if j in self._col_cache:
            return self._col_cache[j]
        if j + 1 < self.solved_from:
            raise OrderingError(
                "kernel column %d requested before G is solved past %d"
                % (j, self.solved_from))
        targets = self.G[:, j + 1:] * (self.W.increments[:, j] / self.W.dt)[:, None]
        fitted, coef = self._fit(targets, j)
        self._col_coef[j] = coef
        self._col_cache[j] = fitted
        return fitted

    def row_kernel(self, i, cols):
        """Row q(t_i, s_j) for j in cols (each j >= i), shape (M, len(cols))."""
        out = np.empty((self.W.M, len(cols)))
        for a, j in enumerate(cols):
            if j < i:
                raise ValueError("row kernel wants j >= i, got j=%d < i=%d" % (j, i))
            out[:, a] = q_regression(self.G[:, i], j, self.W, self.features(j),
                                     ridge=self.ridge)
        return out

    def materialize_kernel(self):
        """Fit and cache every advanced column (the --full-kernel path)."""
        for j in range(self.grid.N):
            self.advanced_column(j)
        return self._col_cache

    def reevaluate_G(self, increments):
        """Re-evaluate the G accumulations under different increments.

        The state is re-simulated under the same control and the driver is
        re-assembled with every regression surrogate frozen: fitted values
        are produced by applying the stored coefficient tables to the
        features of the perturbed paths.  This makes G a genuine path
        functional of the increments, which is what q_malliavin bumps.
        """
        from .core import BrownianEnsemble
        grid, delay, spec = self.grid, self.delay, self.spec
        N, dt, k = grid.N, grid.dt, delay.k
        Wb = BrownianEnsemble(np.asarray(increments, dtype=float), dt)
        Xb = simulate_state(spec, grid, delay, self.u, Wb)
        M = Wb.M
        feats = [regression_features(Wb, j, Xb, self.degree) for j in range(N)]
        pb = np.empty((M, N + 1))
        pb[:, N] = evalc(spec.g_x, Xb.terminal)
        Gb = np.empty((M, N + 1))
        Gb[:, N] = pb[:, N]
        diag_b = np.empty((M, N))

        def col_getter(j):
            coef = self._col_coef.get(j)
            if coef is None:
                # the base solve never consumed this column (structurally
                # zero sigma kernel terms); treat it as absent
                return np.zeros((M, N - j))
            return feats[j] @ coef

        for i in range(N - 1, -1, -1):
            diag_b[:, i] = (feats[i] @ self._diag_coef[i]
                            if self._diag_coef[i] is not None
                            else np.zeros(M))
            j = i + k
            if j <= N - 1:
                hcol = hamiltonian_assembly(
                    grid, j, Xb.at(i), self.u[j], pb, diag_b[:, j], col_getter,
                    spec.f_x, spec.b_x, spec.sigma_x, spec.b_tx, spec.sigma_tx)
            else:
                hcol = np.zeros(M)
            Gb[:, i] = Gb[:, i + 1] + dt * hcol
            pcoef = self._p_coef[i]
            pb[:, i] = feats[i] @ pcoef if pcoef is not None else Gb[:, i]
        return Gb

    def row_functional(self, i):
        """Path functional inc -> G_i(inc) with frozen regressions."""
        def F(increments):
            return self.reevaluate_G(increments)[:, i]
        return F


def driver_h(spec, grid, delay, X, u, adj, i):
    """Driver values h(t_i) per path, from already-solved adjoint data.

    Zero whenever the advanced index i+k exceeds the last control cell N-1.

    Raises:
        OrderingError: the block containing the advanced data is not solved.
    """
    N, k = grid.N, delay.k
    j = i + k
    if j > N - 1:
        return np.zeros(adj.W.M)
    if j + 1 < adj.solved_from:
        raise OrderingError(
            "driver at index %d needs adjoint data from index %d, solved only from %d"
            % (i, j + 1, adj.solved_from))
    u = np.asarray(u, dtype=float)
    return hamiltonian_assembly(
        grid, j, X.at(i), u[j], adj.p, adj.diag_q[:, j], adj.advanced_column,
        spec.f_x, spec.b_x, spec.sigma_x, spec.b_tx, spec.sigma_tx)


def solve_adjoint(spec, grid, delay, X, u, W, degree=2, ridge=DEFAULT_RIDGE,
                  full_kernel=False, debug=False):
    """Solve the advanced adjoint equation backward in delta-blocks.

    Args:
        X: StatePaths simulated under (u, W).
        degree: regression basis degree (<= 4).
        ridge: least-squares regularization.
        full_kernel: fit and cache every advanced kernel column.
        debug: assert after every index that no unsolved (NaN-poisoned)
            value leaked into the driver.

    Returns:
        AdjointSolution.
    """
    adj = AdjointSolution(spec, grid, delay, X, u, W, degree, ridge)
    N, dt, k = grid.N, grid.dt, delay.k
    gx = evalc(spec.g_x, X.terminal)
    adj.G[:, N] = gx
    adj.p[:, N] = gx                      # terminal condition, bitwise
    adj.solved_from = N
    u = adj.u
    for i in range(N - 1, -1, -1):
        # the advanced diagonal at i conditions G_{i+1}, already accumulated
        adj.diag_q[:, i], dcoef = adj._fit(
            adj.G[:, i + 1] * (W.increments[:, i] / dt), i)
        adj._diag_coef[i] = dcoef
        hcol = driver_h(spec, grid, delay, X, u, adj, i)
        if debug and not np.all(np.isfinite(hcol)):
            raise OrderingError("driver at index %d read an unsolved value" % i)
        adj.h[:, i] = hcol
        adj.G[:, i] = adj.G[:, i + 1] + dt * hcol
        adj.p[:, i], pcoef = adj._fit(adj.G[:, i], i)
        adj._p_coef[i] = pcoef
        adj.solved_from = i
    if not np.all(np.isfinite(adj.p)):
        raise OrderingError("adjoint solve left unsolved values")
    if full_kernel:
        adj.materialize_kernel()
    return adj


def bsvie_residual(adj, i):
    """Sample mean and stderr of the backward-equation defect at index i.

    The defect per path is p(t_i) - [G_i - sum_{j>=i} q(t_i, s_j) dB_j]; the
    martingale term must annihilate in expectation.
    """
    N = adj.grid.N
    cols = list(range(i, N))
    qrow = adj.row_kernel(i, cols)
    mart = (qrow * adj.W.increments[:, i:N]).sum(axis=1)
    defect = adj.p[:, i] - adj.G[:, i] + mart
    M = defect.shape[0]
    return float(defect.mean()), float(defect.std(ddof=1) / np.sqrt(M))
