"""Forward simulation: delayed Volterra state, first variation, cost.

The state equation is discretized by a left-point Euler scheme,

    X(t_i) = x0(t_i) + sum_{j<i} b(t_i, t_j, X(t_j - delta), u_j) dt
                     + sum_{j<i} sigma(t_i, t_j, X(t_j - delta), u_j) dB_j,

with X(t) = x0(t) on [-delta, 0].  The kernel's first argument is the
observation time t_i, so every time level re-sums its whole past: the scheme
is O(N^2) per path by construction, vectorized across paths.

Paths are stored with the initial segment attached: column c of the storage
array holds the state at time index c - k (k = delay steps).  That makes the
delayed argument of cell j simply column j, for any k.
"""

import numpy as np

from .core import (ConsistencyError, DivergenceError, ProjectionError, evalc)

__all__ = ["StatePaths", "VariationPaths", "simulate_state", "simulate_variation",
           "cost", "cost_paths", "directional_derivative_fd"]


class StatePaths(object):
    """Per-path trajectories on the grid including the initial segment.

    Attributes:
        values: (M, k+N+1) array; column i+k is the path value at time index
            i, for i = -k..N.
        k: delay steps.
    """

    def __init__(self, values, k):
        self.values = values
        self.k = int(k)
        self.M = values.shape[0]
        self.N = values.shape[1] - 1 - self.k

    def at(self, i):
        """Column of values at time index i (negative i hits the segment)."""
        if not (-self.k <= i <= self.N):
            raise IndexError("time index %d outside [-%d, %d]" % (i, self.k, self.N))
        return self.values[:, i + self.k]

    def delayed(self, j):
        """State at t_j - delta, the coefficient argument of cell j."""
        return self.values[:, j]

    @property
    def terminal(self):
        return self.values[:, -1]


class VariationPaths(StatePaths):
    """First-variation paths; same layout, zero initial segment."""
    pass


def _segment_times(grid, delay):
    # times for storage columns 0..k+N, i.e. indices -k..N
    return np.arange(-delay.k, grid.N + 1) * grid.T / grid.N


def simulate_state(spec, grid, delay, u, W):
    """Simulate the controlled delayed Volterra equation.

    Args:
        spec: ProblemSpec.
        grid, delay: from build_grid.
        u: control path, shape (N,).
        W: BrownianEnsemble with N increments per path.

    Returns:
        StatePaths.

    Raises:
        DivergenceError: a path produced a non-finite value; the message
            reports the first offending (path, time index).
    """
    N, dt, k = grid.N, grid.dt, delay.k
    u = np.asarray(u, dtype=float)
    if u.shape != (N,):
        raise ValueError("control path must have shape (%d,)" % N)
    if W.N != N:
        raise ValueError("ensemble has %d increments per path, grid wants %d" % (W.N, N))
    M = W.M
    dB = W.increments
    seg_times = _segment_times(grid, delay)
    X = np.empty((M, k + N + 1))
    X[:, :k + 1] = evalc(spec.x0, seg_times[:k + 1])[None, :]
    times = grid.times
    for i in range(1, N + 1):
        tj = times[:i]
        D = X[:, :i]                       # delayed states of cells 0..i-1
        uj = u[:i]
        b = evalc(spec.b, times[i], tj[None, :], D, uj[None, :])
        sg = evalc(spec.sigma, times[i], tj[None, :], D, uj[None, :])
        col = evalc(spec.x0, times[i]) + b.sum(axis=1) * dt + (sg * dB[:, :i]).sum(axis=1)
        if not np.all(np.isfinite(col)):
            m = int(np.flatnonzero(~np.isfinite(col))[0])
            raise DivergenceError("non-finite state at path %d, time index %d" % (m, i))
        X[:, i + k] = col
    return StatePaths(X, k)


def _variation_volterra(spec, grid, delay, u, beta, X, W):
    # exact derivative of the discrete state with respect to the perturbation
    N, dt, k = grid.N, grid.dt, delay.k
    dB = W.increments
    times = grid.times
    Y = np.zeros((W.M, k + N + 1))
    for i in range(1, N + 1):
        tj = times[:i][None, :]
        D = X.values[:, :i]
        YD = Y[:, :i]
        uj = u[:i][None, :]
        bx = evalc(spec.b_x, times[i], tj, D, uj)
        bu = evalc(spec.b_u, times[i], tj, D, uj)
        sx = evalc(spec.sigma_x, times[i], tj, D, uj)
        su = evalc(spec.sigma_u, times[i], tj, D, uj)
        Y[:, i + k] = ((bx * YD + bu * beta[:i]).sum(axis=1) * dt
                       + ((sx * YD + su * beta[:i]) * dB[:, :i]).sum(axis=1))
    return Y


def _variation_euler(spec, grid, delay, u, beta, X, W):
    # Euler scheme for the differential form dY; the kernel-derivative
    # integrals enter the drift as running sums.
    N, dt, k = grid.N, grid.dt, delay.k
    dB = W.increments
    times = grid.times
    Y = np.zeros((W.M, k + N + 1))
    for i in range(N):
        ti = times[i]
        Di = X.values[:, i]
        Ydi = Y[:, i]
        diag_drift = (evalc(spec.b_x, ti, ti, Di, u[i]) * Ydi
                      + evalc(spec.b_u, ti, ti, Di, u[i]) * beta[i])
        diag_diff = (evalc(spec.sigma_x, ti, ti, Di, u[i]) * Ydi
                     + evalc(spec.sigma_u, ti, ti, Di, u[i]) * beta[i])
        if i > 0:
            tj = times[:i][None, :]
            D = X.values[:, :i]
            YD = Y[:, :i]
            uj = u[:i][None, :]
            btx = evalc(spec.b_tx, ti, tj, D, uj)
            btu = evalc(spec.b_tu, ti, tj, D, uj)
            stx = evalc(spec.sigma_tx, ti, tj, D, uj)
            stu = evalc(spec.sigma_tu, ti, tj, D, uj)
            kernel_drift = ((btx * YD + btu * beta[:i]).sum(axis=1) * dt
                            + ((stx * YD + stu * beta[:i]) * dB[:, :i]).sum(axis=1))
        else:
            kernel_drift = 0.0
        Y[:, i + 1 + k] = (Y[:, i + k] + (diag_drift + kernel_drift) * dt
                           + diag_diff * dB[:, i])
    return Y


def simulate_variation(spec, grid, delay, u, beta, X, W, consistency_tol=None):
    """Directional derivative process of the state along a perturbation.

    Computes Y(t) = d/d eps X^{u + eps*beta}(t) at eps = 0 by differentiating
    the discrete Volterra sum in the control (the exact pathwise derivative
    of `simulate_state`).  When `consistency_tol` is given, the equivalent
    Euler discretization of the differential form dY is also run and the two
    must agree within the tolerance; the forms coincide exactly only for
    kernels without first-argument dependence, so tests enable the check on
    the LQ problems.

    Args:
        X: StatePaths produced by simulate_state under the same (u, W).
        consistency_tol: optional float, e.g. 1e-10.

    Raises:
        ConsistencyError: the two discretizations disagree beyond tolerance.
    """
    N = grid.N
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (N,):
        raise ValueError("perturbation must have shape (%d,)" % N)
    Y = _variation_volterra(spec, grid, delay, u, beta, X, W)
    if consistency_tol is not None:
        Yb = _variation_euler(spec, grid, delay, u, beta, X, W)
        gap = float(np.max(np.abs(Y - Yb)))
        if gap > consistency_tol:
            raise ConsistencyError(
                "variation discretizations disagree: max gap %.3g > %.3g"
                % (gap, consistency_tol))
    return VariationPaths(Y, delay.k)


def cost_paths(spec, grid, delay, u, X):
    """Per-path cost sum_i f(t_i, X(t_i - delta), u_i) dt + g(X(T))."""
    N, dt = grid.N, grid.dt
    u = np.asarray(u, dtype=float)
    fvals = evalc(spec.f, grid.times[:N][None, :], X.values[:, :N], u[None, :])
    return fvals.sum(axis=1) * dt + evalc(spec.g, X.terminal)


def cost(spec, grid, delay, u, X):
    """Monte Carlo cost estimate.

    Returns:
        (J, stderr): sample mean of the per-path cost and its standard error.
    """
    J = cost_paths(spec, grid, delay, u, X)
    M = J.shape[0]
    stderr = float(J.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return float(J.mean()), stderr


def directional_derivative_fd(spec, grid, delay, u, beta, W, eps):
    """Central-difference directional derivative of the cost.

    Uses common random numbers: both bumped controls are simulated under the
    same ensemble W.

    Returns:
        [J(u + eps*beta) - J(u - eps*beta)] / (2*eps) as a scalar.

    Raises:
        ProjectionError: u +- eps*beta leaves [u_min, u_max]; shrink eps.
    """
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    hi = u + eps * beta
    lo = u - eps * beta
    for cand, tag in ((hi, "+"), (lo, "-")):
        if cand.min() < spec.u_min or cand.max() > spec.u_max:
            raise ProjectionError(
                "u %s eps*beta leaves [%g, %g]; shrink eps" % (tag, spec.u_min, spec.u_max))
    Jhi = cost_paths(spec, grid, delay, hi, simulate_state(spec, grid, delay, hi, W))
    Jlo = cost_paths(spec, grid, delay, lo, simulate_state(spec, grid, delay, lo, W))
    return float((Jhi - Jlo).mean() / (2.0 * eps))
