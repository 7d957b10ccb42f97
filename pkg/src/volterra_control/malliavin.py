"""Discrete Wiener-space calculus on increment ensembles.

A path functional is any callable mapping the full increment array (M, N) to
per-path scalars (M,).  Its Malliavin derivative at time index j is taken as
the central-difference sensitivity to the single increment dB_j, which for a
simple functional sum_i h(t_i) dB_i returns h(t_j) exactly.

Conditional expectations given F_{t_j} are least-squares Monte Carlo fits on
the polynomial basis {1, B(t_j), .., B(t_j)^d, X(t_j), .., X(t_j)^d}.  The
information set at index j contains increments dB_0..dB_{j-1} only, so the
features never see dB_j itself; that left-closed convention is what makes
the reconstructed Clark-Ocone sum an Ito sum.
"""

import math

import numpy as np

from .core import ConditioningError, VolterraError

__all__ = ["malliavin_derivative", "malliavin_derivative_matrix",
           "conditional_expectation", "regression_features", "fit_noise_floor",
           "clark_ocone_reconstruct", "duality_check", "catalog_functionals",
           "DEFAULT_RIDGE", "default_bump"]

DEFAULT_RIDGE = 1e-8


def default_bump(dt):
    """Default increment bump 1e-4 * sqrt(dt)."""
    return 1e-4 * math.sqrt(dt)


def malliavin_derivative(F, increments, j, bump=None, dt=None):
    """Central-difference derivative of a path functional in dB_j.

    Args:
        F: callable, increments (M, N) -> per-path values (M,).
        increments: (M, N) array.
        j: time index, 0 <= j < N.
        bump: increment bump; defaults to 1e-4*sqrt(dt) (dt required then).

    Returns:
        (M,) array [F(dB_j + bump) - F(dB_j - bump)] / (2*bump).

    Raises:
        VolterraError: F returned a non-finite value at a bumped point.
    """
    increments = np.asarray(increments, dtype=float)
    N = increments.shape[-1]
    if not (0 <= j < N):
        raise ValueError("time index %d outside [0, %d)" % (j, N))
    if bump is None:
        if dt is None:
            raise ValueError("need either bump or dt")
        bump = default_bump(dt)
    hi = increments.copy()
    hi[..., j] += bump
    lo = increments.copy()
    lo[..., j] -= bump
    Fhi = np.asarray(F(hi), dtype=float)
    Flo = np.asarray(F(lo), dtype=float)
    if not (np.all(np.isfinite(Fhi)) and np.all(np.isfinite(Flo))):
        raise VolterraError("functional returned a non-finite value at bumped dB_%d" % j)
    return (Fhi - Flo) / (2.0 * bump)


def malliavin_derivative_matrix(F, increments, dt, bump=None):
    """(M, N) matrix of derivatives, one column per time index."""
    increments = np.asarray(increments, dtype=float)
    N = increments.shape[-1]
    out = np.empty(increments.shape)
    for j in range(N):
        out[..., j] = malliavin_derivative(F, increments, j, bump=bump, dt=dt)
    return out


def regression_features(W, j, X=None, degree=2):
    """Feature matrix for conditioning at index j.

    Columns: constant, B(t_j)^1..B(t_j)^degree and, when state paths are
    given, X(t_j)^1..X(t_j)^degree.  B(t_j) sums increments strictly before
    index j, so the features are F_{t_j}-measurable.
    """
    if not (1 <= degree <= 4):
        raise ValueError("basis degree must be in 1..4, got %r" % (degree,))
    cols = [np.ones(W.M)]
    B = W.cumulative[:, j]
    for d in range(1, degree + 1):
        cols.append(B ** d)
    if X is not None:
        Xj = X.at(j)
        for d in range(1, degree + 1):
            cols.append(Xj ** d)
    return np.column_stack(cols)


def _solve_ridge(features, targets, ridge):
    gram = features.T @ features
    gram[np.diag_indices_from(gram)] += ridge
    rhs = features.T @ targets
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        norms = np.linalg.norm(features, axis=0)
        bad = int(np.argmax(~np.isfinite(norms))) if not np.all(np.isfinite(norms)) \
            else int(np.argmax(norms))
        raise ConditioningError(
            "regression design unusable even with ridge %g; offending column %d"
            % (ridge, bad))
    return coef


def conditional_expectation(target, features, ridge=DEFAULT_RIDGE):
    """Least-squares projection of per-path targets onto the feature span.

    Args:
        target: (M,) or (M, L) array of per-path values.
        features: (M, p) design matrix from regression_features.
        ridge: Tikhonov weight added to the normal equations.

    Returns:
        Fitted per-path values, same shape as target.

    Raises:
        ConditioningError: non-finite design or singular normal equations.
    """
    features = np.asarray(features, dtype=float)
    if not np.all(np.isfinite(features)):
        bad = int(np.flatnonzero(~np.isfinite(features).all(axis=0))[0])
        raise ConditioningError("non-finite feature column %d" % bad)
    target = np.asarray(target, dtype=float)
    M, p = features.shape
    if M < 10 * p:
        raise ValueError("need at least 10 paths per basis function (M=%d, p=%d)" % (M, p))
    flat = target.reshape(M, -1)
    coef = _solve_ridge(features, flat, ridge)
    fitted = features @ coef
    return fitted.reshape(target.shape)


def fit_noise_floor(target, features, ridge=DEFAULT_RIDGE):
    """Estimated RMS of the in-sample noise of the fitted values.

    Residual RMS scaled by sqrt(dof/M) where dof is the trace of the hat
    matrix; used as the Monte Carlo floor when two kernel estimators are
    compared on a problem whose true kernel vanishes.
    """
    features = np.asarray(features, dtype=float)
    target = np.asarray(target, dtype=float)
    M = features.shape[0]
    flat = target.reshape(M, -1)
    coef = _solve_ridge(features, flat, ridge)
    resid = flat - features @ coef
    gram = features.T @ features
    gram[np.diag_indices_from(gram)] += ridge
    # trace of Phi (Phi'Phi + ridge I)^{-1} Phi'
    dof = float(np.trace(np.linalg.solve(gram, features.T @ features)))
    rms_resid = math.sqrt(float(np.mean(resid ** 2)))
    return rms_resid * math.sqrt(max(dof, 1.0) / M)


def clark_ocone_reconstruct(F, W, X=None, degree=2, bump=None, ridge=DEFAULT_RIDGE):
    """Per-path error of the Clark-Ocone reconstruction of a functional.

    Builds R_m = mean(F) + sum_j E[D_j F | F_j](m) * dB_j(m) with the
    conditional expectations fitted by regression and returns F_m - R_m.
    """
    inc = W.increments
    vals = np.asarray(F(inc), dtype=float)
    D = malliavin_derivative_matrix(F, inc, W.dt, bump=bump)
    R = np.full(W.M, vals.mean())
    for j in range(W.N):
        fitted = conditional_expectation(D[:, j], regression_features(W, j, X, degree),
                                         ridge=ridge)
        R = R + fitted * inc[:, j]
    return vals - R


def duality_check(F, phi, W, X=None, degree=2, bump=None, ridge=DEFAULT_RIDGE):
    """Check E[F * int phi dB] = E[int E[D_t F | F_t] phi(t) dt].

    Args:
        F: path functional.
        phi: deterministic integrand sampled at the left points, shape (N,).

    Returns:
        (lhs, rhs, gap, stderr) where stderr is the standard error of the
        per-path paired difference.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (W.N,):
        raise ValueError("phi must be sampled on the N left points")
    inc = W.increments
    vals = np.asarray(F(inc), dtype=float)
    lhs_paths = vals * (inc * phi).sum(axis=1)
    D = malliavin_derivative_matrix(F, inc, W.dt, bump=bump)
    rhs_paths = np.zeros(W.M)
    for j in range(W.N):
        fitted = conditional_expectation(D[:, j], regression_features(W, j, X, degree),
                                         ridge=ridge)
        rhs_paths = rhs_paths + fitted * phi[j] * W.dt
    diffs = lhs_paths - rhs_paths
    stderr = float(diffs.std(ddof=1) / math.sqrt(W.M))
    return (float(lhs_paths.mean()), float(rhs_paths.mean()),
            float(diffs.mean()), stderr)


def catalog_functionals(grid):
    """The three reference functionals used by the duality checks.

    Returns:
        dict name -> callable on increment arrays: B(T), B(T)^2 and the
        Wiener integral int_0^T t dB(t).
    """
    tleft = grid.times[:grid.N]

    def terminal(inc):
        return inc.sum(axis=-1)

    def terminal_squared(inc):
        return inc.sum(axis=-1) ** 2

    def ramp_integral(inc):
        return (inc * tleft).sum(axis=-1)

    return {"B(T)": terminal, "B(T)^2": terminal_squared, "int t dB": ramp_integral}
