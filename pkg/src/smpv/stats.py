"""Small statistical helpers shared by the checks: standard errors, verdicts, log-log fits."""

from __future__ import annotations

import numpy as np

HOLDS = "HOLDS"
VIOLATED = "VIOLATED"
INCONCLUSIVE = "INCONCLUSIVE"
VERDICTS = (HOLDS, VIOLATED, INCONCLUSIVE)


def mean_se(samples: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and its standard error along ``axis`` (zero error for one sample)."""
    a = np.asarray(samples, dtype=float)
    n = a.shape[axis]
    mean = a.mean(axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, a.std(axis=axis, ddof=1) / np.sqrt(n)


def default_tol(dt: float, paths: int, scale: float = 5.0) -> float:
    """``c (dt + M^-1/2)``."""
    return float(scale * (dt + paths ** -0.5))


def verdict(mean, stderr, tol: float) -> str:
    """Three-way decision on ``mean <= tol`` with two-standard-error bands.

    HOLDS when every upper band ``mean + 2 se`` is within ``tol``; VIOLATED
    when some lower band ``mean - 2 se`` exceeds it; INCONCLUSIVE otherwise.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    stderr = np.broadcast_to(np.asarray(stderr, dtype=float), mean.shape)
    if mean.size == 0:
        return HOLDS
    if np.any(mean - 2 * stderr > tol):
        return VIOLATED
    if np.all(mean + 2 * stderr <= tol):
        return HOLDS
    return INCONCLUSIVE


def combine_verdicts(verdicts) -> str:
    vs = list(verdicts)
    if VIOLATED in vs:
        return VIOLATED
    if INCONCLUSIVE in vs:
        return INCONCLUSIVE
    return HOLDS


def fit_loglog(x, y, y_se=None) -> dict:
    """Least-squares slope of ``log y`` against ``log x``.

    With ``y_se`` the fit is weighted by ``(y / y_se)^2`` (delta method for
    ``log y``) and the slope error follows from those weights; otherwise it
    comes from the residual scatter.  Needs at least two points.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("a slope needs at least two points")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([np.ones_like(lx), lx], axis=1)
    if y_se is not None:
        s = np.maximum(np.asarray(y_se, dtype=float) / y, 1e-300)
        w = 1.0 / s ** 2
        cov = np.linalg.inv(A.T @ (A * w[:, None]))
        coef = cov @ (A.T @ (w * ly))
        slope_se = float(np.sqrt(cov[1, 1]))
    else:
        coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
        dof = len(x) - 2
        if dof > 0:
            resid = ly - A @ coef
            cov = np.linalg.inv(A.T @ A) * (resid @ resid) / dof
            slope_se = float(np.sqrt(cov[1, 1]))
        else:
            slope_se = float("nan")
    return {"slope": float(coef[1]), "slope_stderr": slope_se, "intercept": float(coef[0])}
