"""Weighted logistic regression by iteratively reweighted least squares.

Responses may be fractional (quasi-binomial), which the sequential
regression step of the TMLE needs.  Offsets are supported for the
fluctuation submodels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, xlogy

COEF_BOUND = 20.0
PROB_BOUNDS = (0.005, 0.995)
MAX_ITER = 100
SCORE_TOL = 1e-8
DEVIANCE_RTOL = 1e-10
RIDGE = 1e-8


class GLMError(ValueError):
    pass


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    n_iter: int
    deviance: float
    clipped: bool = False


def _deviance(y, mu, w):
    # Saturated fitted values make y/mu read 0/0; the term is zero there.
    mu = np.clip(mu, 1e-300, 1.0 - 1e-16)
    return 2.0 * float(np.sum(w * (xlogy(y, y / mu) + xlogy(1 - y, (1 - y) / (1 - mu)))))


def fit_logistic(x, y, weights=None, offset=None) -> LogisticFit:
    """Maximize the weighted (quasi-)Bernoulli log-likelihood.

    ``x`` must already contain the intercept column (first).  Coefficients
    are held inside ``[-20, 20]`` so that separated data give a finite,
    flagged fit instead of diverging.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if n < 1 or len(y) != n or len(w) != n or len(off) != n:
        raise GLMError("dimension mismatch")
    if np.isnan(x).any() or np.isnan(y).any() or np.isnan(w).any() or np.isnan(off).any():
        raise GLMError("NaN in inputs")
    if np.any(w < 0):
        raise GLMError("negative weights")
    if np.any((y < 0) | (y > 1)):
        raise GLMError("responses must lie in [0, 1]")
    wsum = w.sum()
    if not wsum > 0:
        raise GLMError("zero total weight")

    ybar = float(np.dot(w, y) / wsum)
    if offset is None and (ybar <= 0.0 or ybar >= 1.0):
        # complete separation on the intercept: the limit is +/- infinity
        beta = np.zeros(p)
        beta[0] = COEF_BOUND if ybar >= 1.0 else -COEF_BOUND
        mu = expit(x @ beta)
        return LogisticFit(beta, True, 0, _deviance(y, mu, w), clipped=True)

    beta = np.zeros(p)
    if offset is None:
        beta[0] = np.log(ybar / (1 - ybar))
    eta = x @ beta + off
    mu = expit(eta)
    dev = _deviance(y, mu, w)
    converged = False
    it = 0
    ridge = RIDGE * np.eye(p)
    for it in range(1, MAX_ITER + 1):
        resid = w * (y - mu)
        score = x.T @ resid
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            it -= 1
            break
        v = w * mu * (1 - mu)
        info = (x * v[:, None]).T @ x + ridge
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        while True:
            cand = np.clip(beta + t * step, -COEF_BOUND, COEF_BOUND)
            eta_c = x @ cand + off
            mu_c = expit(eta_c)
            dev_c = _deviance(y, mu_c, w)
            if dev_c <= dev * (1 + 1e-12) or t < 1e-4:
                break
            t *= 0.5
        change = abs(dev - dev_c) / (abs(dev_c) + 0.1)
        beta, mu, dev = cand, mu_c, dev_c
        if change < DEVIANCE_RTOL:
            converged = True
            break
    clipped = bool(np.any(np.abs(beta) >= COEF_BOUND))
    if not np.all(np.isfinite(beta)):
        converged = False
    return LogisticFit(beta, converged, it, dev, clipped)


def linear_predictor(fit: LogisticFit, x) -> np.ndarray:
    return np.asarray(x, dtype=float) @ fit.coefficients


def predict_raw(fit: LogisticFit, x) -> np.ndarray:
    """Unclipped fitted probabilities for the rows of ``x``."""
    return expit(linear_predictor(fit, x))


def predict_many(fit: LogisticFit, x) -> np.ndarray:
    lo, hi = PROB_BOUNDS
    return np.clip(predict_raw(fit, x), lo, hi)


def predict(fit: LogisticFit, x_row) -> float:
    x_row = np.asarray(x_row, dtype=float)
    if x_row.shape != fit.coefficients.shape:
        raise GLMError("dimension mismatch")
    lo, hi = PROB_BOUNDS
    return float(np.clip(expit(x_row @ fit.coefficients), lo, hi))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p / (1 - p))
