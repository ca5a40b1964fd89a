"""Shared Monte Carlo helpers for the test suite."""

import numpy as np

from gst_adjust import precision


def variance_with_se(x):
    """Sample variance and its Monte Carlo standard error (fourth-moment formula)."""
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    v = float(np.mean(c**2))
    m4 = float(np.mean(c**4))
    return v, float(np.sqrt(max(m4 - v * v, 0.0) / len(x)))


def safe_corr(x, y):
    """Pearson correlation, taken as 0 when either input is constant."""
    sx, sy = np.std(x), np.std(y)
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def eif_draws(d, m, p_y, p_l, rng, arm=None):
    obs = precision.sample_observed(d, m, p_y, p_l, rng)
    return precision.eif_arrays(
        d, obs["w_code"], obs["a"], obs["c_l"], obs["l"], obs["c_y"], obs["y"], p_y, p_l, arm=arm
    )


def degenerate_w_law():
    """W, A independent fair coins and Y = 1(A = W)."""
    p_ly = {}
    for w in (0, 1):
        for a in (0, 1):
            y = int(a == w)
            p_ly[(w, a)] = {(0, y): 0.5, (1, y): 0.5}
    return precision.DiscreteDistribution.from_conditionals({0: 0.5, 1: 0.5}, p_ly, 0.5)
