"""Moments of a :class:`DensityApprox` and their small-sample bias adjustment."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from ._accel import njit, pick
from .density import DensityApprox, QuantileGrid, fit_pdf
from .taus import tau_grid

log = logging.getLogger(__name__)

# (intercept, skew, excess kurtosis) multipliers of the variance
VAR_COEF = (1.0023, -0.0021, 0.0022)
# (skew, skew^2, excess kurtosis)
SKEW_COEF = (0.9950, 0.0261, 0.0107)
# (excess kurtosis, excess kurtosis^2, skew)
KURT_COEF = (1.4185, 0.0466, -0.7395)

KURT_FLOOR = 1.0

REFIT_DF = np.array([5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20,
                     30, 40, 50, 60, 70, 80, 90, 100, 1000, 10000], dtype=np.float64)


class DegenerateDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class MomentSet:
    m0: float
    m1: float
    m2: float
    m3: float
    m4: float
    mass: float
    variance: float
    skewness: float
    kurtosis: float
    variance_adj: float
    skewness_adj: float
    kurtosis_adj: float
    fallback: bool = False

    @property
    def mean(self):
        return self.m1

    @property
    def volatility(self):
        return float(np.sqrt(self.variance))


def _power_sums_np(x, d):
    x1, x2 = x[:-1], x[1:]
    b = (d[1:] - d[:-1]) / (x2 - x1)
    a = d[:-1] - b * x1
    out = np.empty(5)
    p1, p2 = x1.copy(), x2.copy()
    for z in range(5):
        # int (a + b x) x^z dx
        q1, q2 = p1 * x1, p2 * x2
        out[z] = np.sum(a * (p2 - p1) / (z + 1) + b * (q2 - q1) / (z + 2))
        p1, p2 = q1, q2
    return out


@njit
def _power_sums_nb(x, d):
    out = np.zeros(5)
    for i in range(x.shape[0] - 1):
        x1 = x[i]
        x2 = x[i + 1]
        b = (d[i + 1] - d[i]) / (x2 - x1)
        a = d[i] - b * x1
        p1 = x1
        p2 = x2
        for z in range(5):
            q1 = p1 * x1
            q2 = p2 * x2
            out[z] += a * (p2 - p1) / (z + 1) + b * (q2 - q1) / (z + 2)
            p1 = q1
            p2 = q2
    return out


power_sums = pick(_power_sums_nb, _power_sums_np)


def central_moments(m1, m2, m3, m4):
    var = m2 - m1 * m1
    if not var > 0.0:
        raise DegenerateDistributionError(f"non-positive variance {var!r}")
    skew = (m3 - 3.0 * m1 * var - m1**3) / var**1.5
    kurt = (m4 - 4.0 * m1 * m3 + 6.0 * m1**2 * m2 - 3.0 * m1**4) / var**2
    return var, skew, kurt


def adjust_moments(v, s, k):
    """Bias-adjusted ``(variance, skewness, kurtosis)``; works on arrays."""
    v = np.asarray(v, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    ke = np.asarray(k, dtype=np.float64) - 3.0
    if np.any(v <= 0):
        raise DegenerateDistributionError("variance must be positive")
    v_adj = v * (VAR_COEF[0] + VAR_COEF[1] * s + VAR_COEF[2] * ke)
    s_adj = SKEW_COEF[0] * s + SKEW_COEF[1] * s**2 + SKEW_COEF[2] * ke
    k_adj = 3.0 + KURT_COEF[0] * ke + KURT_COEF[1] * ke**2 + KURT_COEF[2] * s
    k_adj = np.maximum(k_adj, KURT_FLOOR)
    if v_adj.ndim == 0:
        return float(v_adj), float(s_adj), float(k_adj)
    return v_adj, s_adj, k_adj


def raw_moments(x, d, p_lower, x_min, p_upper, x_max):
    """Non-central moments with point masses at the support ends.

    Returns ``(integral, total_mass, m1, m2, m3, m4)`` where m1..m4 are
    normalised by the total mass.
    """
    sums = power_sums(np.ascontiguousarray(x, dtype=np.float64),
                      np.ascontiguousarray(d, dtype=np.float64))
    m0 = sums[0]
    mass = m0 + p_lower + p_upper
    ms = [(sums[z] + p_lower * x_min**z + p_upper * x_max**z) / mass for z in range(1, 5)]
    return (m0, mass, *ms)


def integrate_moments(dens: DensityApprox) -> MomentSet:
    m0, mass, m1, m2, m3, m4 = raw_moments(dens.x, dens.density, dens.p_lower,
                                           dens.x_min, dens.p_upper, dens.x_max)
    var, skew, kurt = central_moments(m1, m2, m3, m4)
    v_adj, s_adj, k_adj = adjust_moments(var, skew, kurt)
    return MomentSet(m0, m1, m2, m3, m4, mass, var, skew, kurt,
                     v_adj, s_adj, k_adj, dens.fallback)


def moments_from_quantiles(values, taus=None, **kw) -> MomentSet:
    taus = tau_grid(taus)
    return integrate_moments(fit_pdf(QuantileGrid(taus, values), **kw))


@dataclass
class AdjustmentFit:
    variance: np.ndarray   # intercept, skew, excess kurtosis (ratio regression)
    skewness: np.ndarray   # skew, skew^2, excess kurtosis
    kurtosis: np.ndarray   # excess kurtosis, excess kurtosis^2, skew
    r2: dict
    condition: dict
    n_used: int
    n_drawn: int


def nct_moments(df, nc):
    """Mean, variance, skewness and kurtosis of the non-central t (df > 4).

    Computed from raw moments ``E[T^k] = (df/2)^(k/2) G((df-k)/2) / G(df/2) E[(Z+nc)^k]``.
    scipy's ``nct.stats`` returns a wrong kurtosis at exactly ``nc = 0``.
    """
    df = np.asarray(df, dtype=np.float64)
    mu = np.asarray(df * 0 + nc, dtype=np.float64)
    c = lambda k: np.exp(0.5 * k * np.log(df / 2) + special.gammaln((df - k) / 2)
                         - special.gammaln(df / 2))
    e1 = c(1) * mu
    e2 = c(2) * (mu**2 + 1)
    e3 = c(3) * (mu**3 + 3 * mu)
    e4 = c(4) * (mu**4 + 6 * mu**2 + 3)
    var = e2 - e1**2
    skew = (e3 - 3 * e1 * e2 + 2 * e1**3) / var**1.5
    kurt = (e4 - 4 * e1 * e3 + 6 * e1**2 * e2 - 3 * e1**4) / var**2
    return e1, var, skew, kurt


def _ols(X, y, strict=True):
    cond = float(np.linalg.cond(X))
    if not np.isfinite(cond) or cond > 1e12:
        if not strict:
            return np.full(X.shape[1], np.nan), float("nan"), cond
        raise np.linalg.LinAlgError(f"degenerate design matrix, condition number {cond:.3g}")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    tss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - resid @ resid / tss if tss > 0 else float("nan")
    return beta, float(r2), cond


def refit_adjustment(n_dist=10_000, seed=0, taus=None, scale=0.1,
                     nc_range=(-0.5, 5.0), df_choices=REFIT_DF,
                     max_kurtosis=20.0, chunk=5000, strict=True) -> AdjustmentFit:
    """Re-estimate the moment adjustment on simulated non-central t laws.

    Quantiles of each law go through the unadjusted quantiles-to-moments
    pipeline; theoretical moments are regressed on the naive ones. A
    degenerate regression raises unless ``strict`` is off, in which case its
    coefficients are NaN and only the condition number is reported.
    """
    taus = tau_grid(taus)
    rng = np.random.default_rng(seed)
    df = rng.choice(np.asarray(df_choices, dtype=np.float64), n_dist)
    nc = rng.uniform(nc_range[0], nc_range[1], n_dist)
    _, v_t, s_t, k_t = nct_moments(df, nc)
    v_t = v_t * scale**2
    keep = np.flatnonzero(np.isfinite(k_t) & (k_t <= max_kurtosis))

    naive = np.full((keep.size, 3), np.nan)
    for start in range(0, keep.size, chunk):
        idx = keep[start:start + chunk]
        q = stats.nct.ppf(taus[None, :], df[idx, None], nc[idx, None]) * scale
        for j, row in enumerate(q):
            try:
                ms = integrate_moments(fit_pdf(QuantileGrid(taus, row)))
            except (ValueError, DegenerateDistributionError):
                continue
            naive[start + j] = ms.variance, ms.skewness, ms.kurtosis
    ok = np.all(np.isfinite(naive), axis=1)
    v, s, k = naive[ok].T
    ke = k - 3.0
    vt, st, kt = v_t[keep][ok], s_t[keep][ok], k_t[keep][ok]

    bv, r2v, cv = _ols(np.column_stack([np.ones_like(s), s, ke]), vt / v, strict)
    bs, r2s, cs = _ols(np.column_stack([s, s**2, ke]), st, strict)
    bk, r2k, ck = _ols(np.column_stack([ke, ke**2, s]), kt - 3.0, strict)
    return AdjustmentFit(bv, bs, bk,
                         {"variance": r2v, "skewness": r2s, "kurtosis": r2k},
                         {"variance": cv, "skewness": cs, "kurtosis": ck},
                         int(ok.sum()), int(n_dist))


TABLE_E1_CASES = (
    ("Normal", "norm", ()),
    ("t: df=10", "t", (10,)),
    ("t: df=6", "t", (6,)),
    ("t: df=5", "t", (5,)),
    ("nct: df=5, nc=1", "nct", (5, 1)),
    ("nct: df=6, nc=3", "nct", (6, 3)),
    ("nct: df=5, nc=4", "nct", (5, 4)),
)


def table_e1(scale=0.1, taus=None):
    """Naive and adjusted moments of analytic laws pushed through the pipeline.

    Quantiles are taken at ``scale``; means are reported on that scale and
    variances on the unit scale, while skewness and kurtosis are scale free.
    """
    import pandas as pd

    taus = tau_grid(taus)
    rows = []
    for label, name, args in TABLE_E1_CASES:
        dist = getattr(stats, name)(*args)
        mt, vt, st, ekt = (float(v) for v in dist.stats(moments="mvsk"))
        ms = moments_from_quantiles(dist.ppf(taus) * scale, taus)
        rows.append({
            "dist": label,
            "m_t": mt * scale, "m": ms.mean,
            "v_t": vt, "v": ms.variance / scale**2, "v_adj": ms.variance_adj / scale**2,
            "s_t": st, "s": ms.skewness, "s_adj": ms.skewness_adj,
            "k_t": ekt + 3.0, "k": ms.kurtosis, "k_adj": ms.kurtosis_adj,
        })
    return pd.DataFrame(rows)
