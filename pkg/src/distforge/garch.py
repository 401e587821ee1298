"""GARCH(1,1)/GJR-t estimation and Monte Carlo forecasts of compounded returns."""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, special

from ._accel import njit, pick
from .taus import tau_grid

log = logging.getLogger(__name__)

MU_PREMIUM = 0.05 / 252
FALLBACK_ALPHA = 0.06
FALLBACK_BETA = 0.94
FALLBACK_DF = 4.0
MAX_PERSISTENCE = 0.999
MIN_DF = 2.05
LR_CRITICAL = 5.991  # chi2(2) 95% point


@dataclass(frozen=True)
class GarchParams:
    omega: float
    alpha: float
    beta: float
    gamma: float = 0.0
    df: float = math.inf
    mu: float = 0.0
    fallback: bool = False

    def __post_init__(self):
        if self.omega < 0 or self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("GARCH coefficients must be non-negative")
        if not self.df > 2:
            raise ValueError("degrees of freedom must exceed 2")
        if not self.fallback and self.persistence >= 1.0:
            raise ValueError("estimated model must be covariance stationary")

    @property
    def persistence(self):
        return self.alpha + 0.5 * self.gamma + self.beta

    @property
    def t_scale(self):
        """Multiplier turning a standard t draw into a unit-variance shock."""
        return 1.0 if math.isinf(self.df) else math.sqrt((self.df - 2.0) / self.df)


def fallback_params(mu=MU_PREMIUM):
    return GarchParams(0.0, FALLBACK_ALPHA, FALLBACK_BETA, 0.0, FALLBACK_DF, mu, True)


# --------------------------------------------------------------------------
# variance filter


def _filter_np(eps, omega, alpha, beta, gamma, s0):
    n = eps.size
    s2 = np.empty(n + 1)
    s2[0] = s0
    for t in range(n):
        e = eps[t]
        a = alpha + gamma if e < 0.0 else alpha
        s2[t + 1] = omega + a * e * e + beta * s2[t]
    return s2


@njit
def _filter_nb(eps, omega, alpha, beta, gamma, s0):
    n = eps.shape[0]
    s2 = np.empty(n + 1)
    s2[0] = s0
    for t in range(n):
        e = eps[t]
        a = alpha + gamma if e < 0.0 else alpha
        s2[t + 1] = omega + a * e * e + beta * s2[t]
    return s2


garch_filter = pick(_filter_nb, _filter_np)


def filter_variance(params: GarchParams, returns, s0=None):
    """Conditional variances; element ``t`` is the variance of day ``t``.

    The returned array has one extra element: the one-step-ahead variance
    after the last observation.
    """
    eps = np.ascontiguousarray(np.asarray(returns, dtype=np.float64) - params.mu)
    if s0 is None:
        s0 = float(np.mean(eps * eps)) if eps.size else 0.0
    return garch_filter(eps, params.omega, params.alpha, params.beta, params.gamma, float(s0))


def _nll(eps, omega, alpha, beta, gamma, df, s0):
    s2 = garch_filter(eps, omega, alpha, beta, gamma, s0)[:-1]
    if np.any(~(s2 > 0)):
        return np.inf
    if math.isinf(df):
        return 0.5 * float(np.sum(np.log(2 * np.pi * s2) + eps * eps / s2))
    # unit-variance t
    c = (special.gammaln((df + 1) / 2) - special.gammaln(df / 2)
         - 0.5 * math.log(math.pi * (df - 2)))
    ll = c - 0.5 * np.log(s2) - 0.5 * (df + 1) * np.log1p(eps * eps / (s2 * (df - 2)))
    return -float(np.sum(ll))


def garch_nll(params: GarchParams, returns):
    eps = np.ascontiguousarray(np.asarray(returns, dtype=np.float64) - params.mu)
    return _nll(eps, params.omega, params.alpha, params.beta, params.gamma, params.df,
                float(np.mean(eps * eps)))


def _unpack(theta, dist, asym):
    omega = math.exp(theta[0])
    alpha = special.expit(theta[1])
    beta = special.expit(theta[2])
    i = 3
    gamma = 0.0
    if asym:
        gamma = special.expit(theta[i])
        i += 1
    df = MIN_DF - 0.05 + math.exp(theta[i]) if dist == "t" else math.inf
    return omega, alpha, beta, gamma, df


def _logit(p):
    p = min(max(p, 1e-6), 1 - 1e-6)
    return math.log(p / (1 - p))


def fit_garch(returns, dist="t", asymmetric=False, mu=MU_PREMIUM, estimate_mu=False,
              start: GarchParams | None = None, maxiter=2000) -> GarchParams:
    """Maximum likelihood fit; degenerate data or failures return the fixed fallback.

    ``mu`` is the fixed daily mean unless ``estimate_mu`` is set, in which
    case the sample mean is used. ``start`` warm-starts the optimizer.
    """
    r = np.asarray(returns, dtype=np.float64)
    r = r[np.isfinite(r)]
    if estimate_mu and r.size:
        mu = float(r.mean())
    if r.size < 50 or not np.std(r) > 0:
        return fallback_params(mu)
    eps = np.ascontiguousarray(r - mu)
    var = float(np.mean(eps * eps))
    if start is not None and not start.fallback:
        df0 = start.df if dist == "t" and math.isfinite(start.df) else 8.0
        starts = [(start.alpha, start.beta, start.gamma, df0)]
    else:
        g0 = 0.02 if asymmetric else 0.0
        # the low-persistence start keeps iid data off the flat beta ridge
        starts = [(0.02, 0.10, g0, 8.0), (0.05, 0.90, g0, 8.0)]

    def objective(theta):
        omega, alpha, beta, gamma, df = _unpack(theta, dist, asymmetric)
        if alpha + beta + 0.5 * gamma >= MAX_PERSISTENCE or (dist == "t" and df > 500):
            return 1e12
        v = _nll(eps, omega, alpha, beta, gamma, df, var)
        return v if np.isfinite(v) else 1e12

    res = None
    for a0, b0, g0, df0 in starts:
        w0 = max(var * max(1.0 - a0 - b0 - 0.5 * g0, 0.01), 1e-300)
        theta0 = [math.log(w0), _logit(a0), _logit(b0)]
        if asymmetric:
            theta0.append(_logit(max(g0, 1e-3)))
        if dist == "t":
            theta0.append(math.log(max(df0 - MIN_DF + 0.05, 1e-3)))
        with np.errstate(all="ignore"):
            cand = optimize.minimize(objective, np.array(theta0), method="Nelder-Mead",
                                     options={"maxiter": maxiter, "xatol": 1e-6,
                                              "fatol": 1e-8})
        # later starts must win by a clear margin
        if res is None or cand.fun < res.fun - 1.0:
            res = cand
    omega, alpha, beta, gamma, df = _unpack(res.x, dist, asymmetric)
    bad = (not res.success and res.status != 2) or res.fun >= 1e12
    bad = bad or alpha + beta + 0.5 * gamma >= MAX_PERSISTENCE or df <= MIN_DF
    if bad:
        log.debug("GARCH fit fell back: %s", res.message)
        return fallback_params(mu)
    # beta is unidentified when alpha is ~0; keep constant variance unless the
    # ARCH terms are significant at 5% (likelihood ratio, 2 restrictions)
    flat = _nll(eps, var, 0.0, 0.0, 0.0, df, var)
    if 2.0 * (flat - res.fun) < LR_CRITICAL:
        return GarchParams(var, 0.0, 0.0, 0.0, df, mu)
    return GarchParams(omega, alpha, beta, gamma, df, mu)


# --------------------------------------------------------------------------
# Monte Carlo


def _paths_np(z, s2_next, omega, alpha, beta, gamma, mu, lo, hi):
    P, H = z.shape
    s2 = np.full(P, s2_next)
    gross = np.ones(P)
    for h in range(H):
        e = np.sqrt(s2) * z[:, h]
        gross *= 1.0 + np.clip(mu + e, lo, hi)
        s2 = omega + (alpha + gamma * (e < 0)) * e * e + beta * s2
    return gross - 1.0


@njit
def _paths_nb(z, s2_next, omega, alpha, beta, gamma, mu, lo, hi):
    # paths in the inner loop so the update vectorises like the numpy twin
    P, H = z.shape
    s2 = np.full(P, s2_next)
    gross = np.ones(P)
    for h in range(H):
        for p in range(P):
            e = math.sqrt(s2[p]) * z[p, h]
            gross[p] *= 1.0 + min(max(mu + e, lo), hi)
            s2[p] = omega + (alpha + gamma * (e < 0.0)) * e * e + beta * s2[p]
    return gross - 1.0


simulate_paths = pick(_paths_nb, _paths_np)


@dataclass(frozen=True)
class GarchForecast:
    taus: np.ndarray
    quantiles: np.ndarray
    volatility: float
    mean: float
    paths: int


def draw_shocks(rng, df, shape):
    """Unit-variance t (or normal) innovations."""
    if math.isinf(df):
        return rng.standard_normal(shape)
    return rng.standard_t(df, shape) * math.sqrt((df - 2.0) / df)


def mc_forecast(params: GarchParams, last_eps=None, last_sigma2=None, horizon=22,
                paths=10_000, taus=None, seed=0, s2_next=None, day_clip=(-1.0, np.inf),
                month_clip=(-1.0, np.inf), rng=None) -> GarchForecast:
    """Quantiles and volatility of the compounded ``horizon``-day return.

    The first simulated day uses ``s2_next`` if given, otherwise the variance
    implied by ``last_eps`` and ``last_sigma2``.
    """
    if paths < 2:
        raise ValueError("need at least two paths")
    taus = tau_grid(taus)
    if s2_next is None:
        if last_eps is None or last_sigma2 is None:
            raise ValueError("need s2_next or (last_eps, last_sigma2)")
        a = params.alpha + (params.gamma if last_eps < 0 else 0.0)
        s2_next = params.omega + a * last_eps**2 + params.beta * last_sigma2
    rng = rng if rng is not None else np.random.default_rng(seed)
    z = draw_shocks(rng, params.df, (paths, horizon))
    cum = simulate_paths(z, float(s2_next), params.omega, params.alpha, params.beta,
                         params.gamma, params.mu, float(day_clip[0]), float(day_clip[1]))
    cum = np.clip(cum, *month_clip)
    q = np.quantile(cum, taus)
    return GarchForecast(taus, np.maximum.accumulate(q), float(cum.std(ddof=1)),
                         float(cum.mean()), int(paths))


def rolling_forecasts(returns, t_idx, window=756, horizon=22, paths=10_000, taus=None,
                      dist="t", mu=MU_PREMIUM, seed=0, month_clip=(-1.0, 20.0),
                      day_clip=(-1.0, np.inf)):
    """Refit on the trailing ``window`` days at each forecast index of one stock.

    Returns ``(quantiles (D, K), vol (D,), params list)``; rows without enough
    history are NaN.
    """
    r = np.asarray(returns, dtype=np.float64)
    taus = tau_grid(taus)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    Q = np.full((t_idx.size, taus.size), np.nan)
    vol = np.full(t_idx.size, np.nan)
    fitted = []
    prev = None
    rng = np.random.default_rng(seed)
    for i, t in enumerate(t_idx):
        hist = r[max(0, t - window + 1):t + 1]
        hist = hist[np.isfinite(hist)]
        if hist.size < min(250, window):
            fitted.append(None)
            continue
        p = fit_garch(hist, dist=dist, mu=mu, start=prev)
        if not p.fallback:
            prev = p
        s2 = filter_variance(p, hist)
        fc = mc_forecast(p, horizon=horizon, paths=paths, taus=taus, s2_next=s2[-1],
                         day_clip=day_clip, month_clip=month_clip, rng=rng)
        Q[i], vol[i] = fc.quantiles, fc.volatility
        fitted.append(p)
    return Q, vol, fitted


def simulate_garch(params: GarchParams, n, seed=0, s0=None):
    """Simulate ``n`` daily returns from ``params`` (unit-variance shocks)."""
    rng = np.random.default_rng(seed)
    z = draw_shocks(rng, params.df, n)
    if s0 is None:
        p = params.persistence
        s0 = params.omega / (1 - p) if p < 1 else params.omega
    out = np.empty(n)
    s2 = s0
    for t in range(n):
        e = math.sqrt(s2) * z[t]
        out[t] = params.mu + e
        s2 = params.omega + (params.alpha + (params.gamma if e < 0 else 0.0)) * e * e + params.beta * s2
    return out


def with_mu(params: GarchParams, mu):
    return replace(params, mu=mu)
