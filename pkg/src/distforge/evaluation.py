"""Forecast evaluation: pinball losses, CRPS, Diebold-Mariano, R^2 and volatility errors."""
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .density import QuantileGrid, cdf_on_grid, fit_pdf
from .taus import tau_grid

log = logging.getLogger(__name__)

NW_LAGS = 12
CRPS_POINTS = 4096
MONTH_BOUNDS = (-1.0, 20.0)


def pinball_matrix(q, r, taus):
    """Elementwise pinball losses of ``q`` (n, K) against realizations ``r`` (n,)."""
    taus = np.asarray(taus, dtype=np.float64)
    xi = np.asarray(r, dtype=np.float64)[:, None] - np.asarray(q, dtype=np.float64)
    return np.where(xi >= 0.0, taus * xi, (taus - 1.0) * xi)


@dataclass
class LossPanel:
    dates: np.ndarray          # unique dates, sorted
    mean_loss: np.ndarray      # (D,) cross-sectional mean of the tau-averaged loss
    tau_loss: np.ndarray       # (D, K) cross-sectional mean per tau
    counts: np.ndarray         # (D,) stocks per date
    n_missing: int
    missing: pd.DataFrame      # keys without a realization


def loss_panel(q, r, dates, taus=None, stock_id=None) -> LossPanel:
    taus = tau_grid(taus)
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    dates = np.asarray(dates)
    if q.shape != (r.size, taus.size):
        raise ValueError(f"forecast shape {q.shape} does not match {(r.size, taus.size)}")
    miss = ~np.isfinite(r)
    missing = pd.DataFrame({"date": dates[miss]})
    if stock_id is not None:
        missing["stock_id"] = np.asarray(stock_id)[miss]
    if miss.any():
        log.warning("%d forecast records lack a realized return and are excluded", miss.sum())
    keep = ~miss
    L = pinball_matrix(q[keep], r[keep], taus)
    uniq, inv = np.unique(dates[keep], return_inverse=True)
    counts = np.bincount(inv, minlength=uniq.size)
    tau_loss = np.zeros((uniq.size, taus.size))
    np.add.at(tau_loss, inv, L)
    tau_loss /= counts[:, None]
    return LossPanel(uniq, tau_loss.mean(axis=1), tau_loss, counts, int(miss.sum()), missing)


def avg_quantile_loss(q, r, dates, taus=None, scale=1.0):
    """Time-series mean of cross-sectional mean pinball loss averaged over taus.

    Pass ``scale=100`` for the percentage convention used in result tables.
    """
    return float(loss_panel(q, r, dates, taus).mean_loss.mean() * scale)


def tau_losses(q, r, dates, taus=None, scale=1.0):
    return loss_panel(q, r, dates, taus).tau_loss.mean(axis=0) * scale


def quantile_rmse(q_pred, q_true, mask=None, scale=100.0):
    """RMSE per tau across records; ``mask`` selects the records that count."""
    diff = np.asarray(q_pred, dtype=np.float64) - np.asarray(q_true, dtype=np.float64)
    diff = diff.reshape(-1, diff.shape[-1])
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool).ravel()]
    return np.sqrt(np.mean(diff * diff, axis=0)) * scale


# --------------------------------------------------------------------------
# CRPS


def _tail_piece(F, a, b, r):
    """Integral of (F - 1{r <= x})^2 over [a, b] with constant F."""
    if b <= a:
        return 0.0
    below = min(max(r, a), b) - a          # part where x < r
    return F * F * below + (1.0 - F) ** 2 * (b - a - below)


def crps(q, realized, taus=None, n_points=CRPS_POINTS, bounds=MONTH_BOUNDS):
    """CRPS of the spline CDF implied by a quantile vector.

    The CDF is integrated on a uniform grid between the outermost support
    points; beyond them F is held at its end values out to ``bounds``.
    """
    taus = tau_grid(taus)
    dens = fit_pdf(QuantileGrid(taus, np.asarray(q, dtype=np.float64)))
    lo, hi = dens.x_min, dens.x_max
    r = float(realized)
    xs = np.linspace(lo, hi, n_points)
    F = cdf_on_grid(dens, xs)
    ind = (xs >= r).astype(np.float64)
    integrand = (F - ind) ** 2
    core = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(xs)))
    # the step inside one grid cell is not captured by trapezoids; fix that cell
    if lo < r < hi:
        i = int(np.searchsorted(xs, r, side="right")) - 1
        x0, x1 = xs[i], xs[i + 1]
        f0, f1 = F[i], F[i + 1]
        trap = 0.5 * ((f0 - ind[i]) ** 2 + (f1 - ind[i + 1]) ** 2) * (x1 - x0)
        fr = f0 + (f1 - f0) * (r - x0) / (x1 - x0)
        exact = 0.5 * (f0 * f0 + fr * fr) * (r - x0) + 0.5 * ((1 - fr) ** 2 + (1 - f1) ** 2) * (x1 - r)
        core += exact - trap
    left = _tail_piece(F[0], min(bounds[0], lo), lo, r)
    right = _tail_piece(F[-1], hi, max(bounds[1], hi), r)
    return max(core + left + right, 0.0)


def crps_many(Q, r, taus=None, **kw):
    return np.array([crps(q, ri, taus, **kw) for q, ri in zip(Q, r)])


# --------------------------------------------------------------------------
# Diebold-Mariano


@dataclass(frozen=True)
class DmResult:
    statistic: float | None
    mean_diff: float
    se: float
    lags: int
    n: int
    p_value: float | None
    degenerate: bool = False


def newey_west_var(x, lags=NW_LAGS):
    """Bartlett-weighted long-run variance of ``x`` (not divided by T)."""
    x = np.asarray(x, dtype=np.float64)
    u = x - x.mean()
    T = u.size
    v = u @ u / T
    for l in range(1, min(lags, T - 1) + 1):
        v += 2.0 * (1.0 - l / (lags + 1.0)) * (u[l:] @ u[:-l]) / T
    return float(v)


def nw_tstat(x, lags=NW_LAGS):
    """Mean, its HAC standard error and t-statistic; None when degenerate."""
    x = np.asarray(x, dtype=np.float64)
    var = newey_west_var(x, lags)
    scale = max(float(np.mean(x * x)), 1e-300)
    if not var > 1e-14 * scale:
        return float(x.mean()), 0.0, None
    se = math.sqrt(var / x.size)
    return float(x.mean()), se, float(x.mean() / se)


def dm_test(loss_a, loss_b, lags=NW_LAGS) -> DmResult:
    """DM statistic on per-date loss differentials (A minus B).

    Inputs are per-date cross-sectional mean losses, or 2-d (date, stock)
    arrays that are averaged across stocks ignoring NaN.
    """
    a = np.asarray(loss_a, dtype=np.float64)
    b = np.asarray(loss_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("loss series are not aligned")
    d = a - b
    if d.ndim == 2:
        d = np.nanmean(d, axis=1)
    if d.size <= lags:
        raise ValueError("series must be longer than the lag count")
    mean, se, stat = nw_tstat(d, lags)
    if stat is None:
        return DmResult(None, mean, 0.0, lags, d.size, None, True)
    p = 2.0 * stats.norm.sf(abs(stat))
    return DmResult(stat, mean, se, lags, d.size, float(p))


# --------------------------------------------------------------------------
# point forecasts and volatility


def oos_r2(pred, realized):
    """1 - SSE / sum(r^2): R^2 against a zero forecast."""
    p = np.asarray(pred, dtype=np.float64)
    r = np.asarray(realized, dtype=np.float64)
    den = float(r @ r)
    if den == 0.0:
        raise ZeroDivisionError("realized returns are all zero")
    return 1.0 - float((r - p) @ (r - p)) / den


def vol_eval(pred_vol, realized_vol, scale=1.0):
    """(MAD, RMSE) of volatility forecasts."""
    e = np.asarray(pred_vol, dtype=np.float64) - np.asarray(realized_vol, dtype=np.float64)
    return float(np.mean(np.abs(e)) * scale), float(np.sqrt(np.mean(e * e)) * scale)


def metrics_table(q, r, dates, taus=None, scale=100.0):
    """One-row summary used by the ``evaluate`` command."""
    lp = loss_panel(q, r, dates, taus)
    taus = tau_grid(taus)
    row = {"avg_quantile_loss": lp.mean_loss.mean() * scale, "n_dates": lp.dates.size,
           "n_records": int(lp.counts.sum()), "n_missing": lp.n_missing}
    for k, tau in enumerate(taus):
        row[f"loss_{tau:g}"] = lp.tau_loss[:, k].mean() * scale
    return row
