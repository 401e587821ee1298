"""Price-derived features, label scaling and the (stock, date) design matrix.

Every feature at date index ``t`` is a function of returns up to and
including ``t``; labels are the compounded returns over ``t+1 .. t+h``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._accel import njit, pick

log = logging.getLogger(__name__)

MONTH = 22
YEAR = 12 * MONTH


class PanelError(ValueError):
    pass


@dataclass
class Panel:
    """Daily returns on a (date, stock) grid; NaN marks an inactive stock-day."""

    dates: np.ndarray
    stock_ids: np.ndarray
    ret: np.ndarray
    high: np.ndarray | None = None
    low: np.ndarray | None = None
    mcap: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ret = np.asarray(self.ret, dtype=np.float64)
        if self.ret.ndim != 2 or self.ret.shape != (len(self.dates), len(self.stock_ids)):
            raise PanelError("returns must have shape (n_dates, n_stocks)")
        if len(self.dates) > 1 and not np.all(np.asarray(self.dates[1:]) > np.asarray(self.dates[:-1])):
            raise PanelError("dates must be strictly increasing")
        if np.any(self.ret[np.isfinite(self.ret)] < -1.0):
            raise PanelError("returns below -100%")
        for name in ("high", "low", "mcap"):
            a = getattr(self, name)
            if a is not None and np.shape(a) != self.ret.shape:
                raise PanelError(f"{name} does not match the return grid")

    @property
    def shape(self):
        return self.ret.shape


def read_panel_csv(path) -> Panel:
    """Read the long ``date,stock_id,ret[,high,low,mcap,feat_*]`` format."""
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise PanelError(f"cannot read panel {path}: {exc}") from exc
    missing = {"date", "stock_id", "ret"} - set(df.columns)
    if missing:
        raise PanelError(f"panel file lacks columns {sorted(missing)}")
    if df.duplicated(["date", "stock_id"]).any():
        raise PanelError("duplicate (date, stock_id) rows")
    wide = lambda col: df.pivot(index="date", columns="stock_id", values=col).sort_index()
    ret = wide("ret")
    opt = {c: wide(c).to_numpy() for c in ("high", "low", "mcap") if c in df.columns}
    extra = {c: wide(c).to_numpy() for c in df.columns if c.startswith("feat_")}
    return Panel(ret.index.to_numpy(), ret.columns.to_numpy(), ret.to_numpy(),
                 extra=extra, **opt)


def write_panel_csv(panel: Panel, path):
    T, N = panel.shape
    cols = {"date": np.repeat(panel.dates, N), "stock_id": np.tile(panel.stock_ids, T),
            "ret": panel.ret.ravel()}
    for name in ("high", "low", "mcap"):
        if getattr(panel, name) is not None:
            cols[name] = np.asarray(getattr(panel, name)).ravel()
    for name, a in panel.extra.items():
        cols[name] = np.asarray(a).ravel()
    df = pd.DataFrame(cols)
    df = df[np.isfinite(df["ret"].to_numpy())]
    df.to_csv(path, index=False, float_format="%.17g")


# --------------------------------------------------------------------------
# time-series recursions


def _ewma_np(x, lam):
    out = np.full(x.shape, np.nan)
    s = np.full(x.shape[1], np.nan)
    for t in range(x.shape[0]):
        v = x[t]
        ok = np.isfinite(v)
        fresh = ok & np.isnan(s)
        s = np.where(fresh, v, s)
        upd = ok & ~fresh
        s = np.where(upd, lam * s + (1.0 - lam) * v, s)
        out[t] = s
    return out


@njit
def _ewma_nb(x, lam):
    T, N = x.shape
    out = np.empty((T, N))
    for j in range(N):
        s = np.nan
        for t in range(T):
            v = x[t, j]
            if np.isfinite(v):
                if np.isnan(s):
                    s = v
                else:
                    s = lam * s + (1.0 - lam) * v
            out[t, j] = s
    return out


_ewma = pick(_ewma_nb, _ewma_np)


def ewma(x, lam):
    """EWMA down axis 0, started at the first finite value; gaps carry forward."""
    if not 0.0 < lam < 1.0:
        raise ValueError("decay factor must lie in (0, 1)")
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        return a.copy()
    flat = a.ndim == 1
    a2 = np.ascontiguousarray(a.reshape(a.shape[0], -1))
    out = _ewma(a2, float(lam))
    return out[:, 0] if flat else out.reshape(a.shape)


def ewma_vol(returns, lam=0.94):
    """sigma_t with sigma_t^2 = lam sigma_{t-1}^2 + (1 - lam) r_t^2."""
    r = np.asarray(returns, dtype=np.float64)
    return np.sqrt(ewma(r * r, lam))


def negative_ewma_vol(returns, lam):
    r = np.asarray(returns, dtype=np.float64)
    return np.sqrt(ewma(np.where(r < 0, r * r, np.where(np.isnan(r), np.nan, 0.0)), lam))


def parkinson_vol(high, low, window=MONTH):
    h = np.asarray(high, dtype=np.float64)
    l = np.asarray(low, dtype=np.float64)
    if np.any(h[np.isfinite(h)] <= 0) or np.any(l[np.isfinite(l)] <= 0):
        raise ValueError("high and low prices must be positive")
    if np.any((h < l) & np.isfinite(h) & np.isfinite(l)):
        raise ValueError("high below low")
    sq = np.log(h / l) ** 2
    m = pd.DataFrame(sq.reshape(sq.shape[0], -1)).rolling(window, min_periods=window).mean()
    out = np.sqrt(m.to_numpy() / (4.0 * np.log(2.0)))
    return out.reshape(sq.shape)


def trailing_vol(returns, window):
    df = pd.DataFrame(np.asarray(returns, dtype=np.float64))
    return df.rolling(window, min_periods=max(2, window // 2)).std().to_numpy()


def sigma_bar(vols):
    """Cross-sectional mean of stock volatilities per row (date)."""
    v = np.asarray(vols, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    ok = np.isfinite(v)
    n = ok.sum(axis=1)
    if np.any(n == 0):
        raise PanelError("empty cross-section")
    out = np.where(ok, v, 0.0).sum(axis=1) / n
    return out if out.size > 1 else float(out[0])


def market_mean_ewma(returns, lambdas=(0.9, 0.94, 0.96, 0.99, 0.999)):
    """EWMAs of the lagged equal-weighted cross-sectional mean return.

    Column ``j`` at row ``t`` is ``mu_t = lam mu_{t-1} + (1 - lam) m_{t-1}``;
    the first row has no lagged mean and is NaN.
    """
    r = np.asarray(returns, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        m = np.nanmean(r, axis=1) if r.shape[1] else np.full(r.shape[0], np.nan)
    lagged = np.concatenate([[np.nan], m[:-1]])
    return np.column_stack([ewma(lagged, lam) for lam in lambdas])


def rank_normalize(values):
    """Per-row (rank - 0.5) / n with average ties; missing entries become 0.5."""
    a = np.asarray(values, dtype=np.float64)
    flat = a.ndim == 1
    a2 = a[None, :] if flat else a
    ranks = pd.DataFrame(a2).rank(axis=1, method="average").to_numpy()
    n = np.isfinite(a2).sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (ranks - 0.5) / n
    out = np.where(np.isfinite(out), out, 0.5)
    return out[0] if flat else out


def forward_return(returns, horizon=MONTH, clip=(-1.0, 20.0)):
    """Compounded return over ``t+1 .. t+horizon``; NaN when any day is missing."""
    r = np.asarray(returns, dtype=np.float64)
    T = r.shape[0]
    logr = np.log1p(np.maximum(r, -1.0 + 1e-300))
    c = np.vstack([np.zeros((1,) + r.shape[1:]), np.cumsum(logr, axis=0)])
    out = np.full(r.shape, np.nan)
    if T > horizon:
        out[:T - horizon] = np.expm1(c[1 + horizon:] - c[1:T - horizon + 1])
    if clip is not None:
        out = np.clip(out, *clip)
    return out


def realized_vol(returns, horizon=MONTH):
    """sqrt(sum of squared daily returns) over ``t+1 .. t+horizon``."""
    r = np.asarray(returns, dtype=np.float64)
    c = np.vstack([np.zeros((1,) + r.shape[1:]), np.cumsum(r * r, axis=0)])
    T = r.shape[0]
    out = np.full(r.shape, np.nan)
    if T > horizon:
        out[:T - horizon] = np.sqrt(c[1 + horizon:] - c[1:T - horizon + 1])
    return out


# --------------------------------------------------------------------------
# feature assembly


@dataclass(frozen=True)
class FeatureConfig:
    vol_lambdas: tuple = (0.8, 0.9, 0.94, 0.96, 0.98, 0.99)
    neg_lambdas: tuple = (0.8, 0.9, 0.94)
    # fill-in slots completing the 18 volatility estimators
    extra_lambdas: tuple = (0.85, 0.92, 0.95, 0.97, 0.995)
    trailing_months: tuple = (3, 6, 12)
    parkinson_window: int = MONTH
    mean_lambdas: tuple = (0.9, 0.94, 0.96, 0.99, 0.999)
    characteristics: tuple = ("beta", "idio_vol", "max_ret", "ret_1m", "mom_12_2")
    sigma_lambda: float = 0.94
    beta_window: int = YEAR
    horizon: int = MONTH

    @property
    def n_vol(self):
        return (len(self.vol_lambdas) + len(self.neg_lambdas) + len(self.trailing_months)
                + 1 + len(self.extra_lambdas))


def _rolling_mean(a, w, min_periods):
    return pd.DataFrame(a).rolling(w, min_periods=min_periods).mean().to_numpy()


def characteristics(panel: Panel, names, window=YEAR):
    """Return-based characteristics that feed the rank-normalised block."""
    r = panel.ret
    mkt = np.nanmean(np.where(np.isfinite(r), r, np.nan), axis=1)
    out = {}
    mp = max(2, window // 2)
    need_beta = {"beta", "idio_vol"} & set(names)
    if need_beta:
        m = np.broadcast_to(mkt[:, None], r.shape)
        mm = _rolling_mean(m, window, mp)
        rm = _rolling_mean(r, window, mp)
        cov = _rolling_mean(r * m, window, mp) - rm * mm
        var_m = _rolling_mean(m * m, window, mp) - mm * mm
        var_r = _rolling_mean(r * r, window, mp) - rm * rm
        with np.errstate(invalid="ignore", divide="ignore"):
            beta = cov / var_m
            idio = np.sqrt(np.maximum(var_r - beta * cov, 0.0))
        out["beta"], out["idio_vol"] = beta, idio
    if "max_ret" in names:
        out["max_ret"] = pd.DataFrame(r).rolling(MONTH, min_periods=MONTH // 2).max().to_numpy()
    if {"ret_1m", "mom_12_2"} & set(names):
        logr = pd.DataFrame(np.log1p(r))
        if "ret_1m" in names:
            out["ret_1m"] = np.expm1(logr.rolling(MONTH, min_periods=MONTH // 2).sum().to_numpy())
        if "mom_12_2" in names:
            s = logr.rolling(YEAR - MONTH, min_periods=(YEAR - MONTH) // 2).sum().shift(MONTH)
            out["mom_12_2"] = np.expm1(s.to_numpy())
    unknown = set(names) - set(out)
    if unknown:
        raise ValueError(f"unknown characteristics {sorted(unknown)}")
    return [out[n] for n in names]


@dataclass
class FeatureSet:
    """Raw per-day feature series; :meth:`at` standardises a set of dates."""

    config: FeatureConfig
    char_names: list
    chars: list
    vol_names: list
    vols: list
    mean_ewma: np.ndarray
    sigma: np.ndarray
    active: np.ndarray

    @property
    def names(self):
        return (list(self.char_names) + list(self.vol_names)
                + [f"mkt_mean_{lam}" for lam in self.config.mean_lambdas])

    @property
    def n_stock_inputs(self):
        return len(self.names)

    @property
    def n_market_inputs(self):
        return len(self.vol_names)

    def sigma_bar(self, t_idx):
        s = np.where(self.active[t_idx], self.sigma[t_idx], np.nan)
        return sigma_bar(s)

    def at(self, t_idx):
        """Standardised features at dates ``t_idx``.

        Returns ``(x, z, sbar)`` with shapes ``(D, N, F)``, ``(D, M)`` and ``(D,)``.
        Characteristics are rank-normalised, volatilities are divided by their
        cross-sectional mean, and mean-return EWMAs are divided by ``sbar``.
        """
        t_idx = np.atleast_1d(np.asarray(t_idx, dtype=np.int64))
        act = self.active[t_idx]
        sbar = np.atleast_1d(self.sigma_bar(t_idx))
        blocks = []
        for c in self.chars:
            blocks.append(rank_normalize(np.where(act, c[t_idx], np.nan)))
        zcols = []
        for v in self.vols:
            vv = np.where(act, v[t_idx], np.nan)
            cs_mean = np.full(len(t_idx), np.nan)
            for d in range(len(t_idx)):
                row = vv[d]
                ok = np.isfinite(row)
                if ok.any():
                    row = np.where(ok, row, np.median(row[ok]))
                    cs_mean[d] = row[act[d]].mean() if act[d].any() else row.mean()
                    vv[d] = row / cs_mean[d] if cs_mean[d] > 0 else 1.0
                else:
                    vv[d] = 1.0
            blocks.append(vv)
            # a column missing entirely falls back to the label scaler
            zcols.append(np.log(np.where(np.isfinite(cs_mean) & (cs_mean > 0), cs_mean, sbar)))
        me = self.mean_ewma[t_idx] / sbar[:, None]
        me = np.where(np.isfinite(me), me, 0.0)
        for j in range(me.shape[1]):
            blocks.append(np.broadcast_to(me[:, j:j + 1], act.shape))
        x = np.stack(blocks, axis=-1)
        z = np.column_stack(zcols)
        return x, z, sbar


def compute_features(panel: Panel, config: FeatureConfig | None = None) -> FeatureSet:
    cfg = config or FeatureConfig()
    r = panel.ret
    char_names = list(cfg.characteristics)
    chars = characteristics(panel, char_names, cfg.beta_window) if char_names else []
    for name, a in panel.extra.items():
        char_names.append(name)
        chars.append(np.asarray(a, dtype=np.float64))
    vol_names, vols = [], []
    for lam in cfg.vol_lambdas:
        vol_names.append(f"ewma_{lam}")
        vols.append(ewma_vol(r, lam))
    for lam in cfg.neg_lambdas:
        vol_names.append(f"neg_ewma_{lam}")
        vols.append(negative_ewma_vol(r, lam))
    for m in cfg.trailing_months:
        vol_names.append(f"total_vol_{m}m")
        vols.append(trailing_vol(r, m * MONTH))
    vol_names.append("parkinson")
    if panel.high is not None and panel.low is not None:
        vols.append(parkinson_vol(panel.high, panel.low, cfg.parkinson_window))
    else:
        vols.append(np.full(r.shape, np.nan))
    for lam in cfg.extra_lambdas:
        vol_names.append(f"ewma_{lam}")
        vols.append(ewma_vol(r, lam))
    sigma = ewma_vol(r, cfg.sigma_lambda)
    active = np.isfinite(r) & np.isfinite(sigma) & (sigma > 0)
    return FeatureSet(cfg, char_names, chars, vol_names, vols,
                      market_mean_ewma(r, cfg.mean_lambdas), sigma, active)


@dataclass
class Design:
    """Row-stacked (stock, date) observations ready for the networks."""

    x: np.ndarray
    z: np.ndarray
    sigma_bar: np.ndarray
    r: np.ndarray
    stock: np.ndarray
    t: np.ndarray
    stock_ids: np.ndarray
    dates: np.ndarray

    def __len__(self):
        return self.r.shape[0]

    def batch(self, mask):
        from .qnn import Batch
        return Batch(self.x[mask], self.z[mask], self.sigma_bar[mask], self.r[mask])

    def keys(self, mask):
        return self.stock_ids[self.stock[mask]], self.dates[self.t[mask]]


def build_design(panel: Panel, fs: FeatureSet, t_idx, horizon=MONTH, labels=None,
                 clip=(-1.0, 20.0)) -> Design:
    """Stack active stocks at dates ``t_idx``; ``r`` is NaN where no label exists."""
    t_idx = np.asarray(t_idx, dtype=np.int64)
    if labels is None:
        labels = forward_return(panel.ret, horizon, clip)
    x, z, sbar = fs.at(t_idx)
    act = fs.active[t_idx]
    d, s = np.nonzero(act)
    return Design(x[d, s], z[d], sbar[d], labels[t_idx[d], s], s, t_idx[d],
                  np.asarray(panel.stock_ids), np.asarray(panel.dates))


def features_frame(panel: Panel, fs: FeatureSet, t_idx) -> pd.DataFrame:
    """Wide table keyed by (date, stock_id) with standardised features."""
    t_idx = np.asarray(t_idx, dtype=np.int64)
    x, _, sbar = fs.at(t_idx)
    act = fs.active[t_idx]
    d, s = np.nonzero(act)
    df = pd.DataFrame(x[d, s], columns=fs.names)
    df.insert(0, "stock_id", np.asarray(panel.stock_ids)[s])
    df.insert(0, "date", np.asarray(panel.dates)[t_idx[d]])
    df["sigma_bar"] = sbar[d]
    return df
