"""Decile sorts on a forecast signal and long-short portfolio statistics."""
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .evaluation import NW_LAGS, nw_tstat

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SortSpec:
    n_groups: int = 10
    weighting: str = "equal"
    long_group: int | None = None    # default: top group
    short_group: int = 0

    def __post_init__(self):
        if self.n_groups < 2:
            raise ValueError("need at least two groups")
        if self.weighting not in ("equal", "value"):
            raise ValueError("weighting must be 'equal' or 'value'")

    @property
    def long(self):
        return self.n_groups - 1 if self.long_group is None else self.long_group


def decile_sort(signal, n_groups=10):
    """Group index per stock (-1 where the signal is missing).

    Stocks are ranked by signal with ties kept in input order, then cut
    into ``n_groups`` contiguous blocks whose sizes differ by at most one.
    """
    s = np.asarray(signal, dtype=np.float64)
    ok = np.flatnonzero(np.isfinite(s))
    out = np.full(s.size, -1, dtype=np.int64)
    n = ok.size
    if n < n_groups:
        return out
    order = ok[np.argsort(s[ok], kind="stable")]
    out[order] = (np.arange(n) * n_groups) // n
    return out


@dataclass
class LegStats:
    mean: float
    vol: float
    sharpe: float | None
    t_stat: float | None
    degenerate: bool


@dataclass
class PortfolioSeries:
    dates: np.ndarray
    long: np.ndarray
    short: np.ndarray
    long_short: np.ndarray
    groups: np.ndarray        # (D, n_groups) mean return per group
    stats: dict               # leg name -> LegStats

    def frame(self):
        df = pd.DataFrame({"date": self.dates, "long": self.long, "short": self.short,
                           "long_short": self.long_short})
        for g in range(self.groups.shape[1]):
            df[f"g{g + 1}"] = self.groups[:, g]
        return df

    def summary(self):
        rows = []
        for name, s in self.stats.items():
            rows.append({"leg": name, "mean": s.mean, "vol": s.vol, "sharpe": s.sharpe,
                         "t_stat": s.t_stat, "degenerate": s.degenerate})
        return pd.DataFrame(rows)


def leg_stats(x, lags=NW_LAGS) -> LegStats:
    x = np.asarray(x, dtype=np.float64)
    mean = float(x.mean())
    vol = float(x.std(ddof=1)) if x.size > 1 else 0.0
    scale = max(abs(mean), float(np.sqrt(np.mean(x * x))), 1e-300)
    if not vol > 1e-12 * scale:
        return LegStats(mean, vol, None, None, True)
    _, _, t = nw_tstat(x, lags) if x.size > lags else (None, None, None)
    return LegStats(mean, vol, mean / vol * math.sqrt(12.0), t, t is None)


def backtest(signal, realized, spec: SortSpec = SortSpec(), caps=None, dates=None,
             lags=NW_LAGS) -> PortfolioSeries:
    """Monthly sorts of ``signal`` (D, N) applied to next-month ``realized`` (D, N).

    ``caps`` are the market capitalisations known at formation time (for
    value weights); stocks without a realized return are dropped.
    """
    S = np.asarray(signal, dtype=np.float64)
    R = np.asarray(realized, dtype=np.float64)
    if S.shape != R.shape:
        raise ValueError("signal and realized returns are not aligned")
    if spec.weighting == "value":
        if caps is None:
            raise ValueError("value weighting needs market caps")
        W = np.asarray(caps, dtype=np.float64)
    D = S.shape[0]
    dates = np.arange(D) if dates is None else np.asarray(dates)
    keep_d, G = [], []
    for d in range(D):
        s = np.where(np.isfinite(R[d]), S[d], np.nan)
        if spec.weighting == "value":
            s = np.where(np.isfinite(W[d]) & (W[d] > 0), s, np.nan)
        g = decile_sort(s, spec.n_groups)
        if np.all(g < 0):
            warnings.warn(f"date {dates[d]}: fewer than {spec.n_groups} stocks, skipped")
            continue
        row = np.empty(spec.n_groups)
        for k in range(spec.n_groups):
            m = g == k
            if spec.weighting == "equal":
                row[k] = R[d, m].mean()
            else:
                row[k] = np.average(R[d, m], weights=W[d, m])
        keep_d.append(d)
        G.append(row)
    G = np.array(G).reshape(-1, spec.n_groups)
    long, short = G[:, spec.long], G[:, spec.short_group]
    ls = long - short
    stats = {"long": leg_stats(long, lags), "short": leg_stats(short, lags),
             "long_short": leg_stats(ls, lags)}
    return PortfolioSeries(dates[keep_d], long, short, ls, G, stats)
