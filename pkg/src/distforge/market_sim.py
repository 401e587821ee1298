"""Synthetic market: GARCH market factor, GJR-t idiosyncratic risk and jumps.

Daily returns follow ``r_it = beta_i r_mt + sigma_it eps_it + J_it``. The
true conditional distribution of next month's compounded return is recovered
by re-simulating 22 days from the state at the forecast date.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from ._accel import njit, pick
from .features import Panel, realized_vol
from .taus import tau_grid

log = logging.getLogger(__name__)

PERCENT2 = 1e-4
POOL_COLUMNS = ("mkt_beta", "omega", "alpha", "beta", "gamma", "df")


@dataclass(frozen=True)
class DgpSpec:
    n_stocks: int = 100
    n_years: int = 20
    days_per_month: int = 22
    # quoted on percent returns; converted with ``omega_scale``
    market_omega: float = 0.0025
    omega_scale: float = PERCENT2
    market_alpha: float = 0.06
    market_beta: float = 0.94
    market_df: float = 5.0
    market_init_vol: float = 0.01
    jump_prob: float = 0.01
    jump_df: float = 3.0
    jump_sd: float = 0.25
    day_clip: tuple = (-0.9, 10.0)
    month_clip: tuple = (-1.0, 20.0)
    pool: str | None = None
    df_filter: str = "keep-below-20"
    # synthetic pool ranges
    mkt_beta_range: tuple = (0.2, 2.0)
    alpha_range: tuple = (0.02, 0.10)
    gamma_range: tuple = (0.0, 0.10)
    persistence_range: tuple = (0.85, 0.99)
    # calibrated so true-quantile means and dispersion match the reference study
    idio_vol_range: tuple = (0.01, 0.08)
    idio_vol_dist: str = "log-uniform"
    df_range: tuple = (4.0, 20.0)

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_years < 1 or self.days_per_month < 1:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.jump_prob <= 1.0:
            raise ValueError("jump probability must lie in [0, 1]")
        if not (self.day_clip[0] < self.day_clip[1] and self.month_clip[0] < self.month_clip[1]):
            raise ValueError("truncation bounds must be ordered")
        if self.idio_vol_dist not in ("uniform", "log-uniform"):
            raise ValueError(f"unknown volatility distribution {self.idio_vol_dist!r}")
        if self.df_filter not in ("keep-below-20", "keep-at-least-20", "none"):
            raise ValueError(f"unknown df filter {self.df_filter!r}")
        for name in ("day_clip", "month_clip") + tuple(
                f for f in self.__dataclass_fields__ if f.endswith("_range")):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def n_days(self):
        return self.n_years * 12 * self.days_per_month

    @property
    def omega_m(self):
        return self.market_omega * self.omega_scale

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class StockParams:
    mkt_beta: np.ndarray
    omega: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    df: np.ndarray

    def __len__(self):
        return self.mkt_beta.size

    def frame(self):
        return pd.DataFrame({c: getattr(self, c) for c in POOL_COLUMNS})


class EmptyPoolError(ValueError):
    pass


def filter_pool(pool: pd.DataFrame, df_filter="keep-below-20") -> pd.DataFrame:
    """Apply the plausibility screen to an estimated parameter pool."""
    missing = set(POOL_COLUMNS) - set(pool.columns)
    if missing:
        raise ValueError(f"pool lacks columns {sorted(missing)}")
    lo, hi = pool["omega"].quantile([0.05, 0.95])
    keep = ((pool["omega"] >= lo) & (pool["omega"] <= hi)
            & (pool["alpha"] > 0.01) & (pool["beta"] > 0.01)
            & (pool["alpha"] + pool["beta"] > 0.5)
            & (pool["alpha"] + pool["beta"] + 0.5 * pool["gamma"] < 1.0)
            & (pool["mkt_beta"] > -0.5) & (pool["mkt_beta"] <= 4.0) & (pool["df"] > 2.0))
    if df_filter == "keep-below-20":
        keep &= pool["df"] < 20.0
    elif df_filter == "keep-at-least-20":
        keep &= pool["df"] >= 20.0
    return pool[keep]


def synthetic_pool(spec: DgpSpec, n, rng) -> StockParams:
    u = lambda r: rng.uniform(r[0], r[1], n)
    mkt_beta = u(spec.mkt_beta_range)
    alpha = u(spec.alpha_range)
    gamma = u(spec.gamma_range)
    pers = u(spec.persistence_range)
    beta = np.maximum(pers - alpha - 0.5 * gamma, 0.0)
    pers = alpha + 0.5 * gamma + beta
    if spec.idio_vol_dist == "log-uniform":
        vol = np.exp(u(np.log(spec.idio_vol_range)))
    else:
        vol = u(spec.idio_vol_range)
    omega = vol**2 * (1.0 - pers)
    return StockParams(mkt_beta, omega, alpha, beta, gamma, u(spec.df_range))


def sample_stock_params(spec: DgpSpec, seed=0, pool: pd.DataFrame | None = None) -> StockParams:
    """Per-stock parameters: rows resampled from a pool, or synthetic draws."""
    rng = np.random.default_rng(seed)
    if pool is None and spec.pool is not None:
        pool = pd.read_csv(spec.pool, float_precision="round_trip")
    if pool is None:
        return synthetic_pool(spec, spec.n_stocks, rng)
    if len(pool) > 1:
        pool = filter_pool(pool, spec.df_filter)
    if len(pool) == 0:
        raise EmptyPoolError("parameter pool is empty after filtering")
    idx = rng.integers(0, len(pool), spec.n_stocks)
    rows = pool.iloc[idx]
    return StockParams(*(rows[c].to_numpy(dtype=np.float64) for c in POOL_COLUMNS))


# --------------------------------------------------------------------------
# simulation kernels


def _simulate_np(zm, z, jumps, om, am, bm, s2m0, mb, om_i, a_i, b_i, g_i, lo, hi):
    T, N = z.shape
    ret = np.empty((T, N))
    s2m = np.empty(T + 1)
    s2 = np.empty((T + 1, N))
    s2m[0] = s2m0
    pers = a_i + 0.5 * g_i + b_i
    s2[0] = np.where(pers < 1.0, om_i / np.maximum(1.0 - pers, 1e-12), om_i)
    for t in range(T):
        em = math.sqrt(s2m[t]) * zm[t]
        e = np.sqrt(s2[t]) * z[t]
        ret[t] = np.clip(mb * em + e + jumps[t], lo, hi)
        s2m[t + 1] = om + am * em * em + bm * s2m[t]
        s2[t + 1] = om_i + (a_i + g_i * (e < 0.0)) * e * e + b_i * s2[t]
    return ret, s2m, s2


@njit
def _simulate_nb(zm, z, jumps, om, am, bm, s2m0, mb, om_i, a_i, b_i, g_i, lo, hi):
    T, N = z.shape
    ret = np.empty((T, N))
    s2m = np.empty(T + 1)
    s2 = np.empty((T + 1, N))
    s2m[0] = s2m0
    for j in range(N):
        p = a_i[j] + 0.5 * g_i[j] + b_i[j]
        s2[0, j] = om_i[j] / max(1.0 - p, 1e-12) if p < 1.0 else om_i[j]
    for t in range(T):
        em = math.sqrt(s2m[t]) * zm[t]
        s2m[t + 1] = om + am * em * em + bm * s2m[t]
        for j in range(N):
            e = math.sqrt(s2[t, j]) * z[t, j]
            r = mb[j] * em + e + jumps[t, j]
            ret[t, j] = min(max(r, lo), hi)
            a = a_i[j] + g_i[j] if e < 0.0 else a_i[j]
            s2[t + 1, j] = om_i[j] + a * e * e + b_i[j] * s2[t, j]
    return ret, s2m, s2


simulate_kernel = pick(_simulate_nb, _simulate_np)


def _paths_np(zm, z, jumps, s2m0, om, am, bm, mb, s20, om_i, a_i, g_i, b_i, lo, hi):
    P, H = z.shape
    s2m = np.full(P, s2m0)
    s2 = np.full(P, s20)
    gross = np.ones(P)
    for h in range(H):
        em = np.sqrt(s2m) * zm[:, h]
        e = np.sqrt(s2) * z[:, h]
        gross *= 1.0 + np.clip(mb * em + e + jumps[:, h], lo, hi)
        s2m = om + am * em * em + bm * s2m
        s2 = om_i + (a_i + g_i * (e < 0.0)) * e * e + b_i * s2
    return gross - 1.0


@njit
def _paths_nb(zm, z, jumps, s2m0, om, am, bm, mb, s20, om_i, a_i, g_i, b_i, lo, hi):
    P, H = z.shape
    s2m = np.full(P, s2m0)
    s2 = np.full(P, s20)
    gross = np.ones(P)
    for h in range(H):
        for p in range(P):
            em = math.sqrt(s2m[p]) * zm[p, h]
            e = math.sqrt(s2[p]) * z[p, h]
            gross[p] *= 1.0 + min(max(mb * em + e + jumps[p, h], lo), hi)
            s2m[p] = om + am * em * em + bm * s2m[p]
            s2[p] = om_i + (a_i + g_i * (e < 0.0)) * e * e + b_i * s2[p]
    return gross - 1.0


path_kernel = pick(_paths_nb, _paths_np)


def unit_t(rng, df, shape):
    if math.isinf(df):
        return rng.standard_normal(shape)
    return rng.standard_t(df, shape) * math.sqrt((df - 2.0) / df)


def draw_jumps(rng, spec: DgpSpec, shape):
    out = np.zeros(shape)
    if spec.jump_prob <= 0 or spec.jump_sd <= 0:
        return out
    hit = rng.random(shape) < spec.jump_prob
    k = int(hit.sum())
    if k:
        out[hit] = unit_t(rng, spec.jump_df, k) * spec.jump_sd
    return out


@dataclass
class SimResult:
    spec: DgpSpec
    params: StockParams
    panel: Panel
    s2m: np.ndarray     # (T+1,) market variance of each day, plus one ahead
    s2: np.ndarray      # (T+1, N) idiosyncratic variances
    seed: int
    meta: dict = field(default_factory=dict)

    def month_ends(self):
        m = self.spec.days_per_month
        return np.arange(m - 1, self.spec.n_days, m)

    def manifest(self):
        return {"seed": self.seed, "spec_hash": self.spec.digest(), "spec": asdict(self.spec),
                **self.meta}


def simulate_panel(spec: DgpSpec, params: StockParams | None = None, seed=0) -> SimResult:
    """Simulate the daily panel; streams are split so market and stocks are reproducible."""
    ss = np.random.SeedSequence(seed)
    k_par, k_mkt, k_stk, k_jmp = ss.spawn(4)
    if params is None:
        params = sample_stock_params(spec, np.random.default_rng(k_par).integers(2**32))
    N, T = len(params), spec.n_days
    zm = unit_t(np.random.default_rng(k_mkt), spec.market_df, T)
    rng = np.random.default_rng(k_stk)
    z = np.empty((T, N))
    for j in range(N):
        z[:, j] = unit_t(rng, float(params.df[j]), T)
    jumps = draw_jumps(np.random.default_rng(k_jmp), spec, (T, N))
    ret, s2m, s2 = simulate_kernel(
        zm, z, jumps, spec.omega_m, spec.market_alpha, spec.market_beta,
        spec.market_init_vol**2, params.mkt_beta, params.omega, params.alpha,
        params.beta, params.gamma, spec.day_clip[0], spec.day_clip[1])
    ids = np.array([f"S{j:05d}" for j in range(N)])
    panel = Panel(np.arange(T), ids, ret)
    return SimResult(spec, params, panel, s2m, s2, int(seed))


@dataclass
class TrueQuantiles:
    taus: np.ndarray
    t_idx: np.ndarray        # forecast dates (last day before the month)
    q: np.ndarray            # (D, N, K)
    excluded: np.ndarray     # (D, N) realized monthly vol above the cut-off
    paths: int

    def to_frame(self, stock_ids, days_per_month=22):
        D, N, K = self.q.shape
        month = (self.t_idx + 1) // days_per_month
        return pd.DataFrame({
            "stock_id": np.repeat(np.tile(np.asarray(stock_ids), D), K),
            "month": np.repeat(np.repeat(month, N), K),
            "tau": np.tile(self.taus, D * N),
            "q_true": self.q.ravel(),
        })


def true_quantiles(sim: SimResult, t_idx, paths=10_000, taus=None, seed=0,
                   vol_cutoff=1.0) -> TrueQuantiles:
    """Bootstrap the conditional next-month distribution at each date in ``t_idx``.

    Market shocks are shared by all stocks at a date; each stock draws its
    own idiosyncratic and jump shocks.
    """
    spec, p = sim.spec, sim.params
    taus = tau_grid(taus)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    H = spec.days_per_month
    N = len(p)
    q = np.empty((t_idx.size, N, taus.size))
    lo, hi = spec.day_clip
    streams = np.random.SeedSequence([seed, sim.seed]).spawn(t_idx.size)
    for d, t in enumerate(t_idx):
        rng = np.random.default_rng(streams[d])
        zm = unit_t(rng, spec.market_df, (paths, H))
        for j in range(N):
            z = unit_t(rng, float(p.df[j]), (paths, H))
            jumps = draw_jumps(rng, spec, (paths, H))
            cum = path_kernel(zm, z, jumps, float(sim.s2m[t + 1]), spec.omega_m,
                              spec.market_alpha, spec.market_beta, float(p.mkt_beta[j]),
                              float(sim.s2[t + 1, j]), float(p.omega[j]), float(p.alpha[j]),
                              float(p.gamma[j]), float(p.beta[j]), lo, hi)
            q[d, j] = np.quantile(np.clip(cum, *spec.month_clip), taus)
    rv = realized_vol(sim.panel.ret, H)[t_idx]
    excluded = ~(rv <= vol_cutoff)
    return TrueQuantiles(taus, t_idx, np.maximum.accumulate(q, axis=2), excluded, int(paths))
