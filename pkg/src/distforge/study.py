"""Controlled simulation study: two-stage network versus rolling GARCH-t against truth."""
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .evaluation import avg_quantile_loss, quantile_rmse
from .features import MONTH, FeatureConfig, build_design, compute_features
from .garch import MU_PREMIUM, rolling_forecasts
from .market_sim import DgpSpec, SimResult, simulate_panel, true_quantiles
from .qnn import ForecastTable, TrainConfig, TwoStageNet, fit_ensemble
from .taus import tau_grid

log = logging.getLogger(__name__)

CENTRAL_TAUS = (0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass(frozen=True)
class StudyConfig:
    dgp: DgpSpec = field(default_factory=DgpSpec)
    train_years: int = 10
    burn_in_days: int = 264
    sample_step: int = 5
    true_paths: int = 10_000
    garch_paths: int = 10_000
    garch_window: int = 756
    garch_mu: float = MU_PREMIUM
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=1024,
                                                                   ensemble_size=5))
    features: FeatureConfig = field(default_factory=FeatureConfig)
    taus: tuple | None = None

    def __post_init__(self):
        if not 0 < self.train_years < self.dgp.n_years:
            raise ValueError("train years must leave a test period")


@dataclass
class RepetitionResult:
    seed: int
    taus: np.ndarray
    rmse_nn: np.ndarray
    rmse_garch: np.ndarray
    n_records: int
    n_excluded: int
    epochs: list
    seconds: dict
    aql_nn: float = float("nan")      # average quantile loss against realized returns
    aql_garch: float = float("nan")
    forecasts: ForecastTable | None = None
    garch_q: np.ndarray | None = None
    truth: object = None

    def table(self):
        return pd.DataFrame({"tau": self.taus, "rmse_garch": self.rmse_garch,
                             "rmse_nn": self.rmse_nn})

    def nn_wins(self, levels=CENTRAL_TAUS):
        idx = [int(np.argmin(np.abs(self.taus - t))) for t in levels]
        return bool(np.all(self.rmse_nn[idx] < self.rmse_garch[idx]))


def split_dates(sim: SimResult, cfg: StudyConfig):
    """Weekly training dates whose labels end inside the training span, and test month-ends."""
    split = cfg.train_years * 12 * cfg.dgp.days_per_month
    h = cfg.dgp.days_per_month
    train_t = np.arange(cfg.burn_in_days, split - h, cfg.sample_step)
    me = sim.month_ends()
    test_t = me[(me >= split - 1) & (me + h < cfg.dgp.n_days)]
    return train_t, test_t


def run_repetition(cfg: StudyConfig, seed=0, keep=False) -> RepetitionResult:
    taus = tau_grid(cfg.taus)
    clock = {}
    t0 = time.perf_counter()
    sim = simulate_panel(cfg.dgp, seed=seed)
    fs = compute_features(sim.panel, cfg.features)
    train_t, test_t = split_dates(sim, cfg)
    tr = build_design(sim.panel, fs, train_t, MONTH, clip=cfg.dgp.month_clip)
    te = build_design(sim.panel, fs, test_t, MONTH, clip=cfg.dgp.month_clip)
    clock["simulate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    train_cfg = replace(cfg.train, seed=seed)
    factory = lambda j: TwoStageNet(fs.n_stock_inputs, fs.n_market_inputs, taus=taus,
                                    dropout=train_cfg.dropout, seed=100_000 * seed + j)
    ens, hists = fit_ensemble(factory, tr.batch(np.isfinite(tr.r)), train_cfg)
    pred = ens.predict(te.batch(slice(None)))
    N = len(sim.params)
    q_nn = np.full((test_t.size, N, taus.size), np.nan)
    q_nn[np.searchsorted(test_t, te.t), te.stock] = pred["raw"]
    clock["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    q_g = np.full_like(q_nn, np.nan)
    for j in range(N):
        q_g[:, j], _, _ = rolling_forecasts(
            sim.panel.ret[:, j], test_t, window=cfg.garch_window, paths=cfg.garch_paths,
            taus=taus, mu=cfg.garch_mu, seed=[seed, j], month_clip=cfg.dgp.month_clip)
    clock["garch"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    truth = true_quantiles(sim, test_t, paths=cfg.true_paths, taus=taus, seed=seed)
    clock["truth"] = time.perf_counter() - t0

    ok = (~truth.excluded & np.all(np.isfinite(q_nn), axis=2)
          & np.all(np.isfinite(q_g), axis=2))
    res = RepetitionResult(
        seed, taus,
        quantile_rmse(q_nn, truth.q, ok), quantile_rmse(q_g, truth.q, ok),
        int(ok.sum()), int(truth.excluded.sum()),
        [(h.epochs_run, h.best_epoch) for h in hists], clock)
    d_idx = np.searchsorted(test_t, te.t)
    rec = ok[d_idx, te.stock] & np.isfinite(te.r)
    res.aql_nn = avg_quantile_loss(pred["raw"][rec], te.r[rec], te.t[rec], taus, scale=100)
    res.aql_garch = avg_quantile_loss(q_g[d_idx, te.stock][rec], te.r[rec], te.t[rec], taus,
                                      scale=100)
    if keep:
        tab = ForecastTable(te.stock_ids[te.stock], te.dates[te.t], taus, pred["raw"],
                            pred["std"], te.sigma_bar, pred["market"], "two-stage")
        res.forecasts, res.garch_q, res.truth = tab, q_g, truth
    log.info("repetition %d done in %.0fs", seed, sum(clock.values()))
    return res


def run_study(cfg: StudyConfig, reps=3, seed=0, keep=False):
    return [run_repetition(cfg, seed=seed + r, keep=keep) for r in range(reps)]


def summarize(results) -> pd.DataFrame:
    """Mean and standard deviation of RMSE across repetitions, per tau."""
    nn = np.array([r.rmse_nn for r in results])
    g = np.array([r.rmse_garch for r in results])
    return pd.DataFrame({
        "tau": results[0].taus,
        "garch_mean": g.mean(0), "garch_sd": g.std(0, ddof=1) if len(results) > 1 else 0.0,
        "nn_mean": nn.mean(0), "nn_sd": nn.std(0, ddof=1) if len(results) > 1 else 0.0,
        "nn_wins": (nn < g).sum(0),
        "aql_garch": np.mean([r.aql_garch for r in results]),
        "aql_nn": np.mean([r.aql_nn for r in results]),
    })


def config_dict(cfg: StudyConfig):
    return asdict(cfg)
