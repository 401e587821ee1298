"""Batch command line: ``distforge <subcommand> [options]``.

Every run merges defaults, an optional ``--config`` file, ``DISTFORGE_*``
environment variables and ``--set key=value`` flags, writes its artifacts
into a staging directory, and moves them into ``--out`` only on success,
together with a ``manifest.json``.
"""
import argparse
import json
import logging
import shutil
import sys
import tempfile
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import ConfigError, load_config, write_manifest
from .records import FLOAT_FORMAT, MOMENT_COLUMNS, SchemaError

log = logging.getLogger("distforge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _exit_code(exc):
    from .density import InsufficientGridError
    from .features import PanelError
    from .market_sim import EmptyPoolError
    from .moments import DegenerateDistributionError
    from .nn import DimensionError, NNStateError
    from .qnn import InputError

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (DataError, SchemaError, PanelError, EmptyPoolError, InputError,
                        DimensionError, FileNotFoundError, pd.errors.EmptyDataError)):
        return EXIT_DATA, "data"
    if isinstance(exc, (NumericalError, DegenerateDistributionError, InsufficientGridError,
                        NNStateError, FloatingPointError, ArithmeticError,
                        np.linalg.LinAlgError)):
        return EXIT_NUMERIC, "numerical"
    return None, None


class Outputs:
    """Stage files in a temporary directory; publish them only when the run succeeds."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))
        self.written = []

    def path(self, name):
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(name)
        return p

    def csv(self, name, df, **kw):
        df.to_csv(self.path(name), index=False, float_format=FLOAT_FORMAT, **kw)

    def text(self, name, text):
        self.path(name).write_text(text)

    def commit(self):
        for name in dict.fromkeys(self.written):
            dst = self.out / name
            dst.parent.mkdir(parents=True, exist_ok=True)
            if dst.is_dir():
                shutil.rmtree(dst)
            (self.stage / name).replace(dst)
        shutil.rmtree(self.stage, ignore_errors=True)

    def discard(self):
        shutil.rmtree(self.stage, ignore_errors=True)


# --------------------------------------------------------------------------
# helpers


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise DataError(f"{what} file {path} does not exist")
    return path


def _dataclass_kwargs(cls, block):
    names = {f.name for f in fields(cls)}
    out = {}
    for k, v in block.items():
        if k in names and v is not None:
            out[k] = tuple(v) if isinstance(v, list) else v
    return out


def _train_config(cfg, seed):
    from .qnn import TrainConfig
    try:
        return TrainConfig(**{**_dataclass_kwargs(TrainConfig, cfg.block("train")),
                              "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train block: {exc}") from exc


def _feature_config(cfg):
    from .features import FeatureConfig
    try:
        return FeatureConfig(**_dataclass_kwargs(FeatureConfig, cfg.block("features")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"features block: {exc}") from exc


def _taus(cfg):
    from .taus import tau_grid
    return tau_grid(cfg["taus"])


def _is_integer_dates(dates):
    return np.issubdtype(np.asarray(dates).dtype, np.integer)


def month_end_index(dates):
    """Positions of the last trading day of each month.

    Integer dates are trading-day counters with 22-day months; anything else
    is parsed as a calendar date.
    """
    from .features import MONTH
    dates = np.asarray(dates)
    if _is_integer_dates(dates):
        return np.flatnonzero(dates % MONTH == MONTH - 1)
    try:
        dt = pd.to_datetime(pd.Series(dates))
    except (ValueError, TypeError) as exc:
        raise DataError(f"cannot parse panel dates: {exc}") from exc
    period = dt.dt.to_period("M").to_numpy()
    last = np.append(period[1:] != period[:-1], True)
    return np.flatnonzero(last)


def year_of(dates):
    from .features import YEAR
    dates = np.asarray(dates)
    if _is_integer_dates(dates):
        return dates // YEAR
    return pd.to_datetime(pd.Series(dates)).dt.year.to_numpy()


def _select_dates(panel, which):
    if which == "month-end":
        return month_end_index(panel.dates)
    if which == "all":
        return np.arange(len(panel.dates))
    if which == "last":
        return np.array([len(panel.dates) - 1])
    raise ConfigError(f"unknown date selection {which!r}")


def _load_panel(path):
    from .features import read_panel_csv
    return read_panel_csv(_need_file(path, "panel"))


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg, out):
    from .features import MONTH, forward_return, write_panel_csv
    from .market_sim import DgpSpec, simulate_panel, true_quantiles
    from .records import realized_frame

    sim_cfg = cfg.block("simulate")
    n_stocks = args.stocks if args.stocks is not None else sim_cfg.get("n_stocks", 100)
    n_years = args.years if args.years is not None else sim_cfg.get("n_years", 20)
    extra = {k: v for k, v in sim_cfg.items()
             if k not in ("n_stocks", "n_years", "true_paths")}
    try:
        spec = DgpSpec(**{**_dataclass_kwargs(DgpSpec, extra),
                          "n_stocks": int(n_stocks), "n_years": int(n_years)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulate block: {exc}") from exc
    params = None
    if args.pool:
        from .market_sim import sample_stock_params
        pool = pd.read_csv(_need_file(args.pool, "pool"), float_precision="round_trip")
        params = sample_stock_params(spec, seed=cfg.seed, pool=pool)
    sim = simulate_panel(spec, params, seed=cfg.seed)
    write_panel_csv(sim.panel, out.path("panel.csv"))
    out.csv("stock_params.csv", sim.params.frame().assign(stock_id=sim.panel.stock_ids))
    me = sim.month_ends()
    me = me[me + MONTH < spec.n_days]
    fwd = forward_return(sim.panel.ret, MONTH, spec.month_clip)[me]
    N = len(sim.params)
    out.csv("realized.csv", realized_frame(np.tile(sim.panel.stock_ids, me.size),
                                           np.repeat(me, N), fwd.ravel()))
    paths = args.true_paths if args.true_paths is not None else 0
    if paths:
        tq = true_quantiles(sim, me, paths=paths, taus=_taus(cfg), seed=cfg.seed)
        df = tq.to_frame(sim.panel.stock_ids, spec.days_per_month)
        df.insert(1, "date", np.repeat(np.repeat(me, N), tq.taus.size))
        df["excluded"] = np.repeat(tq.excluded.ravel(), tq.taus.size)
        out.csv("true_quantiles.csv", df)
    return {"spec": sim.manifest()}


def cmd_features(args, cfg, out):
    from .features import compute_features, features_frame
    panel = _load_panel(args.panel)
    fs = compute_features(panel, _feature_config(cfg))
    t_idx = _select_dates(panel, args.dates)
    out.csv("features.csv", features_frame(panel, fs, t_idx))
    return {"n_dates": int(t_idx.size), "n_features": fs.n_stock_inputs}


def _model_factory(kind, n_stock, n_market, taus, tcfg, width):
    from .qnn import BenchmarkNet, TwoStageNet
    if kind == "two-stage":
        return lambda j, seed=0: TwoStageNet(n_stock, n_market, taus=taus,
                                             dropout=tcfg.dropout, seed=seed + j)
    if kind in ("LNN", "1hNN", "2hNN"):
        return lambda j, seed=0: BenchmarkNet(kind, n_stock, taus=taus, width=width,
                                              dropout=tcfg.dropout, seed=seed + j)
    raise ConfigError(f"model {kind!r} cannot emit quantile forecasts; "
                      "choose two-stage, LNN, 1hNN or 2hNN")


def training_windows(panel, horizon, first_test_year=None, sample_step=5, burn_in=0):
    """Annual expanding windows as (train_t, forecast_t, year) triples.

    Training rows are every ``sample_step``-th day whose label window ends
    before the first day of the forecast year.
    """
    years = year_of(panel.dates)
    uniq = np.unique(years)
    if first_test_year is None:
        first_test_year = uniq[len(uniq) // 2]
    me = month_end_index(panel.dates)
    cand = np.arange(burn_in, len(panel.dates), sample_step)
    out = []
    for y in uniq[uniq >= first_test_year]:
        start = int(np.argmax(years == y))
        train_t = cand[cand + horizon < start]
        fc_t = me[years[me] == y]
        out.append((train_t, fc_t, int(y)))
    if not out:
        raise DataError(f"no dates in or after first test year {first_test_year}")
    return out


def cmd_train(args, cfg, out):
    from .features import MONTH, YEAR, build_design, compute_features
    from .qnn import ForecastTable, fit_ensemble
    from .records import write_forecasts

    panel = _load_panel(args.panel)
    tcfg = _train_config(cfg, cfg.seed)
    tb = cfg.block("train")
    kind = tb.get("model", "two-stage")
    taus = _taus(cfg)
    fs = compute_features(panel, _feature_config(cfg))
    factory = _model_factory(kind, fs.n_stock_inputs, fs.n_market_inputs, taus, tcfg,
                             int(tb.get("width", 128)))
    windows = training_windows(panel, MONTH, tb.get("first_test_year"),
                               int(tb.get("sample_step", 5)), burn_in=YEAR)
    tables, hist_rows, prev = [], [], None
    meta_windows = []
    for w, (train_t, fc_t, year) in enumerate(windows):
        tr = build_design(panel, fs, train_t, MONTH)
        ok = np.isfinite(tr.r)
        if not ok.any():
            warnings.warn(f"window {year} has no labelled training rows; skipped")
            continue
        ens, hists = fit_ensemble(lambda j, w=w: factory(j, seed=1000 * cfg.seed + 97 * w),
                                  tr.batch(ok), tcfg,
                                  previous=prev if tcfg.fine_tune else None,
                                  seed_offset=1000 * w)
        prev = ens
        for j, (m, h) in enumerate(zip(ens.members, hists)):
            m.store.save(out.path(f"checkpoints/w{year}_m{j:02d}.npz"))
            hist_rows.append({"window": year, "member": j, "epochs": h.epochs_run,
                              "best_epoch": h.best_epoch,
                              "best_val_loss": float(np.min(h.val_loss))})
        meta_windows.append(year)
        if fc_t.size:
            te = build_design(panel, fs, fc_t, MONTH)
            pred = ens.predict(te.batch(slice(None)))
            sid, dates = te.keys(slice(None))
            tables.append(ForecastTable(sid, dates, taus, pred["raw"], pred.get("std"),
                                        te.sigma_bar, pred.get("market"), kind))
    if not tables:
        raise DataError("no forecasts were produced")
    table = ForecastTable.concat(tables)
    if not table.monotone():
        raise NumericalError("forecast quantiles are not monotone")
    write_forecasts(table, out.path("forecasts.csv"))
    out.csv("history.csv", pd.DataFrame(hist_rows))
    model = {"kind": kind, "taus": taus.tolist(), "windows": meta_windows,
             "ensemble_size": tcfg.ensemble_size, "width": int(tb.get("width", 128)),
             "dropout": tcfg.dropout, "features": cfg.block("features"),
             "n_stock": fs.n_stock_inputs, "n_market": fs.n_market_inputs}
    out.text("checkpoints/model.json", json.dumps(model, indent=2))
    return {"n_records": len(table), "windows": meta_windows}


def load_checkpoint_ensemble(ckpt_dir, window=None):
    from .nn import ParamStore
    from .qnn import Ensemble, TrainConfig
    ckpt = Path(ckpt_dir)
    meta_path = ckpt / "model.json"
    if not meta_path.is_file():
        raise DataError(f"{ckpt} has no model.json")
    meta = json.loads(meta_path.read_text())
    year = meta["windows"][-1] if window is None else int(window)
    if year not in meta["windows"]:
        raise DataError(f"no checkpoint for window {year}")
    tcfg = TrainConfig(dropout=meta["dropout"])
    factory = _model_factory(meta["kind"], meta["n_stock"], meta["n_market"],
                             np.array(meta["taus"]), tcfg, meta["width"])
    members = []
    for j in range(meta["ensemble_size"]):
        model = factory(j)
        model.store.load_state(ParamStore.load(ckpt / f"w{year}_m{j:02d}.npz"))
        members.append(model)
    return Ensemble(members, meta["kind"]), meta


def cmd_forecast(args, cfg, out):
    from .features import MONTH, FeatureConfig, build_design, compute_features
    from .qnn import ForecastTable
    from .records import write_forecasts

    panel = _load_panel(args.panel)
    ens, meta = load_checkpoint_ensemble(args.checkpoints, args.window)
    fc = FeatureConfig(**_dataclass_kwargs(FeatureConfig, meta["features"] or {}))
    fs = compute_features(panel, fc)
    if fs.n_stock_inputs != meta["n_stock"]:
        raise DataError(f"panel yields {fs.n_stock_inputs} inputs, model expects "
                        f"{meta['n_stock']}")
    t_idx = _select_dates(panel, args.dates)
    te = build_design(panel, fs, t_idx, MONTH)
    if len(te) == 0:
        raise DataError("no active stocks at the requested dates")
    pred = ens.predict(te.batch(slice(None)))
    sid, dates = te.keys(slice(None))
    table = ForecastTable(sid, dates, ens.members[0].taus, pred["raw"], pred.get("std"),
                          te.sigma_bar, pred.get("market"), meta["kind"])
    write_forecasts(table, out.path("forecasts.csv"))
    return {"n_records": len(table)}


def _iter_records(args, cfg):
    from .records import read_forecasts
    table = read_forecasts(_need_file(args.forecasts, "forecast"))
    if getattr(args, "stock", None) is not None:
        table = table.select(table.stock_id.astype(str) == str(args.stock))
    if getattr(args, "date", None) is not None:
        table = table.select(table.date.astype(str) == str(args.date))
    if len(table) == 0:
        raise DataError("no forecast records match the selection")
    return table


def _density_kw(cfg):
    d = cfg.block("density")
    return {"d_min": float(d.get("d_min", 1e-5)), "gp": int(d.get("gp", 100)),
            "eps": float(d.get("eps", 1e-4))}


def cmd_density(args, cfg, out):
    from .density import QuantileGrid, fit_pdf
    table = _iter_records(args, cfg)
    kw = _density_kw(cfg)
    frames = []
    for i in range(len(table)):
        dens = fit_pdf(QuantileGrid(table.taus, table.q_raw[i]), **kw)
        frames.append(pd.DataFrame({
            "stock_id": table.stock_id[i], "date": table.date[i], "x": dens.x,
            "density": dens.density, "p_lower": dens.p_lower, "p_upper": dens.p_upper,
            "x_min": dens.x_min, "x_max": dens.x_max, "kind": dens.kind}))
    out.csv("densities.csv", pd.concat(frames, ignore_index=True))
    return {"n_records": len(table)}


def cmd_moments(args, cfg, out):
    from .density import QuantileGrid, fit_pdf
    from .moments import DegenerateDistributionError, integrate_moments
    table = _iter_records(args, cfg)
    kw = _density_kw(cfg)
    rows, failed = [], 0
    for i in range(len(table)):
        row = {"stock_id": table.stock_id[i], "date": table.date[i]}
        try:
            ms = integrate_moments(fit_pdf(QuantileGrid(table.taus, table.q_raw[i]), **kw))
        except (DegenerateDistributionError, ValueError) as exc:
            failed += 1
            log.warning("record (%s, %s): %s", table.stock_id[i], table.date[i], exc)
            rows.append({**row, "fallback_flag": True})
            continue
        rows.append({**row, "mean": ms.mean, "variance": ms.variance,
                     "skewness": ms.skewness, "kurtosis": ms.kurtosis,
                     "variance_adj": ms.variance_adj, "skewness_adj": ms.skewness_adj,
                     "kurtosis_adj": ms.kurtosis_adj, "fallback_flag": bool(ms.fallback)})
    if failed == len(table):
        raise NumericalError("moment integration failed for every record")
    out.csv("moments.csv", pd.DataFrame(rows, columns=list(MOMENT_COLUMNS)))
    return {"n_records": len(table), "n_failed": failed}


def cmd_garch_forecast(args, cfg, out):
    from .garch import MU_PREMIUM, rolling_forecasts
    from .qnn import ForecastTable
    from .records import write_forecasts

    panel = _load_panel(args.returns)
    g = cfg.block("garch")
    taus = _taus(cfg)
    t_idx = _select_dates(panel, args.dates)
    horizon = int(g.get("horizon", 22))
    mu = float(g.get("mu", MU_PREMIUM)) - float(g.get("rf", 0.0))
    sids, dates, qs, vols = [], [], [], []
    for j, sid in enumerate(panel.stock_ids):
        act = t_idx[np.isfinite(panel.ret[t_idx, j])]
        if act.size == 0:
            continue
        Q, vol, _ = rolling_forecasts(panel.ret[:, j], act, window=int(g.get("window", 756)),
                                      horizon=horizon, paths=int(g.get("paths", 10_000)),
                                      taus=taus, dist=g.get("dist", "t"), mu=mu,
                                      seed=[cfg.seed, j])
        ok = np.all(np.isfinite(Q), axis=1)
        sids.append(np.repeat(sid, ok.sum()))
        dates.append(np.asarray(panel.dates)[act[ok]])
        qs.append(Q[ok])
        vols.append(vol[ok])
    if not qs or sum(q.shape[0] for q in qs) == 0:
        raise DataError("no stock has enough history for a GARCH fit")
    q = np.concatenate(qs)
    table = ForecastTable(np.concatenate(sids), np.concatenate(dates), taus, q,
                          model_id="garch-" + g.get("dist", "t"))
    write_forecasts(table, out.path("forecasts.csv"))
    out.csv("volatility.csv", pd.DataFrame({"stock_id": table.stock_id, "date": table.date,
                                            "volatility": np.concatenate(vols)}))
    return {"n_records": len(table)}


def _common_records(tables, realized):
    """Restrict every table to the (stock, date) keys all models share."""
    from .records import join_realized
    keys = None
    for t in tables:
        k = set(zip(t.stock_id.astype(str), t.date.astype(str)))
        keys = k if keys is None else keys & k
    out = []
    for t in tables:
        kk = np.array([(s, d) in keys for s, d in zip(t.stock_id.astype(str),
                                                       t.date.astype(str))], dtype=bool)
        sub = t.select(kk)
        order = np.lexsort((sub.stock_id.astype(str), sub.date.astype(str)))
        sub = sub.select(order)
        out.append((sub, join_realized(sub, realized)))
    return out


def cmd_evaluate(args, cfg, out):
    from .evaluation import crps_many, dm_test, loss_panel, metrics_table
    from .records import read_forecasts, read_realized

    paths = [_need_file(p, "forecast") for p in args.forecasts]
    names = args.names or [Path(p).stem for p in paths]
    if len(names) != len(paths):
        raise ConfigError("--names must match --forecasts one to one")
    tables = [read_forecasts(p, model_id=n) for p, n in zip(paths, names)]
    taus = tables[0].taus
    if any(t.taus.shape != taus.shape or not np.allclose(t.taus, taus) for t in tables):
        raise DataError("models use different tau grids")
    realized = read_realized(_need_file(args.realized, "realized"))
    ev = cfg.block("evaluate")
    lags = int(ev.get("lags", 12))
    recs = _common_records(tables, realized)
    rows, panels = [], []
    for name, (t, r) in zip(names, recs):
        ok = np.isfinite(r)
        if not ok.any():
            raise DataError(f"model {name}: no forecast has a realized return")
        row = {"model": name, **metrics_table(t.q_raw, r, t.date.astype(str), taus)}
        if ev.get("crps"):
            row["crps"] = float(crps_many(t.q_raw[ok], r[ok], taus).mean() * 100)
        rows.append(row)
        panels.append(loss_panel(t.q_raw, r, t.date.astype(str), taus))
        out.csv(f"metrics_{name}.csv", pd.DataFrame([row]))
    out.csv("metrics.csv", pd.DataFrame(rows))
    dm_rows = []
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            try:
                res = dm_test(panels[a].mean_loss, panels[b].mean_loss, lags)
            except ValueError as exc:
                log.warning("DM %s vs %s: %s", names[a], names[b], exc)
                continue
            dm_rows.append({"model_a": names[a], "model_b": names[b],
                            "statistic": res.statistic, "mean_diff": res.mean_diff,
                            "se": res.se, "p_value": res.p_value, "lags": res.lags,
                            "n_dates": res.n, "degenerate": res.degenerate})
    out.csv("dm.csv", pd.DataFrame(dm_rows, columns=[
        "model_a", "model_b", "statistic", "mean_diff", "se", "p_value", "lags",
        "n_dates", "degenerate"]))
    return {"models": names}


def _signal(table, kind, cfg):
    from .taus import find_tau
    if kind == "median":
        return table.q_raw[:, find_tau(table.taus, 0.5)]
    if kind.startswith("tau:"):
        return table.q_raw[:, find_tau(table.taus, float(kind[4:]))]
    if kind in ("mean", "volatility", "skewness"):
        from .density import QuantileGrid, fit_pdf
        from .moments import integrate_moments
        kw = _density_kw(cfg)
        vals = np.full(len(table), np.nan)
        for i in range(len(table)):
            try:
                ms = integrate_moments(fit_pdf(QuantileGrid(table.taus, table.q_raw[i]), **kw))
            except ValueError:
                continue
            vals[i] = {"mean": ms.mean, "volatility": ms.volatility,
                       "skewness": ms.skewness_adj}[kind]
        return vals
    raise ConfigError(f"unknown signal {kind!r}")


def cmd_backtest(args, cfg, out):
    from .portfolio import SortSpec, backtest
    from .records import join_realized, read_forecasts, read_realized

    table = read_forecasts(_need_file(args.forecasts, "forecast"))
    realized = read_realized(_need_file(args.realized, "realized"))
    bt = cfg.block("backtest")
    try:
        spec = SortSpec(int(bt.get("n_groups", 10)), bt.get("weighting", "equal"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sig = _signal(table, args.signal or bt.get("signal", "median"), cfg)
    r = join_realized(table, realized)
    sid, dates = table.stock_id.astype(str), table.date.astype(str)
    udates = np.unique(dates)
    usid = np.unique(sid)
    di, si = np.searchsorted(udates, dates), np.searchsorted(usid, sid)
    S = np.full((udates.size, usid.size), np.nan)
    R = np.full_like(S, np.nan)
    S[di, si], R[di, si] = sig, r
    caps = None
    if spec.weighting == "value":
        if not args.caps:
            raise ConfigError("value weighting needs --caps")
        cdf = pd.read_csv(_need_file(args.caps, "market-cap"), float_precision="round_trip")
        if {"stock_id", "date", "mcap"} - set(cdf.columns):
            raise SchemaError("market-cap file needs stock_id,date,mcap")
        caps = np.full_like(S, np.nan)
        ci = np.searchsorted(udates, cdf["date"].astype(str).to_numpy())
        cj = np.searchsorted(usid, cdf["stock_id"].astype(str).to_numpy())
        keep = ((ci < udates.size) & (cj < usid.size))
        keep &= udates[np.minimum(ci, udates.size - 1)] == cdf["date"].astype(str).to_numpy()
        keep &= usid[np.minimum(cj, usid.size - 1)] == cdf["stock_id"].astype(str).to_numpy()
        caps[ci[keep], cj[keep]] = cdf["mcap"].to_numpy()[keep]
    res = backtest(S, R, spec, caps, udates, int(cfg.block("evaluate").get("lags", 12)))
    out.csv("portfolio.csv", res.frame())
    out.csv("summary.csv", res.summary())
    return {"n_dates": int(res.dates.size)}


def cmd_repro_table_e1(args, cfg, out):
    from .moments import table_e1
    tab = table_e1(taus=cfg["taus"])
    out.csv("table_e1.csv", tab)
    print(tab.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return {}


def study_config(cfg, reps_override=None):
    from .market_sim import DgpSpec
    from .study import StudyConfig
    st, sm = cfg.block("study"), cfg.block("simulate")
    tcfg = _train_config(cfg, cfg.seed)
    from dataclasses import replace
    tcfg = replace(tcfg, batch_size=int(st.get("batch_size", 1024)),
                   ensemble_size=int(st.get("ensemble_size", 5)))
    extra = {k: v for k, v in sm.items() if k not in ("true_paths",)}
    try:
        dgp = DgpSpec(**_dataclass_kwargs(DgpSpec, extra))
        return StudyConfig(dgp=dgp, train_years=int(st.get("train_years", 10)),
                           burn_in_days=int(st.get("burn_in_days", 264)),
                           sample_step=int(st.get("sample_step", 5)),
                           true_paths=int(st.get("true_paths", 10_000)),
                           garch_paths=int(st.get("garch_paths", 10_000)),
                           garch_window=int(cfg.block("garch").get("window", 756)),
                           train=tcfg, features=_feature_config(cfg),
                           taus=None if cfg["taus"] is None else tuple(cfg["taus"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"study configuration: {exc}") from exc


def cmd_repro_sim(args, cfg, out):
    from .study import CENTRAL_TAUS, run_repetition, summarize
    scfg = study_config(cfg)
    reps = args.reps if args.reps is not None else int(cfg.block("study").get("reps", 3))
    results = []
    for k in range(reps):
        res = run_repetition(scfg, seed=cfg.seed + k)
        results.append(res)
        out.csv(f"rmse_rep{k}.csv", res.table())
        print(f"repetition {k}: two-stage below GARCH at tau {CENTRAL_TAUS}: "
              f"{res.nn_wins()}", flush=True)
    summary = summarize(results)
    out.csv("summary.csv", summary)
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    wins = sum(r.nn_wins() for r in results)
    print(f"two-stage wins {wins} of {reps} repetitions")
    return {"wins": wins, "reps": reps,
            "seconds": [r.seconds for r in results]}


COMMANDS = {
    "simulate": cmd_simulate, "features": cmd_features, "train": cmd_train,
    "forecast": cmd_forecast, "density": cmd_density, "moments": cmd_moments,
    "garch-forecast": cmd_garch_forecast, "evaluate": cmd_evaluate,
    "backtest": cmd_backtest, "repro-table-e1": cmd_repro_table_e1,
    "repro-sim": cmd_repro_sim,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="distforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"distforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a synthetic panel")
    s.add_argument("--stocks", type=int)
    s.add_argument("--years", type=int)
    s.add_argument("--pool", help="CSV of per-stock GARCH parameters to sample from")
    s.add_argument("--true-paths", type=int, help="bootstrap paths for true quantiles")

    s = sub.add_parser("features", parents=[common], help="standardised feature table")
    s.add_argument("--panel", required=True)
    s.add_argument("--dates", default="month-end", choices=("month-end", "all", "last"))

    s = sub.add_parser("train", parents=[common], help="train networks on a panel")
    s.add_argument("--panel", required=True)

    s = sub.add_parser("forecast", parents=[common], help="forecast from checkpoints")
    s.add_argument("--panel", required=True)
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--window", type=int, help="training window (year) to use")
    s.add_argument("--dates", default="last", choices=("month-end", "all", "last"))

    for name, helptext in (("density", "spline densities from forecasts"),
                           ("moments", "moments from forecasts")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--forecasts", required=True)
        s.add_argument("--stock")
        s.add_argument("--date")

    s = sub.add_parser("garch-forecast", parents=[common], help="rolling GARCH forecasts")
    s.add_argument("--returns", required=True, help="panel CSV of daily returns")
    s.add_argument("--dates", default="month-end", choices=("month-end", "all", "last"))

    s = sub.add_parser("evaluate", parents=[common], help="losses and DM tests")
    s.add_argument("--forecasts", nargs="+", required=True)
    s.add_argument("--names", nargs="+")
    s.add_argument("--realized", required=True)

    s = sub.add_parser("backtest", parents=[common], help="decile portfolio sorts")
    s.add_argument("--forecasts", required=True)
    s.add_argument("--realized", required=True)
    s.add_argument("--caps")
    s.add_argument("--signal", help="median, mean, volatility, skewness or tau:<level>")

    sub.add_parser("repro-table-e1", parents=[common], help="analytic moment table")
    s = sub.add_parser("repro-sim", parents=[common], help="scaled simulation study")
    s.add_argument("--reps", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config"
    out = None
    try:
        overrides = list(args.overrides)
        for key in ("seed", "threads"):
            if getattr(args, key) is not None:
                overrides.append(f"{key}={getattr(args, key)}")
        if args.out is not None:
            overrides.append(f"output_dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        _set_threads(cfg["threads"])
        stage = args.command
        out = Outputs(cfg["output_dir"])
        with np.errstate(over="ignore", under="ignore"):
            extra = COMMANDS[args.command](args, cfg, out)
        out.commit()
        write_manifest(out.out, cfg, args.command,
                       {"outputs": sorted(set(out.written)), **(extra or {})})
        return EXIT_OK
    except Exception as exc:
        if out is not None:
            out.discard()
        code, kind = _exit_code(exc)
        if code is None:
            raise
        print(json.dumps({"status": "error", "stage": stage, "kind": kind,
                          "message": str(exc)}), file=sys.stderr)
        return code


def _set_threads(n):
    import numba
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    with warnings.catch_warnings():
        # the threading-layer probe warns about old TBB builds; it is irrelevant here
        warnings.simplefilter("ignore")
        try:
            numba.set_num_threads(n)
        except (ValueError, AttributeError):
            pass


if __name__ == "__main__":
    sys.exit(main())
