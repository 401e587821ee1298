"""CSV schemas shared between pipeline stages."""
import numpy as np
import pandas as pd

from .qnn import ForecastTable
from .taus import tau_grid

FORECAST_COLUMNS = ("stock_id", "date", "tau", "q_std", "q_raw")
MOMENT_COLUMNS = ("stock_id", "date", "mean", "variance", "skewness", "kurtosis",
                  "variance_adj", "skewness_adj", "kurtosis_adj", "fallback_flag")
FLOAT_FORMAT = "%.17g"


class SchemaError(ValueError):
    pass


def forecasts_frame(table: ForecastTable) -> pd.DataFrame:
    n, K = table.q_raw.shape
    q_std = table.q_std if table.q_std is not None else np.full((n, K), np.nan)
    return pd.DataFrame({
        "stock_id": np.repeat(table.stock_id, K),
        "date": np.repeat(table.date, K),
        "tau": np.tile(table.taus, n),
        "q_std": q_std.ravel(),
        "q_raw": table.q_raw.ravel(),
    })


def write_forecasts(table: ForecastTable, path):
    forecasts_frame(table).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_forecasts(path, model_id=None) -> ForecastTable:
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaError(f"cannot read forecasts {path}: {exc}") from exc
    missing = set(FORECAST_COLUMNS) - set(df.columns)
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    if df.duplicated(["stock_id", "date", "tau"]).any():
        raise SchemaError(f"{path}: duplicate (stock_id, date, tau) rows")
    taus = tau_grid(np.sort(df["tau"].unique()))
    raw = df.pivot(index=["stock_id", "date"], columns="tau", values="q_raw")
    if raw.isna().any().any():
        raise SchemaError(f"{path}: records with missing tau levels")
    std = df.pivot(index=["stock_id", "date"], columns="tau", values="q_std")
    std_arr = std.to_numpy() if std.notna().any().any() else None
    sid = raw.index.get_level_values(0).to_numpy()
    date = raw.index.get_level_values(1).to_numpy()
    return ForecastTable(sid, date, taus, raw.to_numpy(), std_arr,
                         model_id=model_id or str(path))


def realized_frame(stock_id, date, ret) -> pd.DataFrame:
    return pd.DataFrame({"stock_id": stock_id, "date": date, "ret": ret})


def read_realized(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SchemaError(f"cannot read realized returns {path}: {exc}") from exc
    if {"stock_id", "date", "ret"} - set(df.columns):
        raise SchemaError(f"{path}: realized file needs stock_id,date,ret")
    return df


def join_realized(table: ForecastTable, realized: pd.DataFrame) -> np.ndarray:
    """Realized return for each forecast record (NaN where absent); exact key match."""
    keys = pd.DataFrame({"stock_id": table.stock_id, "date": table.date})
    rr = realized[["stock_id", "date", "ret"]].drop_duplicates(["stock_id", "date"])
    for col in ("stock_id", "date"):
        if keys[col].dtype != rr[col].dtype:
            keys[col] = keys[col].astype(str)
            rr = rr.assign(**{col: rr[col].astype(str)})
    return keys.merge(rr, on=["stock_id", "date"], how="left")["ret"].to_numpy()
