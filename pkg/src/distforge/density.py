"""Quantile forecasts to a smooth density with discrete tail masses.

The CDF is approximated by a cubic interpolating spline through the
(quantile value, tau) pairs and differentiated on a dense grid. Densities
with a near-atom (common for illiquid stocks with many zero-return days)
fall back to a linear spline.
"""
import io
import logging
from dataclasses import dataclass

import numpy as np

from .spline import SplineCDF, SplineError, cubic_spline, linear_spline
from .taus import find_tau

log = logging.getLogger(__name__)

GRID_POINTS = 100
D_MIN = 1e-5
EPS = 1e-4
MIN_KNOTS = 6


class InsufficientGridError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileGrid:
    taus: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        taus = np.asarray(self.taus, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if taus.shape != values.shape or taus.ndim != 1:
            raise ValueError("taus and values must be 1-d and equally long")
        if np.any(taus <= 0) or np.any(taus >= 1) or np.any(np.diff(taus) <= 0):
            raise ValueError("taus must be strictly increasing in (0, 1)")
        if not np.all(np.isfinite(values)):
            raise ValueError("quantile values must be finite")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.taus.size


@dataclass(frozen=True)
class DensityApprox:
    x: np.ndarray
    density: np.ndarray
    p_lower: float
    p_upper: float
    x_min: float
    x_max: float
    kind: str
    cdf: SplineCDF

    @property
    def fallback(self) -> bool:
        return self.kind == "linear"


def _collapse_floor(values, taus):
    # drop all but the highest quantile sitting at a -100% return
    z = int(np.count_nonzero(values[1:] == -1.0))
    return values[z:], taus[z:]


def _push_apart(values, eps):
    x = values.copy()
    for i in range(x.size - 1):
        x[i + 1] = max(x[i + 1], x[i] + eps)
    return x


def preprocess_quantiles(g: QuantileGrid, eps: float = EPS) -> QuantileGrid:
    """Collapse repeated -1 quantiles and enforce ``eps`` spacing."""
    if len(g) < MIN_KNOTS:
        raise InsufficientGridError(f"need at least {MIN_KNOTS} quantiles, got {len(g)}")
    values, taus = _collapse_floor(g.values, g.taus)
    if values.size < MIN_KNOTS:
        raise InsufficientGridError(
            f"only {values.size} quantiles left after collapsing -1 entries")
    return QuantileGrid(taus, _push_apart(values, eps))


def _outlier_guards(values, taus):
    """Abscissae of the 0.1 and 0.9 quantiles bounding the fallback check."""
    if taus.min() < 0.05:
        i = find_tau(taus, 0.1)
        lo = values[i] if i is not None else float(np.interp(0.1, taus, values))
    else:
        lo = values[2]
    i = find_tau(taus, 0.9)
    hi = values[i] if i is not None else float(np.interp(0.9, taus, values))
    return float(lo), float(hi)


def dense_grid(values, gp: int = GRID_POINTS) -> np.ndarray:
    """``gp`` equally spaced points per interval, first and last interval skipped.

    A K-point input gives ``(K - 3) * gp`` abscissae; each interval contributes
    its left end but not its right end.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 4:
        raise InsufficientGridError("dense grid needs at least 4 points")
    lo = x[1:-2]
    hi = x[2:-1]
    frac = np.arange(gp) / gp
    pts = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
    return np.unique(pts.ravel())


def _fit_spline(x, y, kind):
    return cubic_spline(x, y) if kind == "cubic" else linear_spline(x, y)


def fit_pdf(g: QuantileGrid, d_min: float = D_MIN, gp: int = GRID_POINTS,
            eps: float = EPS, preprocess: bool = True) -> DensityApprox:
    """Approximate the density implied by a quantile grid."""
    if preprocess:
        if len(g) < MIN_KNOTS:
            raise InsufficientGridError(
                f"need at least {MIN_KNOTS} quantiles, got {len(g)}")
        values, taus = _collapse_floor(g.values, g.taus)
        if values.size < MIN_KNOTS:
            raise InsufficientGridError(
                f"only {values.size} quantiles left after collapsing -1 entries")
        x_q10, x_q90 = _outlier_guards(values, taus)
        x = _push_apart(values, eps)
    else:
        taus, x = g.taus, g.values
        x_q10, x_q90 = _outlier_guards(x, taus)
    y = taus

    # close the last interval so the integrated support is [x[1], x[-2]]
    xt = np.append(dense_grid(x, gp), x[-2])
    kind = "cubic"
    try:
        spline = cubic_spline(x, y)
        d = spline(xt, 1)
        core = (xt >= x_q10) & (xt <= x_q90)
        if not np.all(np.isfinite(d)) or (core.any() and d[core].min() < d_min):
            kind = "linear"
    except SplineError:
        kind = "linear"
    if kind == "linear":
        spline = linear_spline(x, y)
        d = spline(xt, 1)

    d = np.maximum(d, d_min)

    # flatten the tails outward from their minimum
    left = np.flatnonzero(xt <= x_q10)
    if left.size:
        v = left[np.argmin(d[left])]
        d[:v] = d[v]
    right = np.flatnonzero(xt >= x_q90)
    if right.size:
        v = right[np.argmin(d[right])]
        d[v:] = d[v]

    x_min, x_max = float(x.min()), float(x.max())
    if xt.min() < -1.0:
        keep = xt >= -1.0
        d, xt = d[keep], xt[keep]
        x_min = -1.0

    p_lower = float(np.clip(spline(x_min), 0.0, 1.0))
    p_upper = float(np.clip(1.0 - spline(x_max), 0.0, 1.0))
    if kind == "linear":
        log.debug("linear density fallback on grid spanning [%g, %g]", x_min, x_max)
    return DensityApprox(xt, d, p_lower, p_upper, x_min, x_max, kind, spline)


def eval_cdf(dens: DensityApprox, x):
    """CDF value, clamped to the support bounds and to [0, 1]."""
    xc = np.clip(np.asarray(x, dtype=np.float64), dens.x_min, dens.x_max)
    out = np.clip(dens.cdf(xc), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def cdf_on_grid(dens: DensityApprox, xs) -> np.ndarray:
    """CDF on a sorted grid with any spline wiggle removed by a running max."""
    return np.maximum.accumulate(eval_cdf(dens, np.asarray(xs, dtype=np.float64)))


def density_csv(dens: DensityApprox) -> str:
    buf = io.StringIO()
    g = lambda v: repr(float(v))
    buf.write(f"# p_lower={g(dens.p_lower)},p_upper={g(dens.p_upper)},"
              f"x_min={g(dens.x_min)},x_max={g(dens.x_max)},kind={dens.kind}\n")
    buf.write("x,density\n")
    for xi, di in zip(dens.x, dens.density):
        buf.write(f"{g(xi)},{g(di)}\n")
    return buf.getvalue()


def read_density_csv(text: str):
    """Parse :func:`density_csv` output into ``(meta, x, density)``."""
    lines = text.splitlines()
    meta = {}
    for item in lines[0].lstrip("# ").split(","):
        k, v = item.split("=")
        meta[k] = v if k == "kind" else float(v)
    body = np.array([[float(c) for c in ln.split(",")] for ln in lines[2:] if ln])
    return meta, body[:, 0], body[:, 1]
