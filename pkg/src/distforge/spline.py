"""Interpolating splines used as CDF approximations.

The cubic spline uses not-a-knot end conditions, which is the interpolant
produced by an exact-fit cubic B-spline with knots at the interior data
points. The linear spline is the degree-1 B-spline through the same points.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from ._accel import njit, pick


class SplineError(ValueError):
    pass


def _nak_system(x, y):
    """Banded form (1 sub / 1 super diagonal) of the not-a-knot slope system."""
    n = x.size
    dx = np.diff(x)
    slope = np.diff(y) / dx
    ab = np.zeros((3, n))
    b = np.empty(n)
    # interior rows
    ab[1, 1:-1] = 2.0 * (dx[:-1] + dx[1:])
    ab[0, 2:] = dx[:-1]
    ab[2, :-2] = dx[1:]
    b[1:-1] = 3.0 * (dx[1:] * slope[:-1] + dx[:-1] * slope[1:])
    # not-a-knot at the left end
    ab[1, 0] = dx[1]
    ab[0, 1] = dx[0] + dx[1]
    d = dx[0] + dx[1]
    b[0] = ((dx[0] + 2.0 * d) * dx[1] * slope[0] + dx[0] ** 2 * slope[1]) / d
    # not-a-knot at the right end
    ab[1, -1] = dx[-2]
    ab[2, -2] = dx[-1] + dx[-2]
    d = dx[-1] + dx[-2]
    b[-1] = (dx[-1] ** 2 * slope[-2] + (2.0 * d + dx[-1]) * dx[-2] * slope[-1]) / d
    return ab, b


def _nak_slopes_np(x, y):
    ab, b = _nak_system(x, y)
    return solve_banded((1, 1), ab, b)


@njit
def _nak_slopes_nb(x, y):
    n = x.shape[0]
    dx = np.empty(n - 1)
    slope = np.empty(n - 1)
    for i in range(n - 1):
        dx[i] = x[i + 1] - x[i]
        slope[i] = (y[i + 1] - y[i]) / dx[i]
    lower = np.zeros(n)
    diag = np.zeros(n)
    upper = np.zeros(n)
    rhs = np.zeros(n)
    for i in range(1, n - 1):
        lower[i] = dx[i]
        diag[i] = 2.0 * (dx[i - 1] + dx[i])
        upper[i] = dx[i - 1]
        rhs[i] = 3.0 * (dx[i] * slope[i - 1] + dx[i - 1] * slope[i])
    d = dx[0] + dx[1]
    diag[0] = dx[1]
    upper[0] = d
    rhs[0] = ((dx[0] + 2.0 * d) * dx[1] * slope[0] + dx[0] * dx[0] * slope[1]) / d
    d = dx[n - 2] + dx[n - 3]
    lower[n - 1] = d
    diag[n - 1] = dx[n - 3]
    rhs[n - 1] = (dx[n - 2] * dx[n - 2] * slope[n - 3]
                  + (2.0 * d + dx[n - 2]) * dx[n - 3] * slope[n - 2]) / d
    # Thomas sweep; the not-a-knot rows eliminate cleanly into row 1
    cp = np.empty(n)
    dp = np.empty(n)
    cp[0] = upper[0] / diag[0]
    dp[0] = rhs[0] / diag[0]
    for i in range(1, n):
        den = diag[i] - lower[i] * cp[i - 1]
        cp[i] = upper[i] / den
        dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / den
    s = np.empty(n)
    s[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        s[i] = dp[i] - cp[i] * s[i + 1]
    return s


nak_slopes = pick(_nak_slopes_nb, _nak_slopes_np)


@dataclass(frozen=True)
class SplineCDF:
    """Piecewise polynomial through ``(knots, values)``.

    ``coef`` has shape ``(4, n-1)``; on ``[knots[i], knots[i+1]]`` the spline
    is ``sum_p coef[p, i] * (x - knots[i])**p``. Outside the knots the end
    polynomials are extrapolated; callers clamp.
    """

    knots: np.ndarray
    coef: np.ndarray
    kind: str

    def _locate(self, x):
        idx = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(idx, 0, self.knots.size - 2)

    def __call__(self, x, nu=0):
        x = np.asarray(x, dtype=np.float64)
        i = self._locate(x)
        t = x - self.knots[i]
        c0, c1, c2, c3 = (self.coef[p, i] for p in range(4))
        if nu == 0:
            return c0 + t * (c1 + t * (c2 + t * c3))
        if nu == 1:
            return c1 + t * (2.0 * c2 + t * 3.0 * c3)
        if nu == 2:
            return 2.0 * c2 + 6.0 * c3 * t
        raise ValueError("derivative order must be 0, 1 or 2")

    @property
    def lower(self):
        return float(self.knots[0])

    @property
    def upper(self):
        return float(self.knots[-1])


def _check_knots(x, y, need):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise SplineError("knots and values must be 1-d arrays of equal length")
    if x.size < need:
        raise SplineError(f"need at least {need} knots, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise SplineError("non-finite knot data")
    if np.any(np.diff(x) <= 0.0):
        raise SplineError("knots must be strictly increasing")
    return x, y


def cubic_spline(x, y) -> SplineCDF:
    """Not-a-knot cubic interpolant."""
    x, y = _check_knots(x, y, 4)
    s = nak_slopes(x, y)
    if not np.all(np.isfinite(s)):
        raise SplineError("singular spline system")
    dx = np.diff(x)
    m = np.diff(y) / dx
    coef = np.empty((4, x.size - 1))
    coef[0] = y[:-1]
    coef[1] = s[:-1]
    coef[2] = (3.0 * m - 2.0 * s[:-1] - s[1:]) / dx
    coef[3] = (s[:-1] + s[1:] - 2.0 * m) / dx**2
    return SplineCDF(x, coef, "cubic")


def linear_spline(x, y) -> SplineCDF:
    x, y = _check_knots(x, y, 2)
    coef = np.zeros((4, x.size - 1))
    coef[0] = y[:-1]
    coef[1] = np.diff(y) / np.diff(x)
    return SplineCDF(x, coef, "linear")
