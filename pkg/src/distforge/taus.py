"""Quantile-level grids and the pinball loss."""
import numpy as np

DEFAULT_TAUS = np.array(
    [0.00005, 0.0001, 0.001, 0.005]
    + [0.01, 0.02, 0.03, 0.04, 0.05]
    + [0.075, 0.1]
    + [round(0.15 + 0.05 * i, 2) for i in range(14)]
    + [0.85, 0.9, 0.925]
    + [0.95, 0.96, 0.97, 0.98, 0.99]
    + [0.995, 0.999, 0.9999, 0.99995]
)


def tau_grid(taus=None) -> np.ndarray:
    """Validate a quantile-level grid; ``None`` gives the 37-level default."""
    if taus is None:
        return DEFAULT_TAUS.copy()
    taus = np.asarray(taus, dtype=np.float64).ravel()
    if taus.size == 0:
        raise ValueError("empty tau grid")
    if np.any(taus <= 0.0) or np.any(taus >= 1.0):
        raise ValueError("tau levels must lie in (0, 1)")
    if np.any(np.diff(taus) <= 0.0):
        raise ValueError("tau levels must be strictly increasing")
    return taus


def pinball(tau, xi):
    """Quantile loss ``tau*xi`` for ``xi >= 0`` and ``(tau-1)*xi`` otherwise.

    Broadcasts over array inputs. ``tau`` must lie strictly inside (0, 1).
    """
    tau_arr = np.asarray(tau, dtype=np.float64)
    if np.any(tau_arr <= 0.0) or np.any(tau_arr >= 1.0):
        raise ValueError("tau must lie in (0, 1)")
    xi = np.asarray(xi, dtype=np.float64)
    out = np.where(xi >= 0.0, tau_arr * xi, (tau_arr - 1.0) * xi)
    if out.ndim == 0:
        return float(out)
    return out


def find_tau(taus, level, atol=1e-12):
    """Index of ``level`` in ``taus`` or ``None``."""
    hit = np.flatnonzero(np.abs(np.asarray(taus) - level) <= atol)
    return int(hit[0]) if hit.size else None
