"""Distributional forecasts of monthly stock returns from quantile networks."""
__version__ = "0.1.0"

from .taus import DEFAULT_TAUS, pinball, tau_grid

__all__ = ["DEFAULT_TAUS", "__version__", "pinball", "tau_grid"]
