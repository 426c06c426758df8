"""Steady states and functional-parameter inference for 1-D aggregation-diffusion equations."""

import jax

# gradients are checked against finite differences at 1e-5 relative accuracy
jax.config.update("jax_enable_x64", True)

from .grid import GridFunction, PeriodicGrid  # noqa: E402

__version__ = "0.1.0"

__all__ = ["GridFunction", "PeriodicGrid", "__version__"]
