"""dgsplit: a 2D DG acoustic wave solver with non-iterative overlapping
domain-splitting time integration, plus Crank-Nicolson / leapfrog baselines."""

__version__ = "0.1.0"

from . import comms, dg_space, harness, integrators, linalg, mesh, splitting, swip
from .errors import DgSplitError

__all__ = [
    "DgSplitError",
    "comms",
    "dg_space",
    "harness",
    "integrators",
    "linalg",
    "mesh",
    "splitting",
    "swip",
    "__version__",
]
