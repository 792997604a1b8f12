"""Compressible slip-wall flow laboratory in the unit ball.

Builds the uniformly rotating steady family, evolves angular-momentum-
preserving perturbations on an axisymmetric spherical meridian grid, and
measures conservation, inequality constants, energy balance, and exponential
decay.
"""

__version__ = "0.1.0"

from . import diagnostics, dynamics, geometry, korn, steady  # noqa: F401
from ._kernels import BACKEND as kernel_backend  # noqa: F401
