"""Long-range random walks on uniformly discrete metric measure spaces.

Exact heat kernels, Monte Carlo first-passage estimates and empirical
certificates for two-sided heat kernel bounds, functional inequalities and
the parabolic Harnack inequality.
"""
__version__ = "0.1.0"

from .errors import LRWalkError  # noqa: E402
from .heat import HeatTable, PoissonRow, build_table, evolve, poissonize  # noqa: E402
from .kernel import TransitionKernel, apply_P, build_kernel, dirichlet_energy  # noqa: E402
from .rv import RegVaryingFn, SlowlyVaryingFn, concave_regularize  # noqa: E402
from .space import FiniteSpace, LatticeSpace, MetricMeasureSpace  # noqa: E402
from .verify import BoundReport, HarnackReport  # noqa: E402

__all__ = [
    "LRWalkError", "HeatTable", "PoissonRow", "build_table", "evolve", "poissonize",
    "TransitionKernel", "apply_P", "build_kernel", "dirichlet_energy", "RegVaryingFn",
    "SlowlyVaryingFn", "concave_regularize", "FiniteSpace", "LatticeSpace",
    "MetricMeasureSpace", "BoundReport", "HarnackReport",
]
