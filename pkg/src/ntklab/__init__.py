"""Neural tangent kernel laboratory: analytic kernels, kernel regression,
linearized dynamics, distillation, attacks and eigenfeature analysis."""

__version__ = "0.1.0"

from .data import Dataset, make_rng  # noqa: E402
from .kernel import KernelSpec, eigendecompose, gram, ntk_eval  # noqa: E402
from .regression import KernelPredictor, NTKRegressor  # noqa: E402

__all__ = ["Dataset", "KernelPredictor", "KernelSpec", "NTKRegressor", "eigendecompose", "gram",
           "make_rng", "ntk_eval", "__version__"]
