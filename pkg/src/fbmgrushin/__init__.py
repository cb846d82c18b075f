"""fbmgrushin: Grushin-type SDEs driven by fractional Brownian motion.

Simulation, explicit Bismut-type derivative weights, and Monte Carlo
verification of the derivative formulae and the gradient estimate.
"""

__version__ = "0.1.0"

from .grids import TimeGrid, SampledFn
from .fraccalc import (FracConstants, compute_constants, frac_integral,
                       frac_deriv, young_integral, zahle_integral)
from .fbm import (covariance, kernel_KH, sample_cholesky, sample_volterra,
                  draw_wiener_pair, apply_KHinv_antideriv, WienerPair, FbmPath)
from .models import (CoefficientFn, ModelSpec, SolutionPath, catalog_lookup,
                     solve, variational, observable, AssumptionError)
from .weights import (GramMatrix, WeightBreakdown, DirectionVector,
                      ito_integral_singular, gram_matrix, vartheta,
                      weight_M, weight_Mtilde, weight_N)
from .harness import (McEstimate, VerificationReport, BoundScanRow,
                      mc_estimate, verify_derivative, bound_scan)

__all__ = [
    "TimeGrid", "SampledFn",
    "FracConstants", "compute_constants", "frac_integral", "frac_deriv",
    "young_integral", "zahle_integral",
    "covariance", "kernel_KH", "sample_cholesky", "sample_volterra",
    "draw_wiener_pair", "apply_KHinv_antideriv", "WienerPair", "FbmPath",
    "CoefficientFn", "ModelSpec", "SolutionPath", "catalog_lookup", "solve",
    "variational", "observable", "AssumptionError",
    "GramMatrix", "WeightBreakdown", "DirectionVector",
    "ito_integral_singular", "gram_matrix", "vartheta",
    "weight_M", "weight_Mtilde", "weight_N",
    "McEstimate", "VerificationReport", "BoundScanRow",
    "mc_estimate", "verify_derivative", "bound_scan",
    "__version__",
]
