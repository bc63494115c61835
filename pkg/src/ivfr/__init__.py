"""IV Frechet regression for distribution-valued outcomes.

Estimates how group-level treatments shift whole outcome distributions, using
instruments for endogenous treatments and projecting fitted quantile curves
onto the monotone cone.
"""

__version__ = "0.1.0"

from .errors import IVFRError, NumericalError, ValidationError  # noqa: E402
from .estimator import (  # noqa: E402
    CoefficientCurves,
    GroupedDesign,
    IVFRFit,
    MomentSet,
    compute_moments,
    fitted_curve,
    fwl_decomposition,
    iv_weight,
    ivfr_fit,
    unconstrained_fit,
)
from .inference import (  # noqa: E402
    multiplier_bootstrap,
    pointwise_band,
    sandwich_variance,
    score_matrix,
)
from .isotonic import project_monotone, qp_oracle_project  # noqa: E402
from .quantile_core import (  # noqa: E402
    GroupSample,
    QuantileCurve,
    QuantileGrid,
    build_grid,
    empirical_quantile,
    w2_squared,
)

__all__ = [
    "CoefficientCurves", "GroupSample", "GroupedDesign", "IVFRError", "IVFRFit", "MomentSet",
    "NumericalError", "QuantileCurve", "QuantileGrid", "ValidationError", "build_grid",
    "compute_moments", "empirical_quantile", "fitted_curve", "fwl_decomposition", "iv_weight",
    "ivfr_fit", "multiplier_bootstrap", "pointwise_band", "project_monotone", "qp_oracle_project",
    "sandwich_variance", "score_matrix", "unconstrained_fit", "w2_squared",
]
