"""REML variance estimation for mixed models with overlapping precision matrices.

The fitting algorithm separates the contribution of each precision atom to
the effective dimension of its random block and updates every variance
parameter as ``sigma2 = alpha' Lambda alpha / ED``.  Builders turn
adaptive P-splines and hierarchical curve models into this form.
"""

from .builders import (AdaptiveSpec, HierarchicalSpec, adaptive_pspline_spec,
                       factor_by_curve_spec, hierarchical_m0_spec, lambda_field, predict_curve)
from .core import (CoefficientEstimates, FitOptions, FitResult, compute_ed, fit, phi_harville,
                   phi_update, reml_deviance, solve_henderson, t_identity_check, update_variances)
from .errors import (DegenerateComponentError, DegenerateMeanError, InvalidArgumentError,
                     OutOfDomainError, OverparameterizedError, ParseError, SingularPrecisionError,
                     SingularSystemError, SOPError, UnbalancedPanelError)
from .model import (Family, MixedModelSpec, RandomBlock, VarianceState, check_rank_conditions,
                    ed_upper_bounds, make_family, working_response)
from .splines import diff_matrix, eval_basis, make_knots

__version__ = "0.1.0"
