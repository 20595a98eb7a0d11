"""cubeflow: density estimation on the unit cube via ODE flow maps.

Densities are represented as pullbacks of a reference density under the
time-one map of an ODE flow. The package builds Knothe-Rosenblatt triangular
transports with their straight-line velocity fields, trains spline and
squared-ReLU network fields by maximum likelihood with exact discrete-adjoint
gradients, compiles spline quasi-interpolants into power-ReLU networks with
exact size accounting, and numerically audits the stability and
convergence-rate bounds the construction is supposed to satisfy.
"""

__version__ = "0.1.0"

from .core import (AnalyticDensity, QuadratureGrid, RngStream, integrate,
                   make_density, sample_uniform, validate_density)
from .fields import (CutoffField, NetworkSpec, SplineField, VelocityField,
                     apply_cutoff, eval_network, eval_network_jacobian,
                     init_network, measure_field_norms, project_norm_ball)
from .transport import (TriangularMap, boundary_vanishing_check, build_kr_map,
                        invert_straight_line, kr_pushforward_residual,
                        straight_line_field)
from .flow import (FlowConfig, FlowResult, TrajectoryEscaped,
                   flow_lipschitz_audit, integrate_flow, inverse_flow,
                   pullback_density, singular_value_audit)
from .mle import Dataset, TrainConfig, TrainTrace, fit, gradient, nn_scaling_plan
from .mle import objective as mle_objective
from .splinenn import (QuasiInterpolant, audit_against_bounds, build_extension,
                       compile_to_network, eval_bspline, quasi_interp_error,
                       quasi_interpolate)
from .analysis import (HellingerEstimate, RateExperiment, ck_rate_exponent,
                       hellinger, linf_density_gap, rate_experiment,
                       run_bound_suite)
