"""Adaptive control of stabilizable nonlinear systems via control
contraction metrics.

The package computes minimizing geodesics under a (possibly parameter-
dependent) Riemannian metric by Chebyshev pseudospectral optimization, turns
their endpoint tangents into a pointwise min-norm stabilizing feedback with
matched / extended-matched adaptation laws (plus robust, deadzone, and
projection variants), certifies contraction conditions for a given metric on
a grid, and simulates the closed loop. The `ccmctl` CLI reproduces the
shipped benchmark scenarios.
"""

from .errors import (CCMControlError, ConfigError, InfeasibleConstraint,
                     InvariantViolation, MetricError, OptimizerDiverged)
from .geometry import (Geodesic, GeodesicSolver, MetricField, QuadratureRule,
                       chebyshev_lobatto, clenshaw_curtis, curve_energy,
                       curve_energy_gradient, curve_length,
                       first_variation_terms, interpolation_matrix,
                       solve_geodesic, speed_profile)
from .systems import (MatchingReport, Setpoint, SystemModel, check_matching,
                      controllability_matrix, dynamics, example_metric,
                      underactuated3, underactuated3_metric)
from .verify import (ContractionReport, MatchedInvarianceReport,
                     VerificationGrid, certify_rate, check_dual_ccm,
                     check_killing, check_matched_invariance,
                     check_parameter_coupling)
from .control import (ControlOutput, ControllerConfig, adapt_extended,
                      adapt_matched, apply_deadzone, apply_projection,
                      combined_step, extended_feedforward, min_norm_input,
                      robust_term)
from .sim import (AdaptiveState, EnergyRateProbe, TrajectoryLog,
                  energy_rate_probe, rk4_step, simulate)
from .config import ScenarioConfig

__version__ = "0.1.0"
