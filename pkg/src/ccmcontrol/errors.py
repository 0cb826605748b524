"""Exception types shared across the package."""


class CCMControlError(Exception):
    """Base class for all errors raised by this package."""


class MetricError(CCMControlError):
    """Metric evaluation failed: non-finite, asymmetric, or not positive
    definite at the queried point."""


class OptimizerDiverged(CCMControlError):
    """Geodesic search produced a non-finite energy."""


class InfeasibleConstraint(CCMControlError):
    """The stabilizing half-space constraint cannot be met (zero input
    authority while decrease is still required)."""


class InvariantViolation(CCMControlError):
    """A runtime invariant was broken (e.g. a parameter estimate left its
    admissible box)."""


class ConfigError(CCMControlError):
    """Scenario configuration is missing, malformed, or inconsistent."""
