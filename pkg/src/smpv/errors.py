"""Exception hierarchy. Each class carries a stable machine-readable ``code``."""


class SmpvError(Exception):
    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details


class DimensionMismatch(SmpvError, ValueError):
    code = "dimension_mismatch"


class DerivativeInconsistency(SmpvError, ValueError):
    code = "derivative_inconsistency"


class EmptyControlRegion(SmpvError, ValueError):
    code = "empty_control_region"


class OrderTooHigh(SmpvError, ValueError):
    code = "order_too_high"


class InadmissibleControl(SmpvError, ValueError):
    code = "inadmissible_control"


class NonFinite(SmpvError, ArithmeticError):
    code = "non_finite"


class SingularTransition(SmpvError, ArithmeticError):
    code = "singular_transition"


class BackendUnsupported(SmpvError, ValueError):
    code = "backend_unsupported"


class IllConditionedRegression(SmpvError, ArithmeticError):
    code = "ill_conditioned_regression"


class InsufficientPaths(SmpvError, ValueError):
    code = "insufficient_paths"


class InsufficientGridResolution(SmpvError, ValueError):
    code = "insufficient_grid_resolution"


class Unavailable(SmpvError, LookupError):
    code = "unavailable"


class DegenerateProbe(SmpvError, ValueError):
    code = "degenerate_probe"


class InsufficientPoints(SmpvError, ValueError):
    code = "insufficient_points"


class SchemaMismatch(SmpvError, ValueError):
    code = "schema_mismatch"


class ConfigError(SmpvError, ValueError):
    code = "config_error"
