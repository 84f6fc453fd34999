"""Exception hierarchy shared by every stage of the pipeline."""


class GateError(Exception):
    """Base class for all package errors."""


# -- input / configuration -------------------------------------------------


class ConfigError(GateError):
    pass


class SchemaError(ConfigError):
    pass


class ParseError(GateError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SupportError(GateError):
    """A group required by the support assumption has no rows."""


# -- nuisance fitting ------------------------------------------------------


class DegenerateFitError(GateError):
    pass


class ConvergenceError(GateError):
    def __init__(self, message: str, grad_norm: float):
        self.grad_norm = grad_norm
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")


class DivergenceError(GateError):
    pass


class FoldDegeneracyError(GateError):
    pass


# -- estimation / testing / combination -------------------------------------


class EstimationError(GateError):
    pass


class TransportDegeneracyError(EstimationError):
    pass


class DegenerateVarianceError(GateError):
    pass


class MetaAnalysisError(GateError):
    pass


class OracleError(GateError):
    pass
