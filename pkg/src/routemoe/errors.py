"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """A differentiation-graph contract was violated."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class InfeasibleError(RuntimeError):
    """No feasible choice remains (fully masked distribution / dead-end state)."""


class ConfigError(ValueError):
    """Invalid configuration or parameters."""


class ParseError(ValueError):
    """Malformed benchmark file."""


class UnsupportedFormatError(ParseError):
    """Benchmark file uses a feature outside the supported subset."""


class InvalidTourError(ValueError):
    """A tour violates problem constraints."""


class SchedulerError(RuntimeError):
    """Training scheduler received unusable inputs."""
