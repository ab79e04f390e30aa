"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values showed up where finite ones are required."""


class GraphError(RuntimeError):
    """Autodiff misuse: non-scalar backward, stale or missing gradients."""


class ConfigError(ValueError):
    """Invalid or inconsistent model / run configuration."""


class FormatError(ValueError):
    """Malformed dataset or checkpoint byte stream."""


class MapUndefinedError(ConfigError):
    """Attention map requested from a head that does not define one."""
