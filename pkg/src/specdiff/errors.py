class ConfigError(ValueError):
    """Invalid configuration or mismatched parameters (CLI exit code 2)."""


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """Non-finite values or a numerical floor violation (CLI exit code 3)."""
