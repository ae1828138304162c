"""Exception taxonomy shared across the package.

CLI exit codes: validation problems (shape/config/spec/capacity) map to 1,
numeric failures (NaN/Inf in data, gradients or losses) map to 2.
"""


class DimensionError(ValueError):
    """Operand shapes or extents violate an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract demands finite math."""


class SpecError(ValueError):
    """A configuration, phantom spec, or file failed validation."""


class CapacityError(SpecError):
    """More ground-truth segments than available queries."""
