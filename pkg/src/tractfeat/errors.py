"""Exception and warning types shared across the package."""


class FormatError(ValueError):
    """File contents do not match the expected binary format."""


class UnsupportedDataTypeError(FormatError):
    """File uses a datatype this package does not read."""


class ShapeError(ValueError):
    """Array or header dimensionality is wrong for the operation."""


class ValidationError(ValueError):
    """Input violates a documented invariant."""


class DegenerateInputError(ValueError):
    """Input is empty or constant where the operation needs signal."""


class DegenerateDataWarning(UserWarning):
    """Emitted when a degenerate input is mapped to a defined fallback."""
