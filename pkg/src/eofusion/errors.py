"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4. Plain argument misuse raises ValueError.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data violates a documented contract."""


class FormatError(DataError):
    """On-disk artifact is missing pieces or cannot be parsed."""


class IntegrityError(DataError):
    """On-disk artifact is internally inconsistent (shapes, hashes)."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (zero vectors, empty masks, zero range)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
