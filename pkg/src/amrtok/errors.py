"""Exception hierarchy shared across the pipeline.

Everything raised on purpose derives from AmrtokError so the CLI can map
library failures to exit code 2 while genuine bugs still surface as
ordinary tracebacks.
"""


class AmrtokError(Exception):
    """Base class for all expected pipeline failures."""


class ConfigError(AmrtokError):
    """Invalid or inconsistent configuration values."""


class UnknownChannelError(AmrtokError):
    def __init__(self, channel, available):
        super().__init__(f"unknown channel {channel!r}; available: {list(available)}")
        self.channel = channel


class ShapeError(AmrtokError):
    """Array shape incompatible with the requested operation."""


class ContainerFormatError(AmrtokError):
    """Base for .nsgrid container parse failures."""


class BadMagicError(ContainerFormatError):
    pass


class VersionMismatchError(ContainerFormatError):
    pass


class TruncatedContainerError(ContainerFormatError):
    pass


class TokenFormatError(AmrtokError):
    """Malformed .amrtok token file."""


class PositivityError(AmrtokError):
    """Density or pressure lost positivity during a solver operation."""

    def __init__(self, quantity, row, col, value):
        super().__init__(
            f"positivity violated: {quantity}={value:.6e} at cell (row={row}, col={col})"
        )
        self.quantity = quantity
        self.row = row
        self.col = col


class CoverageError(AmrtokError):
    """Token set does not cover the full grid and no fill value was given."""

    def __init__(self, coverage):
        super().__init__(
            f"tokens cover only {coverage:.4f} of the grid; pass a fill value "
            "to reconstruct lossy token sets"
        )
        self.coverage = coverage
