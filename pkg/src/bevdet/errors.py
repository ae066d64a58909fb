"""Exception types shared across the pipeline."""


class BevDetError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ContractError(BevDetError, ValueError):
    """A caller violated an operation's precondition (shapes, ranges)."""

    exit_code = 5


class MalformedFileError(BevDetError, ValueError):
    """A file on disk does not follow its declared format."""

    exit_code = 4


class ConfigError(BevDetError, ValueError):
    exit_code = 4


class PlacementError(BevDetError, RuntimeError):
    """Synthetic scene generation could not place the requested objects."""

    exit_code = 6


class TrainingDiverged(BevDetError, RuntimeError):
    exit_code = 7


class UsageError(BevDetError):
    """Command-line arguments that argparse alone cannot validate."""

    exit_code = 2
