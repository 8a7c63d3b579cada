"""Exception hierarchy and process exit codes.

Commands map failures onto three exit-code families: configuration
problems (2), data and file problems (3), and runtime failures during
computation (4). Anything unexpected keeps the generic code 1.
"""

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


class ToolkitError(Exception):
    """Base class for every error raised by this package."""

    exit_code = EXIT_UNEXPECTED


class ConfigurationError(ToolkitError):
    """Invalid configuration: unknown key, bad section, or inconsistent settings."""

    exit_code = EXIT_CONFIG


class ParameterError(ConfigurationError):
    """An argument value violates a documented precondition."""


class ShapeError(ParameterError):
    """Array shape, channel count, or divisibility requirement violated."""


class DataError(ToolkitError):
    """Problem with dataset content: values, ranges, or availability."""

    exit_code = EXIT_DATA


class FormatError(DataError):
    """A stored file does not conform to its on-disk format."""


class CheckpointError(DataError):
    """A checkpoint cannot be restored (unknown version or corrupt content)."""


class TrainingError(ToolkitError):
    """Runtime failure during optimization, e.g. a non-finite loss."""

    exit_code = EXIT_RUNTIME
