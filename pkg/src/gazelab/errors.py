"""Exception types shared across the package."""


class GazeLabError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(GazeLabError):
    """Invalid configuration value or malformed config file."""


class DataError(GazeLabError):
    """Dataset loading, parsing, or export failure."""


class SplitError(GazeLabError):
    """Dataset split cannot be formed as requested."""


class TrainingError(GazeLabError):
    """Optimization diverged or could not proceed."""


class NumericalGuardError(GazeLabError):
    """A quantity required to be nonzero (e.g. a variance denominator) vanished."""


class InputError(GazeLabError):
    """Shape or value mismatch between operands."""


class DependencyError(GazeLabError):
    """A pipeline stage ran before the artifacts it depends on exist."""
