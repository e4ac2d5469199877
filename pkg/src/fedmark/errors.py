"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (zero rows, constant samples, ...)."""


class ModalityError(ValueError):
    """A fusion recipe or model references a modality that is not present."""


class DataError(ValueError):
    """A data collection is empty or otherwise unusable."""


class CountError(ValueError):
    """A label belongs to a class with zero observed count."""


class MappingError(KeyError):
    """A coarse activity label has no entry in the weak-label map."""


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


class ConnectivityError(RuntimeError):
    """Effective bandwidth is zero; transmission cannot proceed."""


class ParameterError(ValueError):
    """A numeric kernel was called with invalid parameters."""


class FoldError(ValueError):
    """Cross-validation folds cannot be built from the given subjects."""


class UndefinedStatisticError(ValueError):
    """A test statistic is undefined for the given data (0/0 variance)."""
