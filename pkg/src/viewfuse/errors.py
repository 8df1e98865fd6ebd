"""Exception hierarchy shared by all modules."""


class ViewfuseError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ViewfuseError, ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class SizeError(ViewfuseError, ValueError):
    """An input has too few (or too many) elements for the operation."""


class ValidationError(ViewfuseError, ValueError):
    """Input values violate a documented precondition."""


class StateError(ViewfuseError, RuntimeError):
    """An object is not in the state required by the operation."""


class ConfigError(ViewfuseError, ValueError):
    """Experiment configuration failed schema validation."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DependencyError(ViewfuseError, RuntimeError):
    """A required upstream artifact (checkpoint, corpus) is missing."""


class NumericError(ViewfuseError, FloatingPointError):
    """A NaN or Inf appeared during a numeric run."""
