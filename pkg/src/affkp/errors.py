"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class AffkpError(Exception):
    exit_code = 5


class ConfigError(AffkpError, ValueError):
    exit_code = 2


class DataError(AffkpError, ValueError):
    exit_code = 3


class ModelError(AffkpError, ValueError):
    exit_code = 4


class EmptyCloudError(DataError):
    pass


class PlacementError(DataError):
    pass


class DegenerateQuadrupletError(AffkpError, ValueError):
    exit_code = 3


class DivergenceError(ModelError):
    """Training blew up; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []
