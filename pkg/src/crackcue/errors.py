"""Exception types shared across the package."""


class CrackCueError(Exception):
    pass


class ShapeError(CrackCueError, ValueError):
    pass


class ParameterError(CrackCueError, ValueError):
    pass


class FormatError(CrackCueError, ValueError):
    """Raster or checkpoint content that cannot be decoded."""


class RangeError(CrackCueError, ValueError):
    pass


class ConfigError(CrackCueError, ValueError):
    pass


class TrainingDiverged(CrackCueError, FloatingPointError):
    """A non-finite loss, gradient or parameter appeared during training.

    ``norms`` maps parameter names to their L2 norms at the time of failure.
    """

    def __init__(self, message, norms=None):
        super().__init__(message)
        self.norms = dict(norms or {})
