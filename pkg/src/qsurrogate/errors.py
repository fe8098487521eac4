"""Exception hierarchy shared by all modules."""


class QSurrogateError(Exception):
    """Base class for every error raised by this package."""


class BoundsError(QSurrogateError, ValueError):
    pass


class UnknownVariable(QSurrogateError, KeyError):
    pass


class BackendUnavailable(QSurrogateError, RuntimeError):
    pass


class SolverError(QSurrogateError, RuntimeError):
    pass


class SamplingExhausted(QSurrogateError, RuntimeError):
    pass


class InfeasibleSecondStage(QSurrogateError, RuntimeError):
    pass


class FormatError(QSurrogateError, ValueError):
    pass


class DimensionMismatch(QSurrogateError, ValueError):
    pass


class KindMismatch(QSurrogateError, ValueError):
    pass


class Diverged(QSurrogateError, FloatingPointError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class InvalidBounds(QSurrogateError, ValueError):
    pass


class UnboundedInput(QSurrogateError, ValueError):
    pass


class AllCandidatesFailed(QSurrogateError, RuntimeError):
    pass


class ConfigError(QSurrogateError, ValueError):
    pass
