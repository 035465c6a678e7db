"""Exception hierarchy shared by all modules."""


class MolBuildError(Exception):
    """Base class for every error raised by this package."""


class ParseError(MolBuildError, ValueError):
    """Malformed formula, XYZ block or config file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ElementNotInBag(MolBuildError):
    pass


class InvalidFocal(MolBuildError, IndexError):
    pass


class DegenerateFrame(MolBuildError):
    """Reference atoms coincide, so the local frame is undefined."""


class ShapeMismatch(MolBuildError, ValueError):
    pass


class MissingPairParams(MolBuildError, KeyError):
    pass


class BackendError(MolBuildError):
    """Any failure of an energy backend."""


class BackendTimeout(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


class BackendFailure(BackendError):
    pass


class EpisodeFinished(MolBuildError):
    pass


class NoValidElement(MolBuildError):
    pass


class ArityMismatch(MolBuildError, ValueError):
    pass


class NotScalar(MolBuildError, ValueError):
    pass


class TapeExhausted(MolBuildError, RuntimeError):
    pass


class LengthMismatch(MolBuildError, ValueError):
    pass


class NonFiniteLoss(MolBuildError, FloatingPointError):
    def __init__(self, message: str, minibatch: int | None = None):
        self.minibatch = minibatch
        super().__init__(message)


class NoGradientBackend(MolBuildError, TypeError):
    pass


class LineSearchFailure(MolBuildError):
    def __init__(self, message: str, best=None):
        self.best = best
        super().__init__(message)


class ConfigError(MolBuildError, ValueError):
    pass


class WorkerFailure(MolBuildError, RuntimeError):
    """A rollout worker raised; ``worker`` is its index."""

    def __init__(self, message: str, worker: int):
        super().__init__(f"worker {worker}: {message}")
        self.worker = worker
