"""Exception hierarchy shared across the package."""


class DariError(Exception):
    """Base class for all package errors."""


class ShapeError(DariError, ValueError):
    pass


class ParameterError(DariError, ValueError):
    pass


class DegenerateInputError(DariError, ValueError):
    """Raised when an input has (near-)zero norm and cannot be normalized."""


class StateError(DariError, RuntimeError):
    pass


class DatasetError(DariError, ValueError):
    pass


class ProtocolError(DariError, ValueError):
    pass


class ManifestError(DatasetError):
    pass


class ImageIOError(DariError, OSError):
    pass


class CheckpointError(DariError, ValueError):
    pass


class DivergenceError(DariError, ArithmeticError):
    """Training produced a non-finite loss or gradient.

    ``history`` holds the per-iteration records collected before the failure
    and ``params`` the last parameters that were still finite.
    """

    def __init__(self, message, iteration=None, history=None, params=None):
        super().__init__(message)
        self.iteration = iteration
        self.history = history if history is not None else []
        self.params = params
