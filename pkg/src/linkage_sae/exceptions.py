"""Exception types raised by the estimators and the CLI."""


class LinkageSAEError(Exception):
    """Base class for package errors."""


class InputError(LinkageSAEError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class DegenerateCellError(InputError):
    """A cell with a single population unit has no alternative link."""


class ConvergenceError(LinkageSAEError, RuntimeError):
    """An iterative fit did not converge (CLI exit code 3).

    The last iterate and the final equation norms are attached so callers
    can inspect how far the solver got.
    """

    def __init__(self, message, last_iterate=None, norms=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.norms = norms


class NotFittedError(LinkageSAEError, AttributeError):
    """Estimator used before ``fit``."""
