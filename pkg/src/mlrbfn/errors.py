"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems -> 1, data/format
problems -> 2, numerical aborts -> 3.
"""


class MlrbfnError(Exception):
    """Base class for all package errors."""


class DimensionError(MlrbfnError):
    """Tensor or dataset shapes do not line up."""


class DomainError(MlrbfnError):
    """An argument is outside the mathematical domain of an operation."""


class UsageError(MlrbfnError):
    """An API or CLI contract was violated by the caller."""


class LabelError(MlrbfnError):
    """A class label is outside the valid range."""


class FormatError(MlrbfnError):
    """A binary file does not match its declared format."""


class InsufficientDataError(MlrbfnError):
    """Not enough rows to run a data-driven procedure."""


class NumericalAbort(MlrbfnError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, message, epoch=None, batch=None, layer_norms=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.layer_norms = layer_norms or {}
