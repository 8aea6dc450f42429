"""Exception hierarchy.

Everything raised deliberately by the package derives from ``DeepFaultError``
so the CLI can map validation failures to exit code 1 in one place.
"""


class DeepFaultError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepFaultError, ValueError):
    """Array shapes do not chain (input width, weight shapes, vector lengths)."""


class AddressError(DeepFaultError, IndexError):
    """A NeuronId does not address a hidden neuron of the network."""


class ArgumentError(DeepFaultError, ValueError):
    """An argument violates its precondition (empty list, k out of range, ...)."""


class UsageError(DeepFaultError, TypeError):
    """An operation was called with an object it does not support."""


class AnalysisError(DeepFaultError):
    """Spectrum analysis could not run, e.g. no inputs left after class filtering."""


class PreconditionError(DeepFaultError):
    """Synthesis was asked to perturb an input the network misclassifies."""


class SynthesisError(DeepFaultError):
    """Batch synthesis found nothing to synthesize from."""


class LoadError(DeepFaultError):
    """A model file is malformed, inconsistent or of an unsupported version."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class ParseError(DeepFaultError):
    """An IDX file has a bad header or a payload of the wrong size."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
