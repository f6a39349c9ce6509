"""Exception types shared across the package."""


class RawBrainError(Exception):
    """Base class for all package errors."""


class ShapeError(RawBrainError, ValueError):
    """An operand has the wrong shape.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class GradientError(RawBrainError, RuntimeError):
    pass


class NiftiError(RawBrainError, ValueError):
    """Malformed or unsupported NIfTI file. ``field`` names the header field at fault."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class BadMagicError(NiftiError):
    pass


class UnsupportedFormError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class PreprocessError(RawBrainError, ValueError):
    pass


class PhantomError(RawBrainError, ValueError):
    pass


class ContainerError(RawBrainError, ValueError):
    """Corrupt or incompatible container file."""


class SpecMismatchError(RawBrainError, ValueError):
    """A checkpoint or batch does not fit the model it is used with."""


class TrainingError(RawBrainError, RuntimeError):
    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids) if batch_ids is not None else []


class ConfigError(RawBrainError, ValueError):
    def __init__(self, message, token=None):
        super().__init__(message)
        self.token = token
