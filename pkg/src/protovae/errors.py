"""Exception hierarchy shared by every module of the package."""


class ProtoVAEError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ProtoVAEError, ValueError):
    """Operand shapes are incompatible.

    ``dim`` names the offending dimension when one can be singled out.
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class DomainError(ProtoVAEError, ValueError):
    """A value lies outside the domain of an operation (e.g. log of 0)."""


class FormatError(ProtoVAEError, ValueError):
    """A binary file does not follow its expected layout.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, path=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        full = f"{message} ({', '.join(where)})" if where else message
        super().__init__(full)
        self.path = path
        self.offset = offset


class NumericalError(ProtoVAEError, ArithmeticError):
    """Training or inference produced non-finite values."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
