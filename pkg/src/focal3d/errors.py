"""Exception hierarchy shared by every module of the toolkit."""


class Focal3DError(Exception):
    """Base class for all toolkit errors."""


class DomainError(Focal3DError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class StructuralError(Focal3DError, ValueError):
    """Shapes, lengths or indices that do not fit together."""


class StateError(Focal3DError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class ParseError(Focal3DError, ValueError):
    """Malformed input file."""

    def __init__(self, message, *, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)
        self.path = path
        self.line = line
        self.offset = offset


class GenerationError(Focal3DError, RuntimeError):
    """Synthetic scene generation could not satisfy its recipe."""


class NumericError(Focal3DError, ArithmeticError):
    """Non-finite values appeared during optimization."""

    def __init__(self, message, *, batch_id=None):
        super().__init__(message if batch_id is None else f"{message} (batch {batch_id})")
        self.batch_id = batch_id


class ConfigError(Focal3DError, ValueError):
    """Invalid run configuration; ``keys`` lists the offending dotted paths."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)


class VersionMismatchError(Focal3DError, RuntimeError):
    """A checkpoint or manifest was written by an incompatible toolkit version."""
