"""Exception hierarchy shared across the package."""


class GRCError(Exception):
    """Base class for all package errors."""


class DimensionError(GRCError, ValueError):
    pass


class NumericDomainError(GRCError, ValueError):
    pass


class ConfigurationError(GRCError, ValueError):
    pass


class ParseError(GRCError, ValueError):
    pass


class TruncationError(ParseError):
    def __init__(self, offset, message=None):
        self.offset = offset
        super().__init__(message or f"truncated record at byte offset {offset}")


class EmptyInputError(GRCError, ValueError):
    pass


class MappingError(GRCError, KeyError):
    pass


class DegenerateAttentionError(GRCError, ValueError):
    pass


class DeterminismError(GRCError, RuntimeError):
    pass


class DivergenceError(GRCError, FloatingPointError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
