"""Exception types shared across the toolkit."""


class EmbedError(Exception):
    """Base class for all toolkit errors."""


class ParseError(EmbedError, ValueError):
    """Malformed input file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StructuralError(EmbedError, ValueError):
    """Shape, dimension or table mismatch between arguments."""


class NumericFault(EmbedError, ArithmeticError):
    """Non-finite value or singular normalization encountered."""


class DatasetError(EmbedError, ValueError):
    """The data cannot support the requested operation."""


class ProtocolError(EmbedError, ValueError):
    """An evaluation protocol precondition does not hold."""
