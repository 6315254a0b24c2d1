"""Embedding grayscale images on the unit hypersphere with a triplet loss."""

from .errors import DatasetError, EmbedError, NumericFault, ParseError, ProtocolError, StructuralError

__version__ = "0.1.0"

__all__ = ["DatasetError", "EmbedError", "NumericFault", "ParseError", "ProtocolError",
           "StructuralError"]
