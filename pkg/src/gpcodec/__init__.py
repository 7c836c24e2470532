"""Lossless point-cloud geometry coding with a staged occupancy predictor."""

from .codec import EncodeReport, StreamHeader, decode, encode
from .errors import DataError, GpcError, ValidationError
from .geometry import Hierarchy, QuantizedCloud, build_hierarchy, dequantize, quantize
from .model import FopModel, Grouping, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "EncodeReport",
    "StreamHeader",
    "decode",
    "encode",
    "DataError",
    "GpcError",
    "ValidationError",
    "Hierarchy",
    "QuantizedCloud",
    "build_hierarchy",
    "dequantize",
    "quantize",
    "FopModel",
    "Grouping",
    "ModelConfig",
]
