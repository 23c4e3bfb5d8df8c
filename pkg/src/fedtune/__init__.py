"""Desk-scale federated adapter fine-tuning on a from-scratch micro language model."""

from fedtune.errors import (
    AnalysisError,
    ConfigError,
    DataError,
    DecodeError,
    FedTuneError,
    ProtocolError,
    TransportError,
    UsageError,
)
from fedtune.tree import ParamTree

__version__ = "0.1.0"

__all__ = [
    "AnalysisError",
    "ConfigError",
    "DataError",
    "DecodeError",
    "FedTuneError",
    "ParamTree",
    "ProtocolError",
    "TransportError",
    "UsageError",
]
