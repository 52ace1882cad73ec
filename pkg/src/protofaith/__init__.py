"""Faithfulness and relevance evaluation for prototype part visualisations."""
from protofaith.errors import (
    ArgumentError,
    ConfigurationError,
    DegenerateTargetError,
    FormatError,
    InvariantError,
    ProtofaithError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ConfigurationError",
    "DegenerateTargetError",
    "FormatError",
    "InvariantError",
    "ProtofaithError",
    "__version__",
]
