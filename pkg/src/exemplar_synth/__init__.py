"""Exemplar-synth: exemplar-based semantic image synthesis with a matching adapter."""

__version__ = "0.1.0"

from .errors import ConfigError, IoError, NumericError, ShapeError, StateError, SynthError

__all__ = [
    "ConfigError",
    "IoError",
    "NumericError",
    "ShapeError",
    "StateError",
    "SynthError",
]
