"""Exception hierarchy shared by every exemplar-synth module."""

from pathlib import Path
from typing import Union


class SynthError(Exception):
    """Base exception for exemplar-synth errors."""

    pass


class ShapeError(SynthError):
    """Tensor or grid extents do not fit the operation."""

    pass


class ConfigError(SynthError):
    """Invalid configuration value or inconsistent inputs."""

    pass


class StateError(SynthError):
    """Operation called in a state that does not allow it."""

    pass


class NumericError(SynthError):
    """A non-finite value was produced while debug checks were enabled."""

    pass


class IoError(SynthError):
    """Reading or writing an artifact failed; always names the file."""

    def __init__(self, path: Union[str, Path], reason: str) -> None:
        self.path = Path(path)
        super().__init__(f"{path}: {reason}")
