"""Typed configuration sections and the ``key=value`` config-file layer.

Values resolve in three layers: dataclass defaults, then a config file, then
command-line flags. A key sets the field of that name in every section that
has it, so ``seed=3`` seeds data generation, training and sampling alike.
"""

import dataclasses
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Optional, Union

from .errors import ConfigError, IoError

PathLike = Union[str, Path]

ATTENTION_SITES = 10
MODES = ("none", "baseline", "categorical", "adapter", "replace")
EXEMPLAR_SOURCES = ("paired", "random", "retrieved")
SIMILARITIES = ("ssim", "l2", "labels")
VARIANTS = ("adapter", "finetune-attention")


def parse_layer_set(text: str) -> tuple[int, ...]:
    """Parse ``"1-9"``, ``"0,2,4"`` or ``""`` into a sorted tuple of layer ids."""
    layers: set[int] = set()
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                layers.update(range(lo, hi + 1))
            else:
                layers.add(int(part))
        except ValueError as e:
            raise ConfigError(f"invalid layer set {text!r}") from e
    bad = [layer for layer in layers if not 0 <= layer < ATTENTION_SITES]
    if bad:
        raise ConfigError(f"layer ids must lie in [0, {ATTENTION_SITES - 1}], got {bad}")
    return tuple(sorted(layers))


@dataclasses.dataclass
class SceneConfig:
    """Synthetic scene generation and pair augmentation."""

    resolution: int = 32
    anchor_resolution: int = 40
    num_classes: int = 6
    min_instances: int = 2
    max_instances: int = 5
    hue_jitter: float = 0.03
    sv_jitter: float = 0.15
    texture_amplitude: float = 0.12
    duplicate_prob: float = 0.5
    crop_min: float = 0.75
    crop_max: float = 1.0
    flip_prob: float = 0.5
    min_crop_pixels: int = 16
    num_scenes: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.num_classes <= 255:
            raise ConfigError(f"num_classes must lie in [2, 255], got {self.num_classes}")
        if not 2 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 2 <= min_instances <= max_instances")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ConfigError("need 0 < crop_min <= crop_max <= 1")
        if not 0.0 <= self.flip_prob <= 1.0 or not 0.0 <= self.duplicate_prob <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.resolution < 4 or self.anchor_resolution < 4:
            raise ConfigError("resolutions must be at least 4 pixels")


@dataclasses.dataclass
class ModelConfig:
    """Denoiser shape and diffusion schedule."""

    image_size: int = 32
    channels: tuple[int, ...] = (16, 32)
    heads: int = 4
    time_dim: int = 32
    num_classes: int = 6
    t_train: int = 1000
    t_sample: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    augmented_layers: str = "0-9"
    adapted_layers: str = "1-9"

    def __post_init__(self) -> None:
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ConfigError(f"channels must be two positive widths, got {self.channels}")
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.channels[1] % self.heads:
            raise ConfigError(
                f"attention width {self.channels[1]} not divisible by {self.heads} heads"
            )
        if self.t_sample < 1 or self.t_train % self.t_sample:
            raise ConfigError("t_sample must divide t_train")
        augmented = set(self.augmented_set)
        adapted = set(self.adapted_set)
        if not adapted <= augmented:
            raise ConfigError("adapted layers must also be augmented")
        if 0 in adapted:
            raise ConfigError("layer 0 cannot carry an adapter")

    @property
    def augmented_set(self) -> tuple[int, ...]:
        return parse_layer_set(self.augmented_layers)

    @property
    def adapted_set(self) -> tuple[int, ...]:
        return parse_layer_set(self.adapted_layers)

    @property
    def attn_size(self) -> int:
        return self.image_size // 4


@dataclasses.dataclass
class AdapterConfig:
    c_mid: int = 8
    head_mixing: bool = True

    def __post_init__(self) -> None:
        if self.c_mid < 1:
            raise ConfigError(f"c_mid must be positive, got {self.c_mid}")


@dataclasses.dataclass
class TrainConfig:
    """One training stage. ``batch_size`` 0 picks the stage default."""

    stage: int = 1
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 0
    steps: int = 100
    seed: int = 0
    resolution: int = 32
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    stage1_checkpoint: Optional[str] = None
    eval_every: int = 50
    variant: str = "adapter"

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 0 or self.batch_size < 0 or self.eval_every < 1:
            raise ConfigError("steps and batch_size must be >= 0, eval_every >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stage == 2 and not self.stage1_checkpoint:
            raise ConfigError("stage 2 requires stage1_checkpoint")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size:
            return self.batch_size
        return 2 if self.stage == 1 else 1


@dataclasses.dataclass
class SampleConfig:
    """Sampling, evaluation and retrieval knobs."""

    scale: float = 7.5
    mode: str = "adapter"
    exemplar_latent: str = "invert"
    exemplar_source: str = "paired"
    similarity: str = "ssim"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.exemplar_latent not in ("invert", "noise"):
            raise ConfigError(f"exemplar_latent must be invert or noise, got {self.exemplar_latent!r}")
        if self.exemplar_source not in EXEMPLAR_SOURCES:
            raise ConfigError(f"exemplar_source must be one of {EXEMPLAR_SOURCES}")
        if self.similarity not in SIMILARITIES:
            raise ConfigError(f"similarity must be one of {SIMILARITIES}")


@dataclasses.dataclass
class RunConfig:
    progress: bool = True


SECTIONS: tuple[type, ...] = (
    SceneConfig,
    ModelConfig,
    AdapterConfig,
    TrainConfig,
    SampleConfig,
    RunConfig,
)


def known_keys() -> set[str]:
    return {f.name for section in SECTIONS for f in dataclasses.fields(section)}


def load_config_file(path: PathLike) -> dict[str, str]:
    """Read ``key=value`` lines; ``#`` starts a comment."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(path, f"cannot read config: {e.strerror or e}") from e
    keys = known_keys()
    values: dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(name: str, raw: Any, default: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from e
    return raw


def resolve(section: type, *layers: Mapping[str, Any]) -> Any:
    """Build ``section`` from defaults overlaid with ``layers`` in order.

    ``None`` values in a layer mean "not given" and are skipped.
    """
    kwargs: dict[str, Any] = {}
    for field in dataclasses.fields(section):
        if field.default is not dataclasses.MISSING:
            default = field.default
        else:
            default = None
        for layer in layers:
            if layer.get(field.name) is not None:
                kwargs[field.name] = _coerce(field.name, layer[field.name], default)
    return section(**kwargs)


def as_manifest(*configs: Any, extra: Optional[Mapping[str, Any]] = None) -> dict[str, str]:
    """Flatten config sections (and extra entries) into string pairs."""
    entries: dict[str, str] = {}
    for cfg in configs:
        for key, value in dataclasses.asdict(cfg).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            entries[key] = "" if value is None else str(value)
    for key, value in (extra or {}).items():
        entries[key] = "" if value is None else str(value)
    return entries


def write_manifest(path: PathLike, entries: Mapping[str, str]) -> Path:
    """Write sorted ``key=value`` lines."""
    path = Path(path)
    text = "".join(f"{key}={entries[key]}\n" for key in sorted(entries))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(path, f"cannot write manifest: {e.strerror or e}") from e
    return path


def read_manifest(path: PathLike) -> dict[str, str]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(path, f"cannot read manifest: {e.strerror or e}") from e
    return dict(line.split("=", 1) for line in lines if "=" in line)


def worker_count() -> int:
    """Thread-pool width, capped by ``AM_ADAPTER_THREADS``."""
    raw = os.environ.get("AM_ADAPTER_THREADS", "")
    try:
        limit = int(raw) if raw.strip() else (os.cpu_count() or 1)
    except ValueError as e:
        raise ConfigError(f"AM_ADAPTER_THREADS must be an integer, got {raw!r}") from e
    return max(1, limit)
