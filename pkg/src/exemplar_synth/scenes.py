"""Synthetic multi-object scenes, crop/flip pair augmentation and dataset IO.

Geometry lives in unit canvas coordinates (``y`` and ``x`` in [0, 1]); a
pixel is sampled at its center. The same :func:`rasterize` routine renders
whole canvases and arbitrary point sets, so an augmented view can always be
re-rendered from its source coordinates.
"""

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Union

import numpy as np
from skimage import color, transform
from tqdm import tqdm

from .config import SceneConfig, worker_count
from .errors import ConfigError, IoError, ShapeError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SHAPES = ("rectangle", "disk", "triangle")
BASE_SATURATION = 0.75
BASE_VALUE = 0.8
MANIFEST_NAME = "manifest.tsv"


def class_hue(class_id: int, num_classes: int) -> float:
    """Canonical hue of a class, evenly spaced on the color wheel."""
    return class_id / num_classes


def palette(num_classes: int) -> np.ndarray:
    """Canonical RGB color per class, shape ``[num_classes, 3]``."""
    hsv = np.stack(
        [
            np.arange(num_classes) / num_classes,
            np.full(num_classes, BASE_SATURATION),
            np.full(num_classes, BASE_VALUE),
        ],
        axis=-1,
    )
    return np.asarray(color.hsv2rgb(hsv[None]))[0]


@dataclasses.dataclass(frozen=True, eq=False)
class SegMap:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def class_mask(self, class_id: int) -> np.ndarray:
        return self.labels == class_id

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_classes)

    def resized(self, height: int, width: int) -> "SegMap":
        """Nearest-neighbor resample by pixel-center index mapping."""
        return SegMap(resample_nearest(self.labels, height, width), self.num_classes)


@dataclasses.dataclass(frozen=True, eq=False)
class SceneImage:
    rgb: np.ndarray

    def __post_init__(self) -> None:
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ShapeError(f"image must be HxWx3, got {rgb.shape}")
        if rgb.size and (rgb.min() < 0.0 or rgb.max() > 1.0):
            raise ConfigError("image channels must lie in [0, 1]")
        object.__setattr__(self, "rgb", rgb)

    @property
    def height(self) -> int:
        return int(self.rgb.shape[0])

    @property
    def width(self) -> int:
        return int(self.rgb.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width


@dataclasses.dataclass(frozen=True)
class Appearance:
    """Per-instance deviation from the class palette color plus a texture."""

    hue_shift: float = 0.0
    sat_shift: float = 0.0
    val_shift: float = 0.0
    texture_amplitude: float = 0.0
    texture_freq: float = 1.0
    texture_phase: float = 0.0


@dataclasses.dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    shape: str
    center: tuple[float, float]
    scale: float
    aspect: float = 1.0
    appearance: Appearance = Appearance()

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.scale <= 0 or self.aspect <= 0:
            raise ConfigError("instance scale and aspect must be positive")

    def contains(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        dy = ys - self.center[0]
        dx = xs - self.center[1]
        half_h = self.scale
        half_w = self.scale * self.aspect
        if self.shape == "rectangle":
            return (np.abs(dy) <= half_h) & (np.abs(dx) <= half_w)
        if self.shape == "disk":
            return (dy / half_h) ** 2 + (dx / half_w) ** 2 <= 1.0
        # apex up, base down
        reach = half_w * (dy + half_h) / (2.0 * half_h)
        return (dy >= -half_h) & (dy <= half_h) & (np.abs(dx) <= reach)


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    num_classes: int
    instances: tuple[ObjectInstance, ...]
    background_class: int = 0
    background: Appearance = Appearance()

    def __post_init__(self) -> None:
        ids = [inst.class_id for inst in self.instances] + [self.background_class]
        if any(not 0 <= c < self.num_classes for c in ids):
            raise ConfigError(f"class ids must lie in [0, {self.num_classes})")


@dataclasses.dataclass(frozen=True)
class Augmentation:
    """One crop (in anchor pixels) followed by an optional horizontal flip."""

    top: int
    left: int
    height: int
    width: int
    flip: bool

    @classmethod
    def identity(cls, height: int, width: int) -> "Augmentation":
        return cls(0, 0, height, width, False)

    def index_maps(self, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
        """Anchor row/column sampled by each output pixel (nearest rule)."""
        rows = self.top + np.minimum(
            np.floor((np.arange(out_h) + 0.5) * self.height / out_h).astype(np.int64),
            self.height - 1,
        )
        cols = self.left + np.minimum(
            np.floor((np.arange(out_w) + 0.5) * self.width / out_w).astype(np.int64),
            self.width - 1,
        )
        if self.flip:
            cols = cols[::-1]
        return rows, cols

    def source_coords(
        self, out_h: int, out_w: int, anchor_h: int, anchor_w: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Unit anchor coordinates behind every output label."""
        rows, cols = self.index_maps(out_h, out_w)
        ys = (rows[:, None] + 0.5) / anchor_h
        xs = (cols[None, :] + 0.5) / anchor_w
        return np.broadcast_to(ys, (out_h, out_w)), np.broadcast_to(xs, (out_h, out_w))


@dataclasses.dataclass(frozen=True)
class Provenance:
    anchor_id: int
    seed: int
    exemplar_aug: Augmentation
    target_aug: Augmentation


@dataclasses.dataclass(frozen=True)
class PairSample:
    exemplar: tuple[SceneImage, SegMap]
    target: tuple[SceneImage, SegMap]
    provenance: Provenance


@dataclasses.dataclass(frozen=True)
class SceneSample:
    """One dataset entry: an anchor scene and the seed that produced it."""

    sample_id: int
    image: SceneImage
    seg: SegMap
    seed: int


def appearance_rgb(
    class_id: int,
    num_classes: int,
    appearance: Appearance,
    ys: np.ndarray,
    xs: np.ndarray,
) -> np.ndarray:
    """Colors of one instance at the given unit coordinates."""
    hue = (class_hue(class_id, num_classes) + appearance.hue_shift) % 1.0
    sat = np.clip(BASE_SATURATION + appearance.sat_shift, 0.0, 1.0)
    wave = np.sin(
        2.0 * np.pi * appearance.texture_freq * (ys + xs) + appearance.texture_phase
    )
    val = np.clip(BASE_VALUE + appearance.val_shift + appearance.texture_amplitude * wave, 0.0, 1.0)
    hsv = np.stack(np.broadcast_arrays(np.full_like(val, hue), np.full_like(val, sat), val), axis=-1)
    return np.clip(np.asarray(color.hsv2rgb(hsv.reshape(-1, 1, 3))).reshape(hsv.shape), 0.0, 1.0)


def rasterize(spec: SceneSpec, ys: np.ndarray, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels and colors at arbitrary unit coordinates; later instances win."""
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    labels = np.full(ys.shape, spec.background_class, dtype=np.int64)
    owner = np.full(ys.shape, -1, dtype=np.int64)
    for index, inst in enumerate(spec.instances):
        inside = inst.contains(ys, xs)
        labels[inside] = inst.class_id
        owner[inside] = index
    rgb = appearance_rgb(spec.background_class, spec.num_classes, spec.background, ys, xs)
    for index, inst in enumerate(spec.instances):
        mask = owner == index
        if mask.any():
            rgb[mask] = appearance_rgb(
                inst.class_id, spec.num_classes, inst.appearance, ys[mask], xs[mask]
            )
    return labels, rgb


def quantize(rgb: np.ndarray) -> np.ndarray:
    """Snap to 8-bit steps so PPM storage is lossless."""
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0


def render_scene(spec: SceneSpec) -> tuple[SceneImage, SegMap]:
    ys = (np.arange(spec.height)[:, None] + 0.5) / spec.height
    xs = (np.arange(spec.width)[None, :] + 0.5) / spec.width
    ys, xs = np.broadcast_arrays(ys, xs)
    labels, rgb = rasterize(spec, ys, xs)
    return SceneImage(quantize(rgb)), SegMap(labels, spec.num_classes)


def _random_appearance(rng: np.random.Generator, cfg: SceneConfig) -> Appearance:
    return Appearance(
        hue_shift=float(rng.uniform(-cfg.hue_jitter, cfg.hue_jitter)),
        sat_shift=float(rng.uniform(-cfg.sv_jitter, cfg.sv_jitter)),
        val_shift=float(rng.uniform(-cfg.sv_jitter, cfg.sv_jitter)),
        texture_amplitude=cfg.texture_amplitude,
        texture_freq=float(rng.uniform(1.0, 3.0)),
        texture_phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def random_scene_spec(rng: np.random.Generator, cfg: SceneConfig) -> SceneSpec:
    """Draw a scene; with ``duplicate_prob`` one object class appears twice."""
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    object_classes = np.arange(1, cfg.num_classes)
    classes = [int(c) for c in rng.choice(object_classes, size=count)]
    if rng.random() < cfg.duplicate_prob:
        classes[1] = classes[0]
    instances = []
    for class_id in classes:
        instances.append(
            ObjectInstance(
                class_id=class_id,
                shape=SHAPES[int(rng.integers(len(SHAPES)))],
                center=(float(rng.uniform(0.15, 0.85)), float(rng.uniform(0.15, 0.85))),
                scale=float(rng.uniform(0.1, 0.25)),
                aspect=float(rng.uniform(0.6, 1.6)),
                appearance=_random_appearance(rng, cfg),
            )
        )
    return SceneSpec(
        height=cfg.anchor_resolution,
        width=cfg.anchor_resolution,
        num_classes=cfg.num_classes,
        instances=tuple(instances),
        background=_random_appearance(rng, cfg),
    )


def resample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    return _apply_labels(Augmentation.identity(grid.shape[0], grid.shape[1]), grid, height, width)


def _apply_labels(aug: Augmentation, labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows, cols = aug.index_maps(out_h, out_w)
    return labels[np.ix_(rows, cols)]


def _apply_image(aug: Augmentation, rgb: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    crop = rgb[aug.top : aug.top + aug.height, aug.left : aug.left + aug.width]
    if crop.shape[:2] == (out_h, out_w):
        resized = crop.copy()
    else:
        resized = transform.resize(
            crop, (out_h, out_w, 3), order=1, mode="edge", anti_aliasing=False
        )
    if aug.flip:
        resized = resized[:, ::-1]
    return np.ascontiguousarray(np.clip(resized, 0.0, 1.0))


def apply_augmentation(
    image: SceneImage, seg: SegMap, aug: Augmentation, out_h: int, out_w: int
) -> tuple[SceneImage, SegMap]:
    """Crop, resize (bilinear image, nearest labels) and optionally flip."""
    if image.shape != seg.shape:
        raise ShapeError(f"image {image.shape} and label map {seg.shape} differ")
    rgb = _apply_image(aug, image.rgb, out_h, out_w)
    labels = _apply_labels(aug, seg.labels, out_h, out_w)
    return SceneImage(rgb), SegMap(labels, seg.num_classes)


def full_view(image: SceneImage, seg: SegMap, size: int) -> tuple[SceneImage, SegMap]:
    """The uncropped, unflipped anchor at ``size x size``."""
    return apply_augmentation(image, seg, Augmentation.identity(*seg.shape), size, size)


def random_augmentation(
    rng: np.random.Generator, height: int, width: int, cfg: SceneConfig
) -> Augmentation:
    min_h = math.ceil(cfg.crop_min * height)
    min_w = math.ceil(cfg.crop_min * width)
    if min(min_h, min_w) < cfg.min_crop_pixels:
        raise ConfigError(
            f"anchor {height}x{width} too small: minimum crop {min_h}x{min_w} "
            f"is below {cfg.min_crop_pixels} pixels"
        )
    crop_h = int(rng.integers(min_h, max(min_h, math.floor(cfg.crop_max * height)) + 1))
    crop_w = int(rng.integers(min_w, max(min_w, math.floor(cfg.crop_max * width)) + 1))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return Augmentation(top, left, crop_h, crop_w, flip)


def augment_pair(
    anchor_img: SceneImage,
    anchor_seg: SegMap,
    seed: int,
    cfg: Optional[SceneConfig] = None,
    anchor_id: int = 0,
) -> PairSample:
    """Two independent crop+flip views of one anchor, deterministic in (anchor_id, seed)."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng([anchor_id, seed])
    height, width = anchor_seg.shape
    exemplar_aug = random_augmentation(rng, height, width, cfg)
    target_aug = random_augmentation(rng, height, width, cfg)
    size = cfg.resolution
    return PairSample(
        exemplar=apply_augmentation(anchor_img, anchor_seg, exemplar_aug, size, size),
        target=apply_augmentation(anchor_img, anchor_seg, target_aug, size, size),
        provenance=Provenance(anchor_id, seed, exemplar_aug, target_aug),
    )


def _generate_one(index: int, cfg: SceneConfig) -> SceneSample:
    seed = cfg.seed * 1_000_003 + index
    spec = random_scene_spec(np.random.default_rng(seed), cfg)
    image, seg = render_scene(spec)
    return SceneSample(index, image, seg, seed)


def generate_dataset(cfg: SceneConfig, progress: bool = False) -> list[SceneSample]:
    """Render ``cfg.num_scenes`` anchors in parallel, ordered by id."""
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = pool.map(lambda i: _generate_one(i, cfg), range(cfg.num_scenes))
        samples = list(
            tqdm(results, total=cfg.num_scenes, desc="scenes", disable=not progress)
        )
    logger.info("Rendered %d scenes at %dx%d", len(samples), cfg.anchor_resolution, cfg.anchor_resolution)
    return samples


def sample_files(sample_id: int) -> tuple[str, str]:
    stem = f"scene_{sample_id:06d}"
    return f"{stem}.ppm", f"{stem}.pgm"


def write_dataset(directory: PathLike, samples: list[SceneSample]) -> Path:
    """Write images, label maps and the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids must be unique")
    lines = []
    for sample in sorted(samples, key=lambda s: s.sample_id):
        image_name, seg_name = sample_files(sample.sample_id)
        write_ppm(directory / image_name, sample.image.rgb)
        write_pgm(directory / seg_name, sample.seg.labels, max(1, sample.seg.num_classes - 1))
        lines.append(f"{sample.sample_id:06d}\t{image_name}\t{seg_name}\t{sample.seed}\n")
    manifest = directory / MANIFEST_NAME
    try:
        manifest.write_text("".join(lines), encoding="utf-8")
    except OSError as e:
        raise IoError(manifest, f"cannot write manifest: {e.strerror or e}") from e
    logger.info("Wrote %d samples to %s", len(samples), directory)
    return manifest


def read_manifest_entries(directory: PathLike) -> list[tuple[int, str, str, int]]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        return []
    entries = []
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(manifest, f"cannot read manifest: {e.strerror or e}") from e
    except UnicodeDecodeError as e:
        raise IoError(manifest, "manifest is not UTF-8 text") from e
    for number, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise IoError(manifest, f"line {number}: expected 4 tab-separated fields")
        try:
            entries.append((int(parts[0]), parts[1], parts[2], int(parts[3])))
        except ValueError as e:
            raise IoError(manifest, f"line {number}: malformed id or seed") from e
    return sorted(entries)


def read_dataset(directory: PathLike) -> list[SceneSample]:
    """Read every manifest entry; an absent manifest means an empty dataset."""
    directory = Path(directory)
    samples = []
    for sample_id, image_name, seg_name, seed in read_manifest_entries(directory):
        rgb = read_ppm(directory / image_name)
        labels, maxval = read_pgm(directory / seg_name)
        if rgb.shape[:2] != labels.shape:
            raise IoError(directory / seg_name, "label map does not match its image")
        samples.append(SceneSample(sample_id, SceneImage(rgb), SegMap(labels, maxval + 1), seed))
    return samples
