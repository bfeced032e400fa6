"""Automatic exemplar retrieval.

A query image is sampled from the target label map with the structure path
alone, converted to grayscale and compared against a pool of exemplars.
The pool is a scene-data directory plus one 16-bit grayscale cache file per
entry, so a query costs one structure-only sample and one comparison per entry.
"""

import dataclasses
import logging
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
from skimage import metrics

from .config import SIMILARITIES, worker_count
from .errors import ConfigError, ShapeError
from .netpbm import read_gray, write_gray
from .scenes import SceneImage, SceneSample, SegMap, full_view, quantize, read_dataset, write_dataset

if TYPE_CHECKING:
    from .diffusion import ExemplarPipeline

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# ITU-R BT.601 luma weights
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 7
GRAY_LEVELS = 65535


def to_grayscale(image: Union[SceneImage, np.ndarray]) -> np.ndarray:
    rgb = image.rgb if isinstance(image, SceneImage) else np.asarray(image, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ShapeError(f"expected an [h, w, 3] image, got {rgb.shape}")
    return rgb @ LUMA


def quantize_gray(gray: np.ndarray) -> np.ndarray:
    """Snap to the 16-bit grid used by the pool cache."""
    return np.rint(np.clip(gray, 0.0, 1.0) * GRAY_LEVELS) / GRAY_LEVELS


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare grids of shape {a.shape} and {b.shape}")


def structural_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over 7x7 uniform windows (K1=0.01, K2=0.03, data range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs grids of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    return float(metrics.structural_similarity(a, b, win_size=SSIM_WINDOW, data_range=1.0))


def l2_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Negated mean squared difference, so larger is more similar."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    return -float(np.mean((a - b) ** 2))


def label_similarity(seg_a: SegMap, seg_b: SegMap) -> float:
    """Fraction of pixels with equal labels, after a nearest resize of ``seg_b``."""
    if seg_b.shape != seg_a.shape:
        seg_b = seg_b.resized(*seg_a.shape)
    return float(np.mean(seg_a.labels == seg_b.labels))


@dataclasses.dataclass(frozen=True, eq=False)
class PoolEntry:
    entry_id: int
    image: SceneImage
    seg: SegMap
    gray: np.ndarray


@dataclasses.dataclass(frozen=True)
class RetrievalHit:
    entry: PoolEntry
    score: float

    @property
    def entry_id(self) -> int:
        return self.entry.entry_id


def gray_file(entry_id: int) -> str:
    return f"scene_{entry_id:06d}.gray.pgm"


class ExemplarPool:
    """Read-only exemplar pool backed by a directory."""

    def __init__(self, entries: list[PoolEntry], directory: Optional[Path] = None) -> None:
        ids = [e.entry_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("pool entry ids must be unique")
        self.entries = sorted(entries, key=lambda e: e.entry_id)
        self.directory = directory

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[PoolEntry]:
        return iter(self.entries)

    def get(self, entry_id: int) -> PoolEntry:
        for entry in self.entries:
            if entry.entry_id == entry_id:
                return entry
        raise ConfigError(f"no pool entry with id {entry_id}")

    @classmethod
    def from_samples(cls, samples: list[SceneSample], size: Optional[int] = None) -> "ExemplarPool":
        """In-memory pool; anchors are resized to ``size`` when given.

        Images are snapped to the 8-bit grid first, so each gray cache matches
        the image as stored on disk.
        """
        entries = []
        for sample in samples:
            image, seg = (sample.image, sample.seg) if size is None else full_view(sample.image, sample.seg, size)
            image = SceneImage(quantize(image.rgb))
            entries.append(PoolEntry(sample.sample_id, image, seg, quantize_gray(to_grayscale(image))))
        return cls(entries)

    def samples(self) -> list[SceneSample]:
        return [SceneSample(e.entry_id, e.image, e.seg, 0) for e in self.entries]


def build_pool(directory: PathLike, samples: list[SceneSample], size: Optional[int] = None) -> ExemplarPool:
    """Write a pool directory: scene-data manifest, images, label maps and gray caches."""
    directory = Path(directory)
    pool = ExemplarPool.from_samples(samples, size)
    seeds = {s.sample_id: s.seed for s in samples}
    write_dataset(
        directory,
        [SceneSample(e.entry_id, e.image, e.seg, seeds[e.entry_id]) for e in pool.entries],
    )
    for entry in pool.entries:
        write_gray(directory / gray_file(entry.entry_id), entry.gray)
    pool.directory = directory
    logger.info("Built pool of %d exemplars in %s", len(pool), directory)
    return pool


def load_pool(directory: PathLike) -> ExemplarPool:
    """Load a pool; a missing or stale gray cache is recomputed and written back."""
    directory = Path(directory)
    entries = []
    for sample in read_dataset(directory):
        cache = directory / gray_file(sample.sample_id)
        gray = quantize_gray(to_grayscale(sample.image))
        if not cache.exists():
            logger.debug("Recomputing gray cache %s", cache)
            write_gray(cache, gray)
        elif not np.array_equal(read_gray(cache), gray):
            logger.warning("Gray cache %s does not match its image; rewriting it", cache)
            write_gray(cache, gray)
        entries.append(PoolEntry(sample.sample_id, sample.image, sample.seg, gray))
    return ExemplarPool(entries, directory)


def rank_pool(
    pool: ExemplarPool,
    query_gray: Optional[np.ndarray] = None,
    seg_y: Optional[SegMap] = None,
    similarity: str = "ssim",
) -> list[RetrievalHit]:
    """Score every entry and order by descending score, then ascending id."""
    if similarity not in SIMILARITIES:
        raise ConfigError(f"similarity must be one of {SIMILARITIES}, got {similarity!r}")
    if similarity == "labels":
        if seg_y is None:
            raise ConfigError("label similarity needs the target label map")

        def score(entry: PoolEntry) -> float:
            return label_similarity(seg_y, entry.seg)

    else:
        if query_gray is None:
            raise ConfigError(f"{similarity} similarity needs a query image")
        measure = structural_similarity if similarity == "ssim" else l2_similarity

        def score(entry: PoolEntry) -> float:
            return measure(query_gray, entry.gray)

    with ThreadPoolExecutor(max_workers=worker_count()) as workers:
        scores = list(workers.map(score, pool.entries))
    hits = [RetrievalHit(entry, s) for entry, s in zip(pool.entries, scores)]
    return sorted(hits, key=lambda hit: (-hit.score, hit.entry_id))


def retrieve(
    seg_y: SegMap,
    pool: ExemplarPool,
    pipeline: "ExemplarPipeline",
    seed: int = 0,
    k: int = 1,
    similarity: str = "ssim",
) -> list[RetrievalHit]:
    """Top-``k`` exemplars for ``seg_y``; the query image never uses an exemplar or adapter."""
    if not len(pool):
        raise ConfigError("exemplar pool is empty")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    query_gray = None
    if similarity != "labels":
        query_gray = quantize_gray(to_grayscale(pipeline.query_image(seg_y, seed)))
        size = pipeline.net.cfg.image_size
        if pool.entries[0].gray.shape != (size, size):
            raise ShapeError(
                f"pool images are {pool.entries[0].gray.shape}, the model generates {size}x{size}"
            )
    hits = rank_pool(pool, query_gray, seg_y, similarity)[:k]
    logger.info("Retrieved %s (score %.4f)", hits[0].entry_id, hits[0].score)
    return hits
