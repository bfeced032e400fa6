"""Proxy metrics and attention/cost visualisations.

Structure consistency is measured by recovering a class map from the
generated image (nearest canonical hue) and comparing it with the target
label map. Appearance preservation compares per-class color histograms of
the generated image and the exemplar.
"""

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Union

import numpy as np
from skimage import color
from tqdm import tqdm

from .attention import AttnState
from .config import SampleConfig, SceneConfig, worker_count
from .errors import ConfigError, IoError, ShapeError
from .netpbm import write_ppm
from .numeric import Tensor
from .scenes import SceneImage, SceneSample, SegMap, augment_pair, full_view, palette, resample_nearest
from .segcost import CatCost, GuidanceSpec

if TYPE_CHECKING:
    from .diffusion import ExemplarPipeline
    from .retrieval import ExemplarPool

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HIST_BINS = 16


@dataclasses.dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    iou: Optional[float]
    appearance_dist: Optional[float]
    target_pixels: int


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """``appearance_dist`` is None when target and exemplar share no class."""

    structure_iou: float
    appearance_dist: Optional[float]
    shared_classes: tuple[int, ...]
    per_class: tuple[ClassMetrics, ...] = ()


def _hue_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.abs(a - b) % 1.0
    return np.minimum(d, 1.0 - d)


def recover_classmap(image: SceneImage, colors: np.ndarray) -> SegMap:
    """Assign each pixel the palette class of nearest hue; ties go to the lower id."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.ndim != 2 or colors.shape[1] != 3:
        raise ShapeError(f"palette must be [K, 3], got {colors.shape}")
    pixel_hue = np.asarray(color.rgb2hsv(image.rgb))[..., 0]
    class_hues = np.asarray(color.rgb2hsv(colors[None]))[0, :, 0]
    distances = _hue_distance(pixel_hue[..., None], class_hues)
    return SegMap(np.argmin(distances, axis=-1).astype(np.int64), len(colors))


def class_iou(seg_a: SegMap, seg_b: SegMap, class_id: int) -> Optional[float]:
    a = seg_a.class_mask(class_id)
    b = seg_b.class_mask(class_id)
    union = np.logical_or(a, b).sum()
    if not union:
        return None
    return float(np.logical_and(a, b).sum() / union)


def color_histogram(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Normalised ``[3, HIST_BINS]`` histogram of the masked pixels."""
    pixels = rgb[mask]
    hist = np.stack(
        [np.histogram(pixels[:, ch], bins=HIST_BINS, range=(0.0, 1.0))[0] for ch in range(3)]
    ).astype(np.float64)
    return hist / max(len(pixels), 1)


def histogram_distance(rgb_a: np.ndarray, mask_a: np.ndarray, rgb_b: np.ndarray, mask_b: np.ndarray) -> float:
    """Channel-averaged L1 distance of masked color histograms, in [0, 2]."""
    ha = color_histogram(rgb_a, mask_a)
    hb = color_histogram(rgb_b, mask_b)
    return float(np.abs(ha - hb).sum(axis=1).mean())


def score(
    generated: SceneImage,
    seg_y: SegMap,
    exemplar: SceneImage,
    seg_x: SegMap,
    colors: Optional[np.ndarray] = None,
) -> MetricReport:
    if generated.shape != seg_y.shape or exemplar.shape != seg_x.shape:
        raise ShapeError("images must align with their label maps")
    if seg_y.num_classes != seg_x.num_classes:
        raise ConfigError("target and exemplar label maps disagree on the class count")
    num_classes = seg_y.num_classes
    recovered = recover_classmap(generated, palette(num_classes) if colors is None else colors)
    present_y = set(np.unique(seg_y.labels).tolist())
    present_x = set(np.unique(seg_x.labels).tolist())
    shared = tuple(sorted(present_y & present_x))

    rows = []
    ious = []
    dists = []
    for class_id in range(num_classes):
        iou = class_iou(seg_y, recovered, class_id)
        dist = None
        if class_id in shared:
            dist = histogram_distance(
                generated.rgb, seg_y.class_mask(class_id), exemplar.rgb, seg_x.class_mask(class_id)
            )
            dists.append(dist)
        if iou is not None:
            ious.append(iou)
        rows.append(ClassMetrics(class_id, iou, dist, int(seg_y.class_mask(class_id).sum())))
    return MetricReport(
        structure_iou=float(np.mean(ious)) if ious else 0.0,
        appearance_dist=float(np.mean(dists)) if dists else None,
        shared_classes=shared,
        per_class=tuple(rows),
    )


def hot_ramp(values: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp for values in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    return np.clip(3.0 * v - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)


def _check_query(query: tuple[int, int], hw: tuple[int, int]) -> int:
    i, j = query
    h, w = hw
    if not (0 <= i < h and 0 <= j < w):
        raise ConfigError(f"query point {query} outside the {h}x{w} attention grid")
    return i * w + j


def _logits_of(source: Union[AttnState, Tensor, np.ndarray], refined: Optional[Tensor]) -> np.ndarray:
    if refined is not None:
        return refined.data
    if isinstance(source, AttnState):
        return source.a_yx.data
    return source.data if isinstance(source, Tensor) else np.asarray(source, dtype=np.float64)


def attention_heat(
    source: Union[AttnState, Tensor, np.ndarray],
    query: tuple[int, int],
    hw: tuple[int, int],
    refined: Optional[Tensor] = None,
) -> np.ndarray:
    """Head-averaged softmax of one target row over the exemplar grid; sums to 1."""
    logits = _logits_of(source, refined)
    if logits.ndim == 2:
        logits = logits[None]
    h, w = hw
    if logits.shape[1:] != (h * w, h * w):
        raise ShapeError(f"logits {logits.shape} do not match a {h}x{w} grid")
    row = logits[:, _check_query(query, hw)]
    row = np.exp(row - row.max(axis=-1, keepdims=True))
    row = row / row.sum(axis=-1, keepdims=True)
    return row.mean(axis=0).reshape(h, w)


def _upsample(grid: np.ndarray, size: Optional[int]) -> np.ndarray:
    if size is None or grid.shape == (size, size):
        return grid
    return resample_nearest(grid, size, size)


def render_heat(heat: np.ndarray, out_path: PathLike, size: Optional[int] = None) -> Path:
    """Write a heat grid normalised by its maximum through :func:`hot_ramp`."""
    peak = float(heat.max())
    scaled = heat / peak if peak > 0 else np.zeros_like(heat)
    out_path = Path(out_path)
    write_ppm(out_path, hot_ramp(_upsample(scaled, size)))
    return out_path


def render_attention(
    source: Union[AttnState, Tensor, np.ndarray],
    query: tuple[int, int],
    out_path: PathLike,
    hw: Optional[tuple[int, int]] = None,
    size: Optional[int] = None,
    refined: Optional[Tensor] = None,
) -> Path:
    if hw is None:
        if not isinstance(source, AttnState):
            raise ConfigError("grid size is required for raw logits")
        hw = (source.cfg.h, source.cfg.w)
    return render_heat(attention_heat(source, query, hw, refined), out_path, size)


def render_attention_pair(
    state: AttnState,
    refined: Optional[Tensor],
    query: tuple[int, int],
    out_dir: PathLike,
    size: Optional[int] = None,
) -> list[Path]:
    """``before`` from the implicit logits, ``after`` from the refined ones when present."""
    out_dir = Path(out_dir)
    layer = state.cfg.layer
    paths = [render_attention(state, query, out_dir / f"attn_L{layer}_before.ppm", size=size)]
    if refined is not None:
        paths.append(render_attention(state, query, out_dir / f"attn_L{layer}_after.ppm", size=size, refined=refined))
    return paths


def render_cat_cost(cost: CatCost, query: tuple[int, int], out_path: PathLike, size: Optional[int] = None) -> Path:
    """Binary heat of one cost row: white where the classes agree."""
    i, j = query
    _check_query(query, cost.target_hw)
    row = cost.row(i, j).astype(np.float64)
    out_path = Path(out_path)
    write_ppm(out_path, np.repeat(_upsample(row, size)[..., None], 3, axis=-1))
    return out_path


@dataclasses.dataclass(frozen=True)
class EvalRecord:
    sample_id: int
    exemplar_id: int
    report: MetricReport


def _exemplar_for(
    index: int,
    sample: SceneSample,
    samples: list[SceneSample],
    cfg: SampleConfig,
    scene_cfg: SceneConfig,
    pipeline: "ExemplarPipeline",
    pool: Optional["ExemplarPool"],
) -> tuple[tuple[SceneImage, SegMap], tuple[SceneImage, SegMap], int]:
    size = pipeline.net.cfg.image_size
    if cfg.exemplar_source == "paired":
        pair = augment_pair(sample.image, sample.seg, cfg.seed, scene_cfg, sample.sample_id)
        return pair.target, pair.exemplar, sample.sample_id
    target = full_view(sample.image, sample.seg, size)
    if cfg.exemplar_source == "random":
        if len(samples) < 2:
            raise ConfigError("random exemplars need at least two samples")
        rng = np.random.default_rng([cfg.seed, sample.sample_id])
        other = int(rng.integers(len(samples) - 1))
        other += other >= index
        chosen = samples[other]
        return target, full_view(chosen.image, chosen.seg, size), chosen.sample_id
    from .retrieval import ExemplarPool, retrieve

    candidates = pool if pool is not None else ExemplarPool.from_samples(samples, size)
    hits = retrieve(target[1], candidates, pipeline, cfg.seed, k=2, similarity=cfg.similarity)
    hit = next((h for h in hits if h.entry_id != sample.sample_id), hits[0])
    return target, (hit.entry.image, hit.entry.seg), hit.entry_id


def evaluate(
    pipeline: "ExemplarPipeline",
    samples: list[SceneSample],
    cfg: Optional[SampleConfig] = None,
    scene_cfg: Optional[SceneConfig] = None,
    pool: Optional["ExemplarPool"] = None,
    guidance: Optional[GuidanceSpec] = None,
    progress: bool = False,
) -> list[EvalRecord]:
    """Generate one image per sample and score it against its exemplar."""
    cfg = cfg or SampleConfig()
    scene_cfg = dataclasses.replace(scene_cfg or SceneConfig(), resolution=pipeline.net.cfg.image_size)
    if not samples:
        raise ConfigError("nothing to evaluate")

    def run(index: int) -> EvalRecord:
        sample = samples[index]
        (image_y, seg_y), exemplar, exemplar_id = _exemplar_for(
            index, sample, samples, cfg, scene_cfg, pipeline, pool
        )
        generated = pipeline.generate(
            seg_y,
            exemplar,
            mode=cfg.mode,
            guidance=guidance,
            scale=cfg.scale,
            seed=cfg.seed,
            exemplar_latent=cfg.exemplar_latent,
        )
        return EvalRecord(sample.sample_id, exemplar_id, score(generated, seg_y, *exemplar))

    with ThreadPoolExecutor(max_workers=worker_count()) as workers:
        records = list(
            tqdm(workers.map(run, range(len(samples))), total=len(samples), desc="evaluate", disable=not progress)
        )
    summary = summarize(records)
    logger.info(
        "Evaluated %d samples: structure_iou %.4f appearance_dist %s",
        len(records),
        summary.structure_iou,
        "n/a" if summary.appearance_dist is None else f"{summary.appearance_dist:.4f}",
    )
    return records


def summarize(records: list[EvalRecord]) -> MetricReport:
    """Aggregate row: means over samples (appearance over samples that have one)."""
    ious = [r.report.structure_iou for r in records]
    dists = [r.report.appearance_dist for r in records if r.report.appearance_dist is not None]
    shared = sorted({c for r in records for c in r.report.shared_classes})
    return MetricReport(
        structure_iou=float(np.mean(ious)) if ious else 0.0,
        appearance_dist=float(np.mean(dists)) if dists else None,
        shared_classes=tuple(shared),
    )


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_report_csv(path: PathLike, records: list[EvalRecord]) -> tuple[Path, Path]:
    """Per-sample rows plus a ``mean`` row, and a per-class companion file."""
    path = Path(path)
    classes_path = path.with_name(path.stem + "_classes.csv")
    summary = summarize(records)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "exemplar_id", "structure_iou", "appearance_dist", "shared_classes"])
            for r in records:
                writer.writerow(
                    [
                        r.sample_id,
                        r.exemplar_id,
                        _fmt(r.report.structure_iou),
                        _fmt(r.report.appearance_dist),
                        " ".join(str(c) for c in r.report.shared_classes),
                    ]
                )
            writer.writerow(
                [
                    "mean",
                    "",
                    _fmt(summary.structure_iou),
                    _fmt(summary.appearance_dist),
                    " ".join(str(c) for c in summary.shared_classes),
                ]
            )
        with classes_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["sample_id", "class_id", "iou", "appearance_dist", "target_pixels"])
            for r in records:
                for row in r.report.per_class:
                    writer.writerow(
                        [r.sample_id, row.class_id, _fmt(row.iou), _fmt(row.appearance_dist), row.target_pixels]
                    )
    except OSError as e:
        raise IoError(path, f"cannot write report: {e.strerror or e}") from e
    return path, classes_path
