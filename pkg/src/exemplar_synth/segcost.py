"""Binary categorical matching cost between target and exemplar label maps.

``C[i, j, k, l]`` is 1 exactly when target pixel ``(i, j)`` and exemplar pixel
``(k, l)`` carry the same class. Costs at attention resolution are built from
nearest-downsampled label maps, so they stay binary.
"""

import dataclasses
import hashlib
import logging
import threading
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, IoError, ShapeError
from .netpbm import read_pgm, write_pgm
from .scenes import SegMap, resample_nearest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GUIDE_HEADER = "AMGUIDE 1"


@dataclasses.dataclass(frozen=True, eq=False)
class CatCost:
    values: np.ndarray
    target_source: tuple[int, int]
    exemplar_source: tuple[int, int]
    diagnostics: tuple[tuple[int, int], ...] = ()

    @property
    def target_hw(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    @property
    def exemplar_hw(self) -> tuple[int, int]:
        return int(self.values.shape[2]), int(self.values.shape[3])

    @property
    def factors(self) -> tuple[float, float]:
        """Downsample factor of the target and exemplar maps (rows)."""
        return (
            self.target_source[0] / self.target_hw[0],
            self.exemplar_source[0] / self.exemplar_hw[0],
        )

    def row(self, i: int, j: int) -> np.ndarray:
        return self.values[i, j]

    def flat(self) -> np.ndarray:
        """Cost as ``[h*w, h'*w']``, matching flattened attention tokens."""
        h, w = self.target_hw
        hx, wx = self.exemplar_hw
        return self.values.reshape(h * w, hx * wx)


@dataclasses.dataclass(frozen=True, eq=False)
class GuidancePair:
    """Target region restricted to an exemplar region."""

    target_mask: np.ndarray
    exemplar_mask: np.ndarray
    mode: str = "restrict"

    def __post_init__(self) -> None:
        if self.mode != "restrict":
            raise ConfigError(f"unsupported guidance mode {self.mode!r}")
        for name in ("target_mask", "exemplar_mask"):
            mask = np.asarray(getattr(self, name))
            if mask.ndim != 2:
                raise ShapeError(f"{name} must be 2-D, got {mask.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ConfigError(f"{name} must be binary")
            if not mask.any():
                raise ConfigError(f"{name} selects no pixels")
            object.__setattr__(self, name, mask.astype(bool))


@dataclasses.dataclass(frozen=True, eq=False)
class GuidanceSpec:
    pairs: tuple[GuidancePair, ...] = ()

    def digest(self) -> str:
        h = hashlib.sha256()
        for pair in self.pairs:
            for mask in (pair.target_mask, pair.exemplar_mask):
                h.update(repr(mask.shape).encode())
                h.update(np.packbits(mask).tobytes())
        return h.hexdigest()


def build_cat_cost(seg_y: SegMap, seg_x: SegMap) -> CatCost:
    if seg_y.num_classes != seg_x.num_classes:
        raise ConfigError(
            f"label maps disagree on class count: {seg_y.num_classes} vs {seg_x.num_classes}"
        )
    values = (seg_y.labels[:, :, None, None] == seg_x.labels[None, None, :, :]).astype(
        np.float64
    )
    return CatCost(values, seg_y.shape, seg_x.shape)


def downsample_cost(seg_y: SegMap, seg_x: SegMap, target_hw: tuple[int, int]) -> CatCost:
    """Nearest-downsample both label maps to ``target_hw``, then compare."""
    h, w = target_hw
    for name, seg in (("target", seg_y), ("exemplar", seg_x)):
        if h > seg.height or w > seg.width:
            raise ConfigError(f"cannot downsample {name} map {seg.shape} up to {target_hw}")
    small = build_cat_cost(seg_y.resized(h, w), seg_x.resized(h, w))
    return CatCost(small.values, seg_y.shape, seg_x.shape)


def _mask_at(mask: np.ndarray, source: tuple[int, int], hw: tuple[int, int], name: str) -> np.ndarray:
    if mask.shape != source:
        raise ShapeError(f"{name} mask {mask.shape} does not match its label map {source}")
    return resample_nearest(mask.astype(np.int64), *hw).astype(bool)


def apply_guidance(
    cost: CatCost, guide: GuidanceSpec, seg_y: SegMap, seg_x: SegMap
) -> CatCost:
    """Restrict guided target rows to their exemplar region and reserve it.

    Rows inside a target mask keep cost only inside the paired exemplar mask.
    Rows outside every target mask lose cost inside every exemplar mask.
    Guided rows left all-zero are listed in ``diagnostics``.
    """
    if not guide.pairs:
        return cost
    values = cost.values.copy()
    covered = np.zeros(cost.target_hw, dtype=bool)
    reserved = np.zeros(cost.exemplar_hw, dtype=bool)
    for pair in guide.pairs:
        t_mask = _mask_at(pair.target_mask, seg_y.shape, cost.target_hw, "target")
        x_mask = _mask_at(pair.exemplar_mask, seg_x.shape, cost.exemplar_hw, "exemplar")
        values[t_mask] *= x_mask[None]
        covered |= t_mask
        reserved |= x_mask
    values[~covered] *= ~reserved[None]
    empty = covered & ~values.reshape(cost.target_hw + (-1,)).any(axis=-1)
    diagnostics = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(empty)))
    if diagnostics:
        logger.debug("%d guided rows have no admissible exemplar pixel", len(diagnostics))
    return CatCost(values, cost.target_source, cost.exemplar_source, diagnostics)


def load_guidance(path: PathLike) -> GuidanceSpec:
    """Read an ``AMGUIDE 1`` file; mask paths are relative to the file."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise IoError(path, f"cannot read guidance: {e.strerror or e}") from e
    if not lines or lines[0].strip() != GUIDE_HEADER:
        raise IoError(path, f"missing {GUIDE_HEADER!r} header")
    pairs = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 2:
            raise IoError(path, f"line {number}: expected two mask paths")
        target, _ = read_pgm(path.parent / fields[0])
        exemplar, _ = read_pgm(path.parent / fields[1])
        pairs.append(GuidancePair(target > 0, exemplar > 0))
    return GuidanceSpec(tuple(pairs))


def write_guidance(path: PathLike, guide: GuidanceSpec) -> Path:
    """Write masks beside ``path`` and the ``AMGUIDE 1`` index."""
    path = Path(path)
    lines = [GUIDE_HEADER]
    for index, pair in enumerate(guide.pairs):
        names = (f"{path.stem}_{index}_target.pgm", f"{path.stem}_{index}_exemplar.pgm")
        write_pgm(path.parent / names[0], pair.target_mask.astype(np.int64), 1)
        write_pgm(path.parent / names[1], pair.exemplar_mask.astype(np.int64), 1)
        lines.append(f"{names[0]} {names[1]}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(path, f"cannot write guidance: {e.strerror or e}") from e
    return path


def _labels_key(seg: SegMap) -> str:
    return hashlib.sha1(seg.labels.tobytes() + repr(seg.shape).encode()).hexdigest()


class CostCache:
    """Costs keyed by (target, exemplar, resolution, guidance); timestep-free."""

    def __init__(self) -> None:
        self._entries: dict[tuple[str, str, tuple[int, int], str], CatCost] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def get(
        self,
        seg_y: SegMap,
        seg_x: SegMap,
        target_hw: tuple[int, int],
        guide: Optional[GuidanceSpec] = None,
    ) -> CatCost:
        key = (
            _labels_key(seg_y),
            _labels_key(seg_x),
            tuple(target_hw),
            guide.digest() if guide is not None else "",
        )
        with self._lock:
            cached = self._entries.get(key)
        if cached is not None:
            return cached
        cost = downsample_cost(seg_y, seg_x, target_hw)
        if guide is not None:
            cost = apply_guidance(cost, guide, seg_y, seg_x)
        with self._lock:
            self._entries[key] = cost
        return cost
