"""Binary PPM (P6) and PGM (P5) reading and writing.

Samples are 8-bit when maxval < 256 and 16-bit big-endian otherwise. Header
comments (``#`` to end of line) are skipped.
"""

from pathlib import Path
from typing import Union

import numpy as np

from .errors import IoError, ShapeError

PathLike = Union[str, Path]


def _parse_header(blob: bytes, path: Path) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(blob):
            raise IoError(path, "truncated header")
        if blob[pos : pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise IoError(path, "truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise IoError(path, f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise IoError(path, "malformed header") from e
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise IoError(path, f"invalid header values {width}x{height} maxval {maxval}")
    return magic, width, height, maxval, pos


def read_pnm(path: PathLike) -> tuple[np.ndarray, int]:
    """Return the raw integer raster (``HxW`` or ``HxWx3``) and its maxval."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(path, f"cannot read: {e.strerror or e}") from e
    magic, width, height, maxval, offset = _parse_header(blob, path)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    needed = count * dtype.itemsize
    if len(blob) - offset < needed:
        raise IoError(path, f"truncated raster: expected {needed} bytes")
    raster = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    shape = (height, width, 3) if channels == 3 else (height, width)
    values = raster.reshape(shape).astype(np.int64)
    if values.max(initial=0) > maxval:
        raise IoError(path, f"sample exceeds maxval {maxval}")
    return values, maxval


def _write(path: Path, magic: bytes, raster: np.ndarray, maxval: int) -> None:
    height, width = raster.shape[:2]
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + raster.astype(dtype).tobytes())
    except OSError as e:
        raise IoError(path, f"cannot write: {e.strerror or e}") from e


def write_ppm(path: PathLike, rgb: np.ndarray, maxval: int = 255) -> None:
    """Write an ``HxWx3`` image with values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"PPM needs an HxWx3 image, got {rgb.shape}")
    raster = np.rint(np.clip(rgb, 0.0, 1.0) * maxval)
    _write(Path(path), b"P6", raster, maxval)


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a P6 file as floats in [0, 1]."""
    values, maxval = read_pnm(path)
    if values.ndim != 3:
        raise IoError(path, "expected a P6 (color) image")
    return values.astype(np.float64) / maxval


def write_pgm(path: PathLike, grid: np.ndarray, maxval: int) -> None:
    """Write integer samples ``0..maxval`` as P5."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D grid, got {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() > maxval):
        raise ShapeError(f"PGM samples must lie in [0, {maxval}]")
    _write(Path(path), b"P5", grid, maxval)


def read_pgm(path: PathLike) -> tuple[np.ndarray, int]:
    """Read a P5 file as an integer grid and its maxval."""
    values, maxval = read_pnm(path)
    if values.ndim != 2:
        raise IoError(path, "expected a P5 (gray) image")
    return values, maxval


def write_gray(path: PathLike, gray: np.ndarray) -> None:
    """Write a float grid in [0, 1] at 16-bit precision."""
    gray = np.asarray(gray, dtype=np.float64)
    write_pgm(path, np.rint(np.clip(gray, 0.0, 1.0) * 65535).astype(np.int64), 65535)


def read_gray(path: PathLike) -> np.ndarray:
    values, maxval = read_pgm(path)
    return values.astype(np.float64) / maxval
