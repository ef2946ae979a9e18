"""Grayscale rasters and the resampling operations behind the zoom pipeline.

Images are single-channel, row-major, with intensities in [0, 1]. Two
resampling families are provided: box (area-average) filtering for
downscaling, and nearest-neighbor for the crop upscale, which preserves the
exact multiset of source intensities at integer scale factors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

PGM_MAXVAL = 255


@dataclass(frozen=True)
class Raster:
    """Immutable single-channel image; `pixels` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"raster must be a non-empty 2-d array, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("raster intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("raster intensities must lie in [0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def long_side(self) -> int:
        return max(self.width, self.height)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self) -> int:  # shape-level hash only; equality does the real work
        return hash((self.width, self.height))

    def quantized(self) -> np.ndarray:
        """Intensities as integers in [0, 255], the PGM/JSONL wire form."""
        return np.rint(self.pixels * PGM_MAXVAL).astype(np.int64)

    @classmethod
    def from_quantized(cls, values: np.ndarray | list, width: int, height: int) -> "Raster":
        arr = np.asarray(values, dtype=np.float64).reshape(height, width)
        return cls(arr / PGM_MAXVAL)


def _box_weights(n_src: int, n_dst: int) -> np.ndarray:
    """Row-stochastic (n_dst, n_src) matrix averaging source cells into
    destination cells, with fractional overlap at box edges."""
    if n_src <= 0 or n_dst <= 0:
        raise ValueError("resampling sizes must be positive")
    weights = np.zeros((n_dst, n_src))
    scale = n_src / n_dst
    for i in range(n_dst):
        lo = i * scale
        hi = (i + 1) * scale
        j0 = int(np.floor(lo))
        j1 = min(int(np.ceil(hi)), n_src)
        for j in range(j0, j1):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                weights[i, j] = overlap
    weights /= scale
    return weights


def resample_area(img: Raster, width: int, height: int) -> Raster:
    """Box-filter resample to (width, height)."""
    wy = _box_weights(img.height, height)
    wx = _box_weights(img.width, width)
    out = wy @ img.pixels @ wx.T
    return Raster(np.clip(out, 0.0, 1.0))


def resize_nearest(img: Raster, width: int, height: int) -> Raster:
    """Nearest-neighbor resample to (width, height)."""
    if width <= 0 or height <= 0:
        raise ValueError("resize target must be positive")
    rows = (np.arange(height) * img.height) // height
    cols = (np.arange(width) * img.width) // width
    return Raster(img.pixels[np.ix_(rows, cols)])


def downsize_long_side(img: Raster, max_long: int) -> Raster:
    """Shrink so the long side is at most `max_long`, preserving aspect ratio.

    Images already within the limit are returned unchanged, which makes the
    operation idempotent. Dimensions round to the nearest integer, floored
    at 1.
    """
    if max_long < 1:
        raise ValueError("max_long must be >= 1")
    if img.long_side <= max_long:
        return img
    scale = max_long / img.long_side
    new_w = max(1, int(img.width * scale + 0.5))
    new_h = max(1, int(img.height * scale + 0.5))
    return resample_area(img, new_w, new_h)


def area_downsample(img: Raster, factor: int) -> Raster:
    """Average over non-overlapping factor x factor blocks. Requires both
    dimensions to be divisible by `factor`."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if img.height % factor or img.width % factor:
        raise ValueError(
            f"image {img.width}x{img.height} not divisible by block factor {factor}"
        )
    h, w = img.height // factor, img.width // factor
    blocks = img.pixels.reshape(h, factor, w, factor)
    return Raster(blocks.mean(axis=(1, 3)))


def coarse_view(img: Raster, factor: int, slot_size: int) -> Raster:
    """How a fixed-rate perceiver sees `img`: average away detail at block
    size `factor`, then fit the result into a slot_size x slot_size slot by
    nearest-neighbor resize (which adds no information back)."""
    reduced = area_downsample(img, factor)
    if reduced.width == slot_size and reduced.height == slot_size:
        return reduced
    return resize_nearest(reduced, slot_size, slot_size)


def write_pgm(path: str | Path, img: Raster) -> None:
    """Write as plain-text PGM (P2), maxval 255."""
    values = img.quantized()
    lines = ["P2", f"{img.width} {img.height}", str(PGM_MAXVAL)]
    lines.extend(" ".join(str(v) for v in row) for row in values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path: str | Path) -> Raster:
    tokens: list[str] = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        body = line.split("#", 1)[0]
        tokens.extend(body.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain-text PGM (P2) file")
    width, height, maxval = (int(t) for t in tokens[1:4])
    values = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    if values.size != width * height:
        raise ValueError(f"{path}: expected {width * height} samples, got {values.size}")
    return Raster(values.reshape(height, width) / maxval)
