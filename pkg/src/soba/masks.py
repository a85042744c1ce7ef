"""Dense and run-length binary masks plus the pixel kernels built on them.

Masks are numpy grids of shape ``(height, width)``, row-major, with pixel
(row, col) = (y, x). Run-length encodings scan column-major (down column 0
first, then column 1, ...) and alternate zero-run / one-run starting with a
zero-run whose length may be 0. All operations are pure: inputs are never
mutated and returned masks own read-only buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError

__all__ = [
    "BitMask",
    "RleMask",
    "Box",
    "SoftMask",
    "encode_rle",
    "decode_rle",
    "rle_to_json",
    "rle_from_json",
    "mask_iou",
    "box_iou",
    "mask_to_box",
    "laplacian",
    "distance_transform",
    "threshold_band",
    "mask_union",
    "mask_intersection",
    "mask_difference",
    "translate_mask",
    "LAPLACIAN_KERNEL",
]

# 5x5 discrete Laplacian: -1 everywhere, +24 at the center (zero net sum, so
# any constant region responds with exact zeros away from the grid border).
LAPLACIAN_KERNEL = -np.ones((5, 5), dtype=np.float64)
LAPLACIAN_KERNEL[2, 2] = 24.0
LAPLACIAN_KERNEL.setflags(write=False)


def _as_grid(pixels, dtype) -> np.ndarray:
    grid = np.asarray(pixels)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise DataError(f"mask grid must be 2D and non-empty, got shape {grid.shape}")
    grid = grid.astype(dtype, copy=False).view()
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True, eq=False)
class BitMask:
    """A binary instance mask over a ``(height, width)`` pixel grid."""

    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_grid(self.pixels, bool))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def area(self) -> int:
        return int(np.count_nonzero(self.pixels))

    def is_empty(self) -> bool:
        return not self.pixels.any()

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    @classmethod
    def zeros(cls, height: int, width: int) -> "BitMask":
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class RleMask:
    """Column-major run-length encoding of a :class:`BitMask`.

    ``counts`` alternates zero-run, one-run, ... starting with a zero-run;
    only the first count may be 0 and the counts must tile the full
    ``width * height`` scan exactly.
    """

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataError(f"RLE dimensions must be positive, got {self.width}x{self.height}")
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise DataError("RLE counts must be non-empty")
        if counts[0] < 0 or any(c < 1 for c in counts[1:]):
            raise DataError(f"RLE counts must be >= 1 past the leading zero-run, got {counts}")
        total = sum(counts)
        if total != self.width * self.height:
            raise DataError(
                f"malformed RLE: counts sum to {total}, expected "
                f"{self.width}x{self.height} = {self.width * self.height}"
            )

    def area(self) -> int:
        return sum(self.counts[1::2])


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box with top-left origin; covers ``[x, x+w) x [y, y+h)``."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise DataError(f"box sides must be non-negative, got w={self.w} h={self.h}")

    def area(self) -> int:
        return self.w * self.h

    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Real-valued mask with every value in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.values, np.float64)
        if grid.min() < 0.0 or grid.max() > 1.0:
            raise DataError("soft mask values must lie in [0, 1]")
        object.__setattr__(self, "values", grid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def binarize(self, threshold: float = 0.5) -> BitMask:
        """Threshold to a BitMask; a value equal to the threshold is set."""
        return BitMask(self.values >= threshold)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SoftMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    @classmethod
    def from_bitmask(cls, mask: BitMask) -> "SoftMask":
        return cls(mask.pixels.astype(np.float64))


def encode_rle(mask: BitMask) -> RleMask:
    """Encode a dense mask as column-major alternating run lengths."""
    flat = mask.pixels.ravel(order="F")
    boundaries = np.flatnonzero(np.diff(flat.view(np.int8))) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [flat.size]))
    runs = (ends - starts).tolist()
    if flat[0]:
        runs = [0] + runs
    return RleMask(width=mask.width, height=mask.height, counts=tuple(runs))


def decode_rle(rle: RleMask) -> BitMask:
    """Exact inverse of :func:`encode_rle`."""
    values = np.arange(len(rle.counts), dtype=np.int64) % 2
    flat = np.repeat(values, rle.counts).astype(bool)
    return BitMask(flat.reshape((rle.height, rle.width), order="F"))


def rle_to_json(rle: RleMask) -> dict:
    """JSON form: ``{"size": [height, width], "counts": [...]}``."""
    return {"size": [rle.height, rle.width], "counts": list(rle.counts)}


def rle_from_json(obj, *, what: str = "mask") -> RleMask:
    """Parse the JSON form back to an RleMask; errors name the offending field."""
    try:
        height, width = (int(v) for v in obj["size"])
        counts = obj["counts"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{what}: RLE object must carry 'size' [h, w] and 'counts': {exc}") from exc
    if not isinstance(counts, (list, tuple)):
        raise DataError(f"{what}: RLE counts must be a list of run lengths")
    try:
        return RleMask(width=width, height=height, counts=tuple(counts))
    except DataError as exc:
        raise DataError(f"{what}: {exc}") from exc


def _require_same_shape(a, b):
    if a.shape != b.shape:
        raise DataError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def mask_iou(a: BitMask, b: BitMask) -> float:
    """Intersection over union of two same-sized masks; 0.0 when both are empty."""
    _require_same_shape(a, b)
    inter = int(np.count_nonzero(a.pixels & b.pixels))
    union = int(np.count_nonzero(a.pixels | b.pixels))
    if union == 0:
        return 0.0
    return inter / union


def box_iou(a: Box, b: Box) -> float:
    """IoU of two boxes; touching edges overlap nothing."""
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(0, iw) * max(0, ih)
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return inter / union


def mask_to_box(mask: BitMask) -> Box:
    """Tight bounds of the set pixels; raises on an empty mask."""
    rows = np.flatnonzero(mask.pixels.any(axis=1))
    if rows.size == 0:
        raise DataError("cannot compute the bounding box of an empty mask")
    cols = np.flatnonzero(mask.pixels.any(axis=0))
    return Box(
        x=int(cols[0]),
        y=int(rows[0]),
        w=int(cols[-1] - cols[0] + 1),
        h=int(rows[-1] - rows[0] + 1),
    )


def _grid_values(mask) -> np.ndarray:
    if isinstance(mask, BitMask):
        return mask.pixels.astype(np.float64)
    if isinstance(mask, SoftMask):
        return mask.values
    return np.asarray(mask, dtype=np.float64)


def laplacian(mask) -> np.ndarray:
    """Absolute response of the 5x5 Laplacian filter, zero-padded at borders.

    Accepts a BitMask, SoftMask, or raw float grid; returns a float grid of
    per-pixel magnitudes (not confined to [0, 1]).
    """
    values = _grid_values(mask)
    response = ndimage.convolve(values, LAPLACIAN_KERNEL, mode="constant", cval=0.0)
    return np.abs(response)


def distance_transform(boundary: BitMask) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest set pixel."""
    if boundary.is_empty():
        raise DataError("distance transform of an empty boundary is undefined")
    return ndimage.distance_transform_edt(~boundary.pixels)


def threshold_band(distance_field: np.ndarray) -> BitMask:
    """Pixels whose max-normalized distance is < 0.5 (the thick-boundary band)."""
    field = np.asarray(distance_field, dtype=np.float64)
    peak = field.max() if field.size else 0.0
    if peak <= 0.0:
        raise DataError("degenerate distance field: maximum distance is zero")
    return BitMask(field / peak < 0.5)


def mask_union(a: BitMask, b: BitMask) -> BitMask:
    _require_same_shape(a, b)
    return BitMask(a.pixels | b.pixels)


def mask_intersection(a: BitMask, b: BitMask) -> BitMask:
    _require_same_shape(a, b)
    return BitMask(a.pixels & b.pixels)


def mask_difference(a: BitMask, b: BitMask) -> BitMask:
    _require_same_shape(a, b)
    return BitMask(a.pixels & ~b.pixels)


def translate_mask(mask: BitMask, dx: int, dy: int) -> BitMask:
    """Shift set pixels by (dx right, dy down), clipping at the borders."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    src_x = slice(max(0, -dx), min(w, w - dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_y, dst_x] = mask.pixels[src_y, src_x]
    return BitMask(out)
