"""noduleagent/imaging.py.

Volume, slice and mask data model, together with the mask geometry used by
the spotter (Jaccard overlap), focal cropping for the describer, and the
cross-sectional nodule size measurement.

NOTE: All objects here are meant to be read-only after instantiation.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist, squareform

from noduleagent.exceptions import DataError, DimensionMismatch, EmptyMaskError
from noduleagent.io.base import MaskRLE

logger = logging.getLogger(__name__)

ANISOTROPY_TOLERANCE = 0.01
"""Relative in-plane spacing difference beyond which a warning is emitted."""

HULL_THRESHOLD = 64
"""Point count beyond which the long diameter is searched on hull vertices."""


def _readonly(array):
    array.flags.writeable = False
    return array


class Volume:
    """A CT voxel grid in Hounsfield units.

    `dims` is (nx, ny, nz), `spacing_mm` is (sx, sy, sz) and `voxels` is the
    flat x-fastest int16 payload.  `array` exposes the same data shaped
    (nz, ny, nx).
    """

    def __init__(self, dims, spacing_mm, voxels):
        dims = tuple(int(d) for d in dims)
        spacing_mm = tuple(float(s) for s in spacing_mm)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise DataError(f"volume dims must be 3 positive integers, got {dims}")
        if len(spacing_mm) != 3 or any(s <= 0 for s in spacing_mm):
            raise DataError(f"volume spacing must be 3 positive reals, got {spacing_mm}")

        voxels = np.array(voxels, dtype=np.int16).ravel()
        nx, ny, nz = dims
        if voxels.size != nx * ny * nz:
            raise DataError(
                f"volume dims {dims} require {nx * ny * nz} voxels, got {voxels.size}"
            )

        self.dims = dims
        self.spacing_mm = spacing_mm
        self.voxels = _readonly(voxels)

    @property
    def nz(self):
        return self.dims[2]

    @property
    def array(self):
        nx, ny, nz = self.dims
        return self.voxels.reshape(nz, ny, nx)

    def slice(self, z_index: int) -> "Slice2D":
        if not 0 <= z_index < self.nz:
            raise DataError(f"slice {z_index} outside volume of depth {self.nz}")
        return Slice2D(z_index=z_index, pixels=self.array[z_index], spacing_mm=self.spacing_mm)

    def slices(self):
        return [self.slice(z) for z in range(self.nz)]

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.voxels, other.voxels)
        )

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing_mm={self.spacing_mm})"


class Slice2D:
    """One axial slice: `pixels` has shape (ny, nx)."""

    def __init__(self, z_index: int, pixels, spacing_mm):
        pixels = np.array(pixels, dtype=np.int16)
        if pixels.ndim != 2:
            raise DataError(f"slice pixels must be 2-dimensional, got shape {pixels.shape}")
        self.z_index = int(z_index)
        self.pixels = _readonly(pixels)
        self.spacing_mm = tuple(float(s) for s in spacing_mm)

    @property
    def shape(self):
        return self.pixels.shape

    def __repr__(self):
        return f"Slice2D(z_index={self.z_index}, shape={self.shape})"


class Mask2D:
    """A nonempty binary mask on one axial slice, `bits` shaped (ny, nx)."""

    def __init__(self, z_index: int, bits):
        bits = np.array(bits, dtype=bool)
        if bits.ndim != 2:
            raise DataError(f"mask bits must be 2-dimensional, got shape {bits.shape}")
        positive_count = int(np.count_nonzero(bits))
        if positive_count == 0:
            raise EmptyMaskError(f"mask on slice {z_index} has no set pixels")

        self.z_index = int(z_index)
        self.bits = _readonly(bits)
        self.positive_count = positive_count

    @classmethod
    def from_array(cls, z_index: int, bits) -> Optional["Mask2D"]:
        """Like the constructor, but returns None for an empty array."""
        if not np.any(bits):
            return None
        return cls(z_index, bits)

    @classmethod
    def from_rle(cls, data) -> "Mask2D":
        rle = data if isinstance(data, MaskRLE) else MaskRLE.inflate(data)
        return cls(rle.z, rle.decode())

    def to_rle(self):
        return MaskRLE.encode(self.z_index, self.bits).to_json()

    @property
    def shape(self):
        return self.bits.shape

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """Tight half-open bounding box (x0, x1, y0, y1)."""
        ys, xs = np.nonzero(self.bits)
        return int(xs.min()), int(xs.max()) + 1, int(ys.min()), int(ys.max()) + 1

    @property
    def centroid(self) -> Tuple[float, float]:
        ys, xs = np.nonzero(self.bits)
        return float(xs.mean()), float(ys.mean())

    def __eq__(self, other):
        return (
            isinstance(other, Mask2D)
            and self.z_index == other.z_index
            and np.array_equal(self.bits, other.bits)
        )

    def __hash__(self):
        return hash((self.z_index, self.shape, self.bits.tobytes()))

    def __repr__(self):
        return (
            f"Mask2D(z_index={self.z_index}, shape={self.shape}, "
            f"positive_count={self.positive_count})"
        )


@dataclass(frozen=True)
class FocalCrop:
    """A context-padded crop around a mask.  `bbox` is (x0, x1, y0, y1)."""

    z_index: int
    bbox: Tuple[int, int, int, int]
    pixels: np.ndarray
    mask_bits: np.ndarray


@dataclass(frozen=True)
class NoduleSize:
    long_diameter_mm: float
    short_diameter_mm: float
    height_mm: float
    volume_mm3: float

    @classmethod
    def from_diameters(cls, long_diameter_mm, short_diameter_mm, height_mm):
        values = (long_diameter_mm, short_diameter_mm, height_mm)
        if not all(math.isfinite(v) and v > 0 for v in values):
            raise DataError(f"nodule size needs positive finite lengths, got {values}")
        if short_diameter_mm > long_diameter_mm:
            raise DataError(
                f"short diameter {short_diameter_mm} exceeds long diameter {long_diameter_mm}"
            )
        return cls(
            long_diameter_mm=long_diameter_mm,
            short_diameter_mm=short_diameter_mm,
            height_mm=height_mm,
            volume_mm3=long_diameter_mm * short_diameter_mm * height_mm / 6,
        )

    @classmethod
    def inflate(cls, data):
        try:
            lengths = [
                float(data[key]) for key in ("long_diameter_mm", "short_diameter_mm", "height_mm")
            ]
        except (KeyError, TypeError, ValueError) as err:
            raise DataError(f"malformed nodule size {data!r}: {err}") from err
        return cls.from_diameters(*lengths)

    def to_json(self):
        return {
            "long_diameter_mm": self.long_diameter_mm,
            "short_diameter_mm": self.short_diameter_mm,
            "height_mm": self.height_mm,
            "volume_mm3": self.volume_mm3,
        }


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")


def mask_iou(a: Mask2D, b: Mask2D) -> float:
    """|a & b| / |a | b|.  The slice indices of `a` and `b` are ignored."""
    _check_shapes(a, b)
    intersection = int(np.count_nonzero(a.bits & b.bits))
    union = a.positive_count + b.positive_count - intersection
    return intersection / union


def mask_distance(a: Mask2D, b: Mask2D) -> float:
    """Jaccard distance, 1 - IoU."""
    return 1.0 - mask_iou(a, b)


def focal_crop(slice_: Slice2D, mask: Mask2D, margin_factor: float = 1.5) -> FocalCrop:
    """Crops `slice_` and `mask` to the tight mask box grown by
    (margin_factor - 1) / 2 of its size on every side, rounded outward and
    clamped to the image."""
    if margin_factor < 1:
        raise ValueError(f"margin_factor must be >= 1, got {margin_factor}")
    _check_shapes(slice_, mask)

    ny, nx = slice_.shape
    x0, x1, y0, y1 = mask.bbox
    pad_x = round((margin_factor - 1) / 2 * (x1 - x0), 9)
    pad_y = round((margin_factor - 1) / 2 * (y1 - y0), 9)
    bbox = (
        max(0, math.floor(x0 - pad_x)),
        min(nx, math.ceil(x1 + pad_x)),
        max(0, math.floor(y0 - pad_y)),
        min(ny, math.ceil(y1 + pad_y)),
    )
    cx0, cx1, cy0, cy1 = bbox
    return FocalCrop(
        z_index=mask.z_index,
        bbox=bbox,
        pixels=_readonly(slice_.pixels[cy0:cy1, cx0:cx1].copy()),
        mask_bits=_readonly(mask.bits[cy0:cy1, cx0:cx1].copy()),
    )


def _candidate_points(points):
    """The points among which a farthest pair must lie."""
    if len(points) <= HULL_THRESHOLD:
        return points
    try:
        return points[ConvexHull(points).vertices]
    except QhullError:
        # collinear or otherwise flat point sets
        return points


def _long_axis(points):
    """Squared length and integer direction (dx, dy) of the farthest pair of
    integer `points`, ties going to the smaller angle with the x-axis."""
    if len(points) == 1:
        return 0, (1, 0)

    candidates = _candidate_points(points)
    squared = squareform(pdist(candidates, "sqeuclidean"))
    best = squared.max()
    first, second = np.nonzero(np.triu(squared == best, k=1))

    def direction(i, j):
        dx, dy = candidates[j] - candidates[i]
        if dx < 0 or (dx == 0 and dy < 0):
            dx, dy = -dx, -dy
        return int(dx), int(dy)

    directions = {direction(i, j) for i, j in zip(first, second)}
    chosen = min(
        directions,
        key=lambda d: (math.atan2(abs(d[1]), abs(d[0])), math.atan2(d[1], d[0])),
    )
    return int(round(best)), chosen


def measure_nodule(masks: Sequence[Mask2D], spacing_mm) -> NoduleSize:
    """Long and short diameter on the largest cross-section, height from the
    slice count, and volume long * short * height / 6.

    Diameters are measured between pixel centres and extended by one pixel
    spacing, so that a single pixel measures one pixel wide.
    """
    masks = list(masks)
    if not masks:
        raise DataError("cannot measure a nodule without masks")
    for previous, current in zip(masks, masks[1:]):
        if current.z_index != previous.z_index + 1:
            raise DataError(
                f"mask slices must be consecutive, got {previous.z_index} "
                f"then {current.z_index}"
            )
        _check_shapes(previous, current)

    sx, sy, sz = (float(s) for s in spacing_mm)
    if abs(sx - sy) / sx > ANISOTROPY_TOLERANCE:
        logger.warning(
            "anisotropic in-plane spacing %.4f x %.4f; using %.4f for both axes",
            sx,
            sy,
            sx,
        )

    # `max` keeps the first maximum, i.e. the lowest z
    largest = max(masks, key=lambda m: m.positive_count)
    ys, xs = np.nonzero(largest.bits)
    points = np.column_stack([xs, ys]).astype(np.int64)

    squared, (dx, dy) = _long_axis(points)
    long_diameter = math.sqrt(squared) * sx + sx

    norm = math.hypot(dx, dy)
    normal = np.array([-dy / norm, dx / norm])
    projections = points @ normal
    short_diameter = float(projections.max() - projections.min()) * sx + sx
    # the width never exceeds the diameter up to rounding
    short_diameter = min(short_diameter, long_diameter)

    return NoduleSize.from_diameters(long_diameter, short_diameter, len(masks) * sz)


def masks_shape(masks: List[Mask2D]):
    """Common shape of `masks`, raising on disagreement."""
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise DimensionMismatch(f"masks disagree on shape: {sorted(shapes)}")
    return shapes.pop() if shapes else None
