"""noduleagent/synth.py.

Synthetic CT fixtures: an air-filled volume holding soft-tissue ellipsoids,
with the gold per-slice masks and a controlled-vocabulary annotation of every
ellipsoid.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from os.path import join
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_fill_holes

from noduleagent.exceptions import DataError
from noduleagent.imaging import Mask2D, Volume, measure_nodule
from noduleagent.io.volume import write_volume
from noduleagent.static.vocabulary import density_from_hu, lobe_from_position, shape_from_axes
from noduleagent.utilities import dump_json

logger = logging.getLogger(__name__)

AIR_HU = -1000
TISSUE_HU = 40


@dataclass(frozen=True)
class Blob:
    """An ellipsoid given by its centre and semi-axes in voxels.  `cavity` is
    the fraction of each semi-axis hollowed out to air."""

    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    hu: float = TISSUE_HU
    cavity: float = 0.0

    def __post_init__(self):
        if any(r <= 0 for r in self.radii):
            raise DataError(f"blob radii must be positive, got {self.radii}")
        if not 0.0 <= self.cavity < 1.0:
            raise DataError(f"cavity fraction must lie in [0, 1), got {self.cavity}")

    @classmethod
    def inflate(cls, data):
        return cls(
            center=tuple(float(c) for c in data["center"]),
            radii=tuple(float(r) for r in data["radii"]),
            hu=float(data.get("hu", TISSUE_HU)),
            cavity=float(data.get("cavity", 0.0)),
        )


@dataclass
class SynthSpec:
    dims: Tuple[int, int, int] = (64, 64, 12)
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 2.0)
    blobs: List[Blob] = field(default_factory=list)
    noise_hu: float = 20.0

    @classmethod
    def inflate(cls, data):
        try:
            return cls(
                dims=tuple(int(d) for d in data.get("dims", (64, 64, 12))),
                spacing_mm=tuple(float(s) for s in data.get("spacing_mm", (1.0, 1.0, 2.0))),
                blobs=[Blob.inflate(b) for b in data.get("blobs", [])],
                noise_hu=float(data.get("noise_hu", 20.0)),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DataError(f"malformed synthetic spec: {err}") from err

    @classmethod
    def single_blob(cls):
        """One oval solid nodule in the right lung, five slices deep."""
        return cls(blobs=[Blob(center=(20.0, 28.0, 5.0), radii=(5.0, 4.0, 2.9))])


@dataclass
class SynthFixture:
    volume: Volume
    gold_masks: List[List[Mask2D]]
    annotations: List[Dict]


def _rasterize(blob: Blob, dims):
    nx, ny, nz = dims
    for axis, (c, r, n) in enumerate(zip(blob.center, blob.radii, dims)):
        if c - r < 0 or c + r > n - 1:
            raise DataError(
                f"blob at {blob.center} with radii {blob.radii} leaves the volume "
                f"along axis {'xyz'[axis]}"
            )
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cx, cy, cz = blob.center
    rx, ry, rz = blob.radii
    radius = ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 + ((z - cz) / rz) ** 2
    inside = radius <= 1.0
    hollow = radius <= blob.cavity**2 if blob.cavity > 0 else np.zeros_like(inside)
    return inside, hollow


def annotate(blob: Blob, masks: Sequence[Mask2D], dims, spacing_mm):
    """Controlled-vocabulary findings of a rasterized blob."""
    nx, _, nz = dims
    size = measure_nodule(masks, spacing_mm)
    largest = max(masks, key=lambda m: m.positive_count)
    first, last = masks[0].z_index, masks[-1].z_index
    shape = shape_from_axes(size.long_diameter_mm, size.short_diameter_mm)
    annotation = {
        "lobe": lobe_from_position(
            (largest.centroid[0] + 0.5) / nx, ((first + last) / 2 + 0.5) / nz
        ),
        "density": density_from_hu(blob.hu),
        "shape": shape,
        "margin": "smooth" if shape in ("round", "oval") else "lobulated",
        "size_mm": round(size.long_diameter_mm, 4),
    }
    if blob.cavity > 0 and any(_has_hole(m) for m in masks):
        annotation["cavitation"] = True
    return annotation


def _has_hole(mask: Mask2D):
    return bool(np.any(binary_fill_holes(mask.bits) & ~mask.bits))


def synth_fixture(spec: SynthSpec, seed=0) -> SynthFixture:
    """Renders `spec` with Gaussian noise drawn from `seed`."""
    nx, ny, nz = spec.dims
    rng = np.random.default_rng(seed)
    array = np.full((nz, ny, nx), float(AIR_HU))

    occupied = np.zeros((nz, ny, nx), dtype=bool)
    gold, annotations = [], []
    for index, blob in enumerate(spec.blobs):
        inside, hollow = _rasterize(blob, spec.dims)
        if np.any(inside & occupied):
            raise DataError(f"blob {index} overlaps an earlier blob")
        occupied |= inside
        tissue = inside & ~hollow
        array[tissue] = blob.hu

        masks = [Mask2D.from_array(z, tissue[z]) for z in range(nz)]
        masks = [m for m in masks if m is not None]
        if not masks:
            raise DataError(f"blob {index} at {blob.center} covers no voxel")
        gold.append(masks)
        annotations.append(annotate(blob, masks, spec.dims, spec.spacing_mm))

    if spec.noise_hu > 0:
        array += rng.normal(0.0, spec.noise_hu, size=array.shape)
    voxels = np.clip(np.rint(array), -32768, 32767).astype(np.int16)
    volume = Volume(spec.dims, spec.spacing_mm, voxels.ravel())
    logger.info("synthesized %s volume with %d blobs", spec.dims, len(spec.blobs))
    return SynthFixture(volume=volume, gold_masks=gold, annotations=annotations)


def write_fixture(fixture: SynthFixture, out_dir):
    """Writes `volume.json` + `volume.raw`, `gold_masks.json` and
    `annotation.json` under `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    write_volume(fixture.volume, join(out_dir, "volume.json"))
    dump_json(
        [
            {"nodule": k, "masks": [m.to_rle() for m in masks]}
            for k, masks in enumerate(fixture.gold_masks)
        ],
        join(out_dir, "gold_masks.json"),
    )
    dump_json(fixture.annotations, join(out_dir, "annotation.json"))
    return out_dir


def read_gold_masks(path) -> List[Mask2D]:
    """Every gold mask of a `gold_masks.json`, flattened."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return [Mask2D.from_rle(m) for nodule in data for m in nodule["masks"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise DataError(f"unreadable gold masks {path}: {err}") from err
