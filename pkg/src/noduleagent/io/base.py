"""noduleagent/io/base.py.

Bare dataclasses which house on-disk image information.
"""

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from noduleagent.exceptions import DataError, VolumeFormatError

VOLUME_DTYPE = "int16le"
VOLUME_ORDER = "x-fastest"


@dataclass
class VolumeHeader:
    """The JSON header of a volume on disk.  The voxel payload lives in a
    companion raw file of exactly 2 * nx * ny * nz bytes, little-endian 16-bit,
    with x varying fastest.
    """

    dims: List[int]
    spacing_mm: List[float]
    dtype: str = VOLUME_DTYPE
    order: str = VOLUME_ORDER
    raw: str = ""

    @classmethod
    def inflate(cls, data):
        """Converts the `data` produced by `dataclasses.asdict` (or read from a
        header file) to a live object."""

        try:
            header = cls(**data)
            dims = [int(d) for d in header.dims]
            spacing = [float(s) for s in header.spacing_mm]
        except (TypeError, ValueError) as err:
            raise VolumeFormatError(f"malformed volume header: {err}") from err

        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeFormatError(f"dims must be 3 positive integers, got {header.dims}")
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise VolumeFormatError(
                f"spacing_mm must be 3 positive reals, got {header.spacing_mm}"
            )
        if header.dtype != VOLUME_DTYPE or header.order != VOLUME_ORDER:
            raise VolumeFormatError(
                f"unsupported payload layout {header.dtype}/{header.order}"
            )
        header.dims = dims
        header.spacing_mm = spacing
        return header

    @property
    def voxel_count(self):
        nx, ny, nz = self.dims
        return nx * ny * nz

    def to_json(self):
        data = {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "dtype": self.dtype,
            "order": self.order,
        }
        if self.raw:
            data["raw"] = self.raw
        return data


@dataclass
class MaskRLE:
    """Run-length encoding of one axial mask: `runs` lists [start, length]
    pairs over the x-fastest flattening of an nx-by-ny grid."""

    z: int
    dims: List[int]
    runs: List[List[int]] = field(default_factory=list)

    @classmethod
    def inflate(cls, data):
        """Converts the `data` produced by `dataclasses.asdict` to a live
        object."""

        try:
            return cls(
                z=int(data["z"]),
                dims=[int(d) for d in data["dims"]],
                runs=[[int(s), int(n)] for s, n in data.get("runs", [])],
            )
        except (KeyError, TypeError, ValueError) as err:
            raise DataError(f"malformed mask record: {err}") from err

    @classmethod
    def encode(cls, z, bits):
        """Encodes a boolean array of shape (ny, nx)."""
        flat = np.asarray(bits, dtype=bool).ravel()  # row-major (ny, nx) is x-fastest
        padded = np.concatenate(([False], flat, [False]))
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        starts, stops = edges[0::2], edges[1::2]
        ny, nx = np.shape(bits)
        return cls(
            z=int(z),
            dims=[int(nx), int(ny)],
            runs=[[int(s), int(e - s)] for s, e in zip(starts, stops)],
        )

    def decode(self):
        """Reconstructs the boolean array of shape (ny, nx)."""
        nx, ny = self.dims
        flat = np.zeros(nx * ny, dtype=bool)
        for start, length in self.runs:
            if start < 0 or length < 0 or start + length > nx * ny:
                raise DataError(f"run [{start}, {length}] leaves the {nx}x{ny} grid")
            flat[start : start + length] = True
        return flat.reshape(ny, nx)

    def to_json(self):
        return {"z": self.z, "dims": list(self.dims), "runs": [list(r) for r in self.runs]}
