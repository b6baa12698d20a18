"""noduleagent/io/volume.py.

Reader and writer for the header + raw payload volume format.
"""

import json
import logging
from os.path import basename, dirname, exists, join, splitext

import numpy as np

from noduleagent.exceptions import VolumeFormatError
from noduleagent.imaging import Volume
from noduleagent.io.base import VolumeHeader

logger = logging.getLogger(__name__)

RAW_DTYPE = np.dtype("<i2")


def _raw_path(header_path, header):
    if header.raw:
        return join(dirname(header_path), header.raw)
    return splitext(header_path)[0] + ".raw"


def load_volume(path) -> Volume:
    """Reads the JSON header at `path` and its companion raw payload.

    The payload is `header["raw"]` (relative to the header) when present, and
    otherwise the header path with its extension replaced by `.raw`.
    """
    if not exists(path):
        raise VolumeFormatError(f"volume header {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = VolumeHeader.inflate(json.load(f))
    except json.JSONDecodeError as err:
        raise VolumeFormatError(f"volume header {path} is not JSON: {err}") from err

    raw_path = _raw_path(path, header)
    if not exists(raw_path):
        raise VolumeFormatError(f"volume payload {raw_path} does not exist")

    payload = np.fromfile(raw_path, dtype=np.uint8)
    expected = header.voxel_count * RAW_DTYPE.itemsize
    if payload.size != expected:
        raise VolumeFormatError(
            f"payload {raw_path} holds {payload.size} bytes, "
            f"header dims {header.dims} require {expected}"
        )

    voxels = payload.view(RAW_DTYPE).astype(np.int16)
    logger.info("loaded volume %s with dims %s", path, header.dims)
    return Volume(dims=tuple(header.dims), spacing_mm=tuple(header.spacing_mm), voxels=voxels)


def write_volume(volume: Volume, path):
    """Writes `volume` as a header at `path` plus a `.raw` payload beside it."""
    raw_path = splitext(path)[0] + ".raw"
    header = VolumeHeader(
        dims=list(volume.dims),
        spacing_mm=list(volume.spacing_mm),
        raw=basename(raw_path),
    )
    volume.voxels.astype(RAW_DTYPE).tofile(raw_path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(header.to_json(), f, sort_keys=True, indent=2)
        f.write("\n")
    return path
