"""test/test_volume_io.py.

Tests for noduleagent/io/volume.py and noduleagent/io/base.py .
"""

import json
import tempfile
import unittest
from os.path import join

import ddt
import numpy as np

from noduleagent.exceptions import DataError, VolumeFormatError
from noduleagent.imaging import Volume
from noduleagent.io.base import MaskRLE, VolumeHeader
from noduleagent.io.volume import *

epsilon = 0.001


@ddt.ddt
class TestVolumeFiles(unittest.TestCase):
    """Check reading and writing header + payload volumes."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _header(self, name, data):
        path = join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
        return path

    def test_written_volume_reads_back(self):
        voxels = np.arange(-24, 24, dtype=np.int16) * 40
        volume = Volume((4, 3, 4), (0.7, 0.7, 2.5), voxels)
        path = write_volume(volume, join(self.tmp.name, "scan.json"))
        with open(path, "r", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["raw"], "scan.raw")
        self.assertEqual(load_volume(path), volume)

    def test_payload_is_little_endian(self):
        np.array([1, -2], dtype="<i2").tofile(join(self.tmp.name, "tiny.raw"))
        path = self._header("tiny.json", {"dims": [2, 1, 1], "spacing_mm": [1, 1, 1]})
        self.assertEqual(load_volume(path).voxels.tolist(), [1, -2])

    def test_missing_header(self):
        with self.assertRaises(VolumeFormatError):
            load_volume(join(self.tmp.name, "absent.json"))

    def test_missing_payload(self):
        path = self._header("lonely.json", {"dims": [2, 2, 1], "spacing_mm": [1, 1, 1]})
        with self.assertRaises(VolumeFormatError):
            load_volume(path)

    def test_header_not_json(self):
        path = join(self.tmp.name, "broken.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write("{dims: ")
        with self.assertRaises(VolumeFormatError):
            load_volume(path)

    @ddt.data(3, 5)
    def test_payload_size_mismatch(self, count):
        np.zeros(count, dtype="<i2").tofile(join(self.tmp.name, "short.raw"))
        path = self._header("short.json", {"dims": [2, 2, 1], "spacing_mm": [1, 1, 1]})
        with self.assertRaises(VolumeFormatError):
            load_volume(path)

    @ddt.data(
        {"dims": [2, 2], "spacing_mm": [1, 1, 1]},
        {"dims": [2, 2, 1], "spacing_mm": [1, -1, 1]},
        {"dims": [2, 2, 1], "spacing_mm": [1, 1, 1], "dtype": "float32"},
        {"dims": [2, 2, 1], "spacing_mm": [1, 1, 1], "colour": "grey"},
        {"dims": [2, "two", 1], "spacing_mm": [1, 1, 1]},
        {"dims": [2, 2, 1], "spacing_mm": [1, "fine", 1]},
        {"dims": [2, None, 1], "spacing_mm": [1, 1, 1]},
        {"dims": 3, "spacing_mm": [1, 1, 1]},
        {"dims": [2, 2, 1], "spacing_mm": [1, "nan", 1]},
    )
    def test_bad_headers(self, data):
        with self.assertRaises(VolumeFormatError):
            VolumeHeader.inflate(data)

    def test_volume_format_error_is_data_error(self):
        self.assertTrue(issubclass(VolumeFormatError, DataError))
        self.assertEqual(VolumeFormatError("x").exit_code, 4)


class TestMaskRLE(unittest.TestCase):
    """Check the run-length mask records."""

    def test_runs_span_rows(self):
        bits = np.zeros((3, 4), dtype=bool)
        bits[0, 3] = bits[1, 0] = bits[2, 2] = True
        rle = MaskRLE.encode(1, bits)
        self.assertEqual(rle.dims, [4, 3])
        self.assertEqual(rle.runs, [[3, 2], [10, 1]])
        self.assertTrue(np.array_equal(rle.decode(), bits))

    def test_run_outside_grid(self):
        with self.assertRaises(DataError):
            MaskRLE(z=0, dims=[2, 2], runs=[[3, 2]]).decode()

    def test_malformed_record(self):
        with self.assertRaises(DataError):
            MaskRLE.inflate({"dims": [2, 2]})
