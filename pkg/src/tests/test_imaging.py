"""test/test_imaging.py.

Tests for noduleagent/imaging.py .
"""

import math
import unittest

import ddt
import numpy as np
from scipy.spatial.distance import pdist

from noduleagent.exceptions import DataError, DimensionMismatch, EmptyMaskError
from noduleagent.imaging import *

epsilon = 0.001


def block(x0, x1, y0, y1, shape=(16, 16), z_index=0):
    bits = np.zeros(shape, dtype=bool)
    bits[y0:y1, x0:x1] = True
    return Mask2D(z_index, bits)


def ellipse(rx, ry, cx=20.0, cy=20.0, shape=(48, 48), z_index=0):
    ys, xs = np.mgrid[: shape[0], : shape[1]]
    return Mask2D(z_index, ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0)


@ddt.ddt
class TestMaskGeometry(unittest.TestCase):
    """Check the Jaccard overlap and distance of masks."""

    def test_identical_masks(self):
        mask = block(2, 5, 2, 5)
        self.assertEqual(mask_iou(mask, mask), 1.0)
        self.assertEqual(mask_distance(mask, mask), 0.0)

    def test_disjoint_masks(self):
        self.assertEqual(mask_iou(block(0, 3, 0, 3), block(8, 11, 8, 11)), 0.0)
        self.assertEqual(mask_distance(block(0, 3, 0, 3), block(8, 11, 8, 11)), 1.0)

    def test_offset_blocks(self):
        a, b = block(0, 3, 0, 3), block(1, 4, 0, 3)
        self.assertAlmostEqual(mask_iou(a, b), 0.5)
        self.assertAlmostEqual(mask_distance(a, b), 0.5)

    def test_slice_index_is_ignored(self):
        a, b = block(0, 3, 0, 3, z_index=1), block(1, 4, 0, 3, z_index=7)
        self.assertAlmostEqual(mask_iou(a, b), 0.5)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            mask_iou(block(0, 3, 0, 3), block(0, 3, 0, 3, shape=(8, 8)))

    def test_metric_axioms(self):
        rng = np.random.default_rng(7)
        for _ in range(10000):
            a, b, c = self._random_triple(rng)
            self.assertEqual(mask_iou(a, b), mask_iou(b, a))
            self.assertLessEqual(
                mask_distance(a, c), mask_distance(a, b) + mask_distance(b, c) + 1e-12
            )

    @staticmethod
    def _random_triple(rng):
        triple = []
        while len(triple) < 3:
            mask = Mask2D.from_array(0, rng.random((4, 4)) < rng.uniform(0.1, 0.9))
            if mask is not None:
                triple.append(mask)
        return triple


class TestMask2D(unittest.TestCase):
    """Check mask construction and its derived properties."""

    def test_empty_mask_rejected(self):
        with self.assertRaises(EmptyMaskError):
            Mask2D(0, np.zeros((4, 4), dtype=bool))
        self.assertIsNone(Mask2D.from_array(0, np.zeros((4, 4))))

    def test_positive_count_and_bbox(self):
        mask = block(3, 7, 2, 4)
        self.assertEqual(mask.positive_count, 8)
        self.assertEqual(mask.bbox, (3, 7, 2, 4))

    def test_rle_layout(self):
        bits = np.zeros((4, 4), dtype=bool)
        bits[1, 1:3] = True
        mask = Mask2D(2, bits)
        self.assertEqual(mask.to_rle(), {"z": 2, "dims": [4, 4], "runs": [[5, 2]]})
        self.assertEqual(Mask2D.from_rle(mask.to_rle()), mask)

    def test_bits_are_read_only(self):
        mask = block(0, 2, 0, 2)
        with self.assertRaises(ValueError):
            mask.bits[0, 0] = False


class TestVolume(unittest.TestCase):
    """Check the volume data model."""

    def test_voxel_count_invariant(self):
        with self.assertRaises(DataError):
            Volume((4, 4, 2), (1, 1, 2), np.zeros(30, dtype=np.int16))

    def test_non_positive_spacing(self):
        with self.assertRaises(DataError):
            Volume((4, 4, 2), (1, 0, 2), np.zeros(32, dtype=np.int16))

    def test_slices_are_x_fastest(self):
        volume = Volume((3, 2, 2), (1, 1, 1), np.arange(12))
        self.assertEqual(volume.array.shape, (2, 2, 3))
        second = volume.slice(1)
        self.assertEqual(second.pixels.tolist(), [[6, 7, 8], [9, 10, 11]])
        with self.assertRaises(DataError):
            volume.slice(2)


@ddt.ddt
class TestFocalCrop(unittest.TestCase):
    """Check the context-padded crop."""

    def test_expansion_arithmetic(self):
        slice_ = Slice2D(0, np.zeros((512, 512)), (1, 1, 1))
        crop = focal_crop(slice_, block(10, 20, 10, 20, shape=(512, 512)), 1.5)
        self.assertEqual(crop.bbox, (7, 23, 7, 23))
        self.assertEqual(crop.pixels.shape, (16, 16))
        self.assertEqual(crop.mask_bits.sum(), 100)

    def test_full_slice_mask(self):
        slice_ = Slice2D(0, np.zeros((8, 8)), (1, 1, 1))
        crop = focal_crop(slice_, block(0, 8, 0, 8, shape=(8, 8)), 1.5)
        self.assertEqual(crop.bbox, (0, 8, 0, 8))

    def test_clamped_at_origin(self):
        slice_ = Slice2D(0, np.zeros((32, 32)), (1, 1, 1))
        crop = focal_crop(slice_, block(0, 4, 0, 4, shape=(32, 32)), 2.0)
        self.assertEqual(crop.bbox[0], 0)
        self.assertEqual(crop.bbox[2], 0)

    @ddt.data(1.0, 1.2, 1.5, 2.0, 3.7)
    def test_crop_contains_mask_box(self, margin):
        rng = np.random.default_rng(int(margin * 10))
        slice_ = Slice2D(0, np.zeros((40, 40)), (1, 1, 1))
        for _ in range(50):
            x0, y0 = rng.integers(0, 35, size=2)
            x1, y1 = x0 + rng.integers(1, 6), y0 + rng.integers(1, 6)
            mask = block(x0, x1, y0, y1, shape=(40, 40))
            cx0, cx1, cy0, cy1 = focal_crop(slice_, mask, margin).bbox
            self.assertTrue(cx0 <= x0 and x1 <= cx1 and cy0 <= y0 and y1 <= cy1)
            self.assertTrue(0 <= cx0 and cx1 <= 40 and 0 <= cy0 and cy1 <= 40)
            if margin == 1.0:
                self.assertEqual((cx0, cx1, cy0, cy1), mask.bbox)

    def test_margin_below_one(self):
        slice_ = Slice2D(0, np.zeros((8, 8)), (1, 1, 1))
        with self.assertRaises(ValueError):
            focal_crop(slice_, block(2, 4, 2, 4, shape=(8, 8)), 0.9)


@ddt.ddt
class TestMeasureNodule(unittest.TestCase):
    """Check the cross-sectional size measurement."""

    def test_single_voxel(self):
        size = measure_nodule([block(3, 4, 3, 4)], (1, 1, 1))
        self.assertEqual(size.long_diameter_mm, 1.0)
        self.assertEqual(size.short_diameter_mm, 1.0)
        self.assertEqual(size.height_mm, 1.0)
        self.assertAlmostEqual(size.volume_mm3, 1 / 6)

    def test_line_over_three_slices(self):
        masks = [block(0, 10, 5, 6, z_index=z) for z in (4, 5, 6)]
        size = measure_nodule(masks, (1, 1, 2))
        self.assertEqual(size.long_diameter_mm, 10.0)
        self.assertEqual(size.short_diameter_mm, 1.0)
        self.assertEqual(size.height_mm, 6.0)
        self.assertEqual(size.volume_mm3, 10.0)

    def test_largest_section_is_measured(self):
        masks = [block(0, 2, 0, 1, z_index=0), block(0, 6, 0, 1, z_index=1)]
        self.assertEqual(measure_nodule(masks, (1, 1, 1)).long_diameter_mm, 6.0)
        masks[0] = block(0, 1, 0, 7, z_index=0)
        self.assertEqual(measure_nodule(masks, (1, 1, 1)).long_diameter_mm, 7.0)

    def test_preconditions(self):
        with self.assertRaises(DataError):
            measure_nodule([], (1, 1, 1))
        with self.assertRaises(DataError):
            measure_nodule([block(0, 2, 0, 2, z_index=0), block(0, 2, 0, 2, z_index=2)], (1, 1, 1))

    def test_anisotropy_warning(self):
        with self.assertLogs("noduleagent.imaging", level="WARNING"):
            measure_nodule([block(0, 2, 0, 2)], (1.0, 1.5, 1.0))

    def test_digitized_sphere(self):
        ys, xs = np.mgrid[:16, :16]
        masks = [
            Mask2D(z, (xs - 7) ** 2 + (ys - 7) ** 2 + (z - 5) ** 2 <= 25)
            for z in range(11)
        ]
        size = measure_nodule(masks, (1, 1, 1))
        self.assertLessEqual(abs(size.long_diameter_mm - 11.0), 1.0 + epsilon)

    @ddt.data(0.5, 0.8, 1.0)
    def test_random_ellipses_against_oracle(self, spacing):
        rng = np.random.default_rng(int(spacing * 100))
        for _ in range(50):
            rx, ry = rng.uniform(1.0, 9.0, size=2)
            mask = ellipse(rx, ry, cx=rng.uniform(18, 22), cy=rng.uniform(18, 22))
            ys, xs = np.nonzero(mask.bits)
            oracle = math.sqrt(pdist(np.column_stack([xs, ys]), "sqeuclidean").max(initial=0))
            size = measure_nodule([mask], (spacing, spacing, 2.0))
            self.assertAlmostEqual(size.long_diameter_mm, oracle * spacing + spacing)
            self.assertLessEqual(size.short_diameter_mm, size.long_diameter_mm)
            self.assertAlmostEqual(
                size.volume_mm3,
                size.long_diameter_mm * size.short_diameter_mm * size.height_mm / 6,
                delta=1e-9,
            )

    def test_size_recomputes_volume(self):
        size = NoduleSize.from_diameters(9.0, 8.0, 4.0)
        self.assertAlmostEqual(size.volume_mm3, 48.0, delta=epsilon)
        self.assertEqual(NoduleSize.inflate(size.to_json()), size)

    @ddt.data(
        {"long_diameter_mm": 8.0, "short_diameter_mm": 9.0, "height_mm": 4.0},
        {"long_diameter_mm": 8.0, "short_diameter_mm": 0.0, "height_mm": 4.0},
        {"long_diameter_mm": 8.0, "short_diameter_mm": 6.0, "height_mm": -2.0},
        {"long_diameter_mm": "nan", "short_diameter_mm": 6.0, "height_mm": 2.0},
        {"long_diameter_mm": "wide", "short_diameter_mm": 6.0, "height_mm": 2.0},
        {"long_diameter_mm": None, "short_diameter_mm": 6.0, "height_mm": 2.0},
        {"short_diameter_mm": 6.0, "height_mm": 2.0},
    )
    def test_malformed_size_is_rejected(self, data):
        with self.assertRaises(DataError):
            NoduleSize.inflate(data)
