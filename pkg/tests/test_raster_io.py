#!/usr/bin/env python3
"""
Unit tests for band-sequential raster files.
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from raster_io import DataError, RasterFormatError, raster_paths, read_header, read_raster, write_raster


class TestRasterIO(unittest.TestCase):
    """Unit tests for write_raster / read_raster."""

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.stem = os.path.join(self.tmpdir, 'cube')

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_float_cube_layout(self):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        write_raster(self.stem, data, 'float32')
        raw_path, hdr_path = raster_paths(self.stem)
        self.assertEqual(os.path.getsize(raw_path), 2 * 3 * 4 * 4)
        header = read_header(hdr_path)
        self.assertEqual(header, {'bands': '2', 'rows': '3', 'cols': '4', 'dtype': 'float32',
                                  'interleave': 'bsq', 'byteorder': 'little'})
        # band-sequential: the first row of band 0 is the first 16 bytes
        first = np.fromfile(raw_path, dtype='<f4', count=4)
        np.testing.assert_array_equal(first, data[0, 0])
        np.testing.assert_array_equal(read_raster(self.stem), data)

    def test_two_dimensional_input_is_one_band(self):
        labels = np.array([[0, 1], [2, 65535]])
        write_raster(self.stem, labels, 'uint16')
        loaded = read_raster(self.stem, expected_dtype='uint16')
        self.assertEqual(loaded.shape, (1, 2, 2))
        np.testing.assert_array_equal(loaded[0], labels)

    def test_stem_may_carry_extension(self):
        write_raster(self.stem, np.zeros((1, 2, 2)), 'float32')
        self.assertEqual(read_raster(self.stem + '.raw').shape, (1, 2, 2))

    def test_size_mismatch_names_both_sizes(self):
        write_raster(self.stem, np.zeros((2, 3, 4)), 'float32')
        raw_path, _ = raster_paths(self.stem)
        with open(raw_path, 'r+b') as f:
            f.truncate(90)
        with self.assertRaises(RasterFormatError) as ctx:
            read_raster(self.stem)
        self.assertEqual(ctx.exception.expected_bytes, 96)
        self.assertEqual(ctx.exception.actual_bytes, 90)
        self.assertIn('96', str(ctx.exception))
        self.assertIn('90', str(ctx.exception))

    def test_unknown_dtype(self):
        write_raster(self.stem, np.zeros((1, 2, 2)), 'float32')
        _, hdr_path = raster_paths(self.stem)
        with open(hdr_path, 'w') as f:
            f.write('bands=1\nrows=2\ncols=2\ndtype=int8\n')
        with self.assertRaises(RasterFormatError):
            read_raster(self.stem)
        with self.assertRaises(RasterFormatError):
            write_raster(self.stem, np.zeros((1, 2, 2)), 'float64')

    def test_expected_dtype_is_enforced(self):
        write_raster(self.stem, np.zeros((1, 2, 2)), 'float32')
        with self.assertRaises(RasterFormatError):
            read_raster(self.stem, expected_dtype='uint16')

    def test_non_finite_value_is_located(self):
        data = np.zeros((2, 3, 3), dtype=np.float32)
        write_raster(self.stem, data, 'float32')
        raw_path, _ = raster_paths(self.stem)
        data[1, 2, 0] = np.nan
        data.astype('<f4').tofile(raw_path)
        with self.assertRaises(DataError) as ctx:
            read_raster(self.stem)
        self.assertIn('band 1, row 2, col 0', str(ctx.exception))

    def test_missing_header(self):
        with self.assertRaises(RasterFormatError):
            read_raster(os.path.join(self.tmpdir, 'absent'))


if __name__ == '__main__':
    unittest.main()
