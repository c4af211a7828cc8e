#!/usr/bin/env python3
"""
Unit tests for checkpoint files.
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from checkpoint import CheckpointError, checkpoint_paths, load_checkpoint, save_checkpoint


class TestCheckpoint(unittest.TestCase):
    """Unit tests for save_checkpoint / load_checkpoint."""

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.stem = os.path.join(self.tmpdir, 'model')

    def tearDown(self):
        shutil.rmtree(self.tmpdir)

    def test_arrays_and_metadata_survive(self):
        arrays = {
            'unmixing.decoder.G.weight': np.arange(6, dtype=np.float32).reshape(3, 2, 1, 1),
            'fusion.out.bias': np.array([0.5, -1.5], dtype=np.float32),
        }
        save_checkpoint(self.stem, arrays, {'bands': '32', 'flatten_order': 'channel-major'})
        loaded, metadata = load_checkpoint(self.stem)
        self.assertEqual(list(loaded), list(arrays))
        for name in arrays:
            np.testing.assert_array_equal(loaded[name], arrays[name])
            self.assertEqual(loaded[name].dtype, np.float32)
        self.assertEqual(metadata, {'bands': '32', 'flatten_order': 'channel-major'})

    def test_manifest_layout(self):
        save_checkpoint(self.stem, {'a': np.zeros((2, 3)), 'b': np.zeros(4)})
        payload_path, manifest_path = checkpoint_paths(self.stem)
        with open(manifest_path) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines, ['a\t2x3\t0', 'b\t4\t24'])
        self.assertEqual(os.path.getsize(payload_path), 40)

    def test_truncated_payload(self):
        save_checkpoint(self.stem, {'a': np.zeros((2, 3))})
        payload_path, _ = checkpoint_paths(self.stem)
        with open(payload_path, 'r+b') as f:
            f.truncate(12)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.stem)

    def test_trailing_bytes(self):
        save_checkpoint(self.stem, {'a': np.zeros(2)})
        payload_path, _ = checkpoint_paths(self.stem)
        with open(payload_path, 'ab') as f:
            f.write(b'\0' * 4)
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.stem)

    def test_missing_files(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmpdir, 'absent'))

    def test_malformed_entry(self):
        save_checkpoint(self.stem, {'a': np.zeros(2)})
        _, manifest_path = checkpoint_paths(self.stem)
        with open(manifest_path, 'w') as f:
            f.write('a\tnot-a-shape\t0\n')
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.stem)


if __name__ == '__main__':
    unittest.main()
