#!/usr/bin/env python3
"""
Unit tests for the command line: exit codes and a small synth/train/eval run.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from main import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, THREAD_VARIABLES, build_parser, pin_threads, run
from tensor import set_precision
from trainer import TrainingError

SCENE = ['--bands', '8', '--classes', '3', '--size', '16x16', '--seed', '5']
TRAINING = ['--epochs', '2', '--batch', '32', '--patch', '5', '--train-ratio', '0.5', '--precision', '64',
            '--deterministic']


class TestCommandLine(unittest.TestCase):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()
        self.environ = patch.dict(os.environ, {})
        self.environ.start()
        for variable in ('DSNET_S3_BUCKET', 'DSNET_DETERMINISTIC', 'DSNET_OUTPUT_DIR'):
            os.environ.pop(variable, None)

    def tearDown(self):
        self.environ.stop()
        shutil.rmtree(self.tmpdir)
        set_precision(32)

    def path(self, *parts):
        return os.path.join(self.tmpdir, *parts)

    def synth(self):
        self.assertEqual(run(['synth', *SCENE, '--output-dir', self.path('scene')]), EXIT_OK)
        return ['--cube', self.path('scene', 'cube'), '--labels', self.path('scene', 'labels')]

    def read_manifest(self, *parts):
        with open(self.path(*parts, 'manifest.json')) as f:
            return json.load(f)

    def test_help_and_usage_errors(self):
        self.assertEqual(run(['--help']), EXIT_OK)
        self.assertEqual(run([]), EXIT_USAGE)
        self.assertEqual(run(['synth', '--size', 'big']), EXIT_USAGE)
        self.assertEqual(run(['train', '--no-such-flag']), EXIT_USAGE)

    def test_synth_rejects_single_class(self):
        code = run(['synth', '--classes', '1', '--output-dir', self.path('one')])
        self.assertEqual(code, EXIT_USAGE)
        manifest = self.read_manifest('one')
        self.assertEqual(manifest['status'], 'failed')
        self.assertIn('classes', manifest['error'])

    def test_synth_outputs(self):
        self.synth()
        for name in ('cube.raw', 'cube.hdr', 'labels.raw', 'abundances.raw', 'endmembers.txt'):
            self.assertTrue(os.path.exists(self.path('scene', name)), name)
        endmembers = np.loadtxt(self.path('scene', 'endmembers.txt'))
        self.assertEqual(endmembers.shape, (8, 3))
        manifest = self.read_manifest('scene')
        self.assertEqual(manifest['command'], 'synth')
        self.assertEqual(manifest['seed'], 5)
        self.assertEqual(manifest['status'], 'succeeded')

    def test_missing_inputs_are_data_errors(self):
        missing = ['--cube', self.path('absent'), '--labels', self.path('absent')]
        self.assertEqual(run(['train', *missing, *TRAINING, '--output-dir', self.path('t')]), EXIT_DATA)
        scene = self.synth()
        code = run(['eval', *scene, '--checkpoint', self.path('none', 'model'), '--output-dir', self.path('e')])
        self.assertEqual(code, EXIT_DATA)

    def test_unwritable_outputs_are_data_errors(self):
        blocker = self.path('blocker')
        with open(blocker, 'w') as f:
            f.write('a file where a directory is expected\n')
        self.assertEqual(run(['synth', *SCENE, '--output-dir', blocker]), EXIT_DATA)

        with patch('commands.save_cube', side_effect=PermissionError(13, 'Permission denied', 'cube.raw')):
            code = run(['synth', *SCENE, '--output-dir', self.path('denied')])
        self.assertEqual(code, EXIT_DATA)
        manifest = self.read_manifest('denied')
        self.assertEqual(manifest['status'], 'failed')
        self.assertIn('Permission denied', manifest['error'])

    def test_config_directory_is_a_usage_error(self):
        code = run(['synth', *SCENE, '--config', self.tmpdir, '--output-dir', self.path('s')])
        self.assertEqual(code, EXIT_USAGE)

    def test_missing_required_argument(self):
        self.assertEqual(run(['train', *TRAINING, '--output-dir', self.path('t')]), EXIT_USAGE)

    def test_numeric_failure_exit_code(self):
        scene = self.synth()
        with patch('commands.train', side_effect=TrainingError('non-finite loss', epoch=0, batch=0)):
            code = run(['train', *scene, *TRAINING, '--output-dir', self.path('t')])
        self.assertEqual(code, EXIT_NUMERIC)
        self.assertEqual(self.read_manifest('t')['status'], 'failed')

    def test_train_eval_and_rerun(self):
        scene = self.synth()
        self.assertEqual(run(['train', *scene, *TRAINING, '--output-dir', self.path('train')]), EXIT_OK)
        for name in ('model.bin', 'model.manifest', 'split.txt', 'train_log.csv'):
            self.assertTrue(os.path.exists(self.path('train', name)), name)
        recorded = self.read_manifest('train')
        self.assertTrue(recorded['inputs']['cube'].startswith(self.path('scene', 'cube.raw') + '#sha256='))
        self.assertEqual(recorded['config']['epochs'], 2)

        code = run(['eval', *scene, '--checkpoint', self.path('train', 'model'),
                    '--split', self.path('train', 'split.txt'), '--workers', '2', '--precision', '64',
                    '--output-dir', self.path('eval')])
        self.assertEqual(code, EXIT_OK)
        for name in ('report.txt', 'report.csv', 'confusion.csv', 'map.raw', 'map.hdr', 'map.png'):
            self.assertTrue(os.path.exists(self.path('eval', name)), name)
        with open(self.path('eval', 'report.txt')) as f:
            self.assertIn('OA (%)', f.read())

        self.assertEqual(run(['rerun', '--from-manifest', self.path('train'),
                              '--output-dir', self.path('replay')]), EXIT_OK)
        with open(self.path('train', 'train_log.csv')) as f, open(self.path('replay', 'train_log.csv')) as g:
            self.assertEqual(f.read(), g.read())
        with open(self.path('train', 'split.txt')) as f, open(self.path('replay', 'split.txt')) as g:
            self.assertEqual(f.read(), g.read())

    def test_exports(self):
        scene = self.synth()
        self.assertEqual(run(['train', *scene, *TRAINING, '--output-dir', self.path('train')]), EXIT_OK)
        model = self.path('train', 'model')

        code = run(['export-abundance', '--checkpoint', model, '--cube', self.path('scene', 'cube'),
                    '--output-dir', self.path('abundance')])
        self.assertEqual(code, EXIT_OK)
        with open(self.path('abundance', 'abundance.hdr')) as f:
            self.assertIn('bands=3', f.read())

        code = run(['export-features', *scene, '--checkpoint', model, '--split', self.path('train', 'split.txt'),
                    '--output-dir', self.path('features')])
        self.assertEqual(code, EXIT_OK)
        with open(self.path('features', 'features.txt')) as f:
            rows = [line.split() for line in f]
        self.assertTrue(rows)
        self.assertTrue(all(len(row) == 2 + 3 for row in rows))

    def test_sweep(self):
        scene = self.synth()
        code = run(['sweep', *scene, *TRAINING, '--epochs', '1', '--param', 'K', '--values', '1,2',
                    '--output-dir', self.path('sweep')])
        self.assertEqual(code, EXIT_OK)
        with open(self.path('sweep', 'sweep.txt')) as f:
            header = f.readline()
        self.assertTrue(header.startswith('Number of decoder layers K'))
        with open(self.path('sweep', 'sweep.csv')) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(all(',ok,' in line for line in lines[1:]))


class TestThreadPinning(unittest.TestCase):

    def setUp(self):
        self.environ = patch.dict(os.environ, {})
        self.environ.start()
        for variable in THREAD_VARIABLES + ('DSNET_DETERMINISTIC',):
            os.environ.pop(variable, None)
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        self.environ.stop()
        shutil.rmtree(self.tmpdir)

    def test_deterministic_flag_pins_threads(self):
        pin_threads(['train', '--deterministic'])
        for variable in THREAD_VARIABLES:
            self.assertEqual(os.environ[variable], '1')

    def test_default_leaves_threads(self):
        pin_threads(['train'])
        for variable in THREAD_VARIABLES:
            self.assertNotIn(variable, os.environ)

    def test_recorded_deterministic_run(self):
        with open(os.path.join(self.tmpdir, 'manifest.json'), 'w') as f:
            json.dump({'config': {'deterministic': True}}, f)
        pin_threads(['rerun', '--from-manifest', self.tmpdir])
        self.assertEqual(os.environ['OMP_NUM_THREADS'], '1')

    def test_parser_commands(self):
        parser = build_parser()
        args = parser.parse_args(['synth', '--size', '20x30', '--snr', 'inf'])
        self.assertEqual(args.size, (20, 30))
        self.assertEqual(args.snr_db, float('inf'))


if __name__ == '__main__':
    unittest.main()
