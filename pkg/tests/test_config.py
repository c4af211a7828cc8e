#!/usr/bin/env python3
"""
Unit tests for the Config class.
"""

import json
import os
import shutil
import sys
import tempfile
import unittest
from unittest.mock import patch

# Add src directory to path to import config module
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config import Config, ConfigurationError


class TestConfig(unittest.TestCase):
    """Unit tests for the Config class."""

    def setUp(self):
        """Set up test fixtures."""
        # Clear all relevant environment variables before each test
        self.env_vars = [variable for variable, _ in Config.ENVIRONMENT.values()] + [
            'AWS_ACCESS_KEY_ID', 'AWS_SECRET_ACCESS_KEY', 'AWS_REGION', 'DSNET_S3_BUCKET',
        ]
        for var in self.env_vars:
            if var in os.environ:
                del os.environ[var]
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up after each test."""
        for var in self.env_vars:
            if var in os.environ:
                del os.environ[var]
        shutil.rmtree(self.tmpdir)

    def write_config_file(self, values):
        path = os.path.join(self.tmpdir, 'config.json')
        with open(path, 'w') as f:
            json.dump(values, f)
        return path

    def test_config_with_defaults(self):
        """Test that Config loads the training defaults."""
        config = Config()

        self.assertEqual(config.epochs, 500)
        self.assertEqual(config.batch_size, 64)
        self.assertEqual(config.lr, 1e-3)
        self.assertEqual(config.decay_factor, 0.9)
        self.assertEqual(config.decay_every, 50)
        self.assertEqual(config.lam, 0.5)
        self.assertEqual(config.decoder_layers, 2)
        self.assertEqual(config.patch_size, 7)
        self.assertEqual(config.variant, 'full')
        self.assertEqual(config.schedule, 'blended')
        self.assertEqual(config.precision, 32)
        self.assertFalse(config.deterministic)
        self.assertEqual(config.train_per_class, 50)
        self.assertIsNone(config.train_ratio)
        self.assertEqual(config.s3_bucket, '')
        config.validate_all()

    def test_config_with_environment_variables(self):
        """Test that Config loads values from environment variables."""
        os.environ['DSNET_SEED'] = '17'
        os.environ['DSNET_EPOCHS'] = '40'
        os.environ['DSNET_LAMBDA'] = '0.25'
        os.environ['DSNET_DETERMINISTIC'] = 'true'
        os.environ['DSNET_OUTPUT_DIR'] = '/tmp/dsnet'
        os.environ['DSNET_S3_BUCKET'] = 'runs-bucket'
        os.environ['AWS_REGION'] = 'us-west-2'

        config = Config()

        self.assertEqual(config.seed, 17)
        self.assertEqual(config.epochs, 40)
        self.assertEqual(config.lam, 0.25)
        self.assertTrue(config.deterministic)
        self.assertEqual(config.output_dir, '/tmp/dsnet')
        self.assertEqual(config.s3_bucket, 'runs-bucket')
        self.assertEqual(config.aws_region, 'us-west-2')

    def test_invalid_environment_value(self):
        """Test that an unparsable environment value is reported by variable name."""
        os.environ['DSNET_EPOCHS'] = 'many'
        with self.assertRaises(ConfigurationError) as ctx:
            Config()
        self.assertIn('DSNET_EPOCHS', str(ctx.exception))

    def test_precedence(self):
        """Command line beats config file beats environment beats defaults."""
        os.environ['DSNET_EPOCHS'] = '40'
        os.environ['DSNET_BATCH_SIZE'] = '16'
        path = self.write_config_file({'epochs': 30, 'lam': 0.7})

        config = Config(config_file=path, overrides={'lam': 0.1, 'seed': None})

        self.assertEqual(config.batch_size, 16)
        self.assertEqual(config.epochs, 30)
        self.assertEqual(config.lam, 0.1)
        self.assertEqual(config.seed, 0)

    def test_unknown_setting(self):
        """Test that unknown settings are rejected."""
        with self.assertRaises(ConfigurationError):
            Config(overrides={'learning_rate': 0.1})
        with self.assertRaises(ConfigurationError):
            Config(config_file=self.write_config_file({'dropout': 0.5}))

    def test_bad_config_file(self):
        """Test missing, malformed and non-object config files."""
        with self.assertRaises(ConfigurationError):
            Config(config_file=os.path.join(self.tmpdir, 'absent.json'))
        path = os.path.join(self.tmpdir, 'broken.json')
        with open(path, 'w') as f:
            f.write('{"epochs": ')
        with self.assertRaises(ConfigurationError):
            Config(config_file=path)
        with self.assertRaises(ConfigurationError):
            Config(config_file=self.write_config_file([1, 2]))

    def test_unreadable_config_file(self):
        """A directory or unreadable path is a configuration error naming the path."""
        with self.assertRaises(ConfigurationError) as ctx:
            Config(config_file=self.tmpdir)
        self.assertIn(self.tmpdir, str(ctx.exception))
        path = self.write_config_file({'epochs': 3})
        with patch('builtins.open', side_effect=PermissionError(13, 'Permission denied', path)):
            with self.assertRaises(ConfigurationError) as ctx:
                Config(config_file=path)
        self.assertIn('Permission denied', str(ctx.exception))

    def test_ratio_replaces_per_class_count(self):
        """A training ratio given later replaces the default per-class count, and vice versa."""
        config = Config(overrides={'train_ratio': 0.3})
        self.assertIsNone(config.train_per_class)
        config.validate_split_config()
        self.assertEqual(config.split_spec().ratio, 0.3)

        path = self.write_config_file({'train_ratio': 0.3})
        config = Config(config_file=path, overrides={'train_per_class': 20})
        self.assertIsNone(config.train_ratio)
        self.assertEqual(config.split_spec().train_per_class, 20)

    def test_both_split_rules_rejected(self):
        config = Config(overrides={'train_ratio': 0.3, 'train_per_class': 20})
        with self.assertRaises(ConfigurationError):
            config.validate_split_config()

    def test_validate_training_config(self):
        """Test that each out-of-range training setting is rejected."""
        for setting, value in (('epochs', 0), ('lam', 1.5), ('decoder_layers', 6), ('patch_size', 9),
                               ('variant', 'tiny'), ('relu_placement', 'middle'), ('schedule', 'phased'),
                               ('endmembers', 1), ('checkpoint_every', -1)):
            with self.subTest(setting=setting):
                with self.assertRaises(ConfigurationError):
                    Config(overrides={setting: value}).validate_training_config()

    def test_validate_scene_and_run_config(self):
        with self.assertRaises(ConfigurationError):
            Config(overrides={'classes': 1}).validate_scene_config()
        with self.assertRaises(ConfigurationError):
            Config(overrides={'min_purity': 2.0}).validate_scene_config()
        with self.assertRaises(ConfigurationError):
            Config(overrides={'precision': 16}).validate_run_config()
        with self.assertRaises(ConfigurationError):
            Config(overrides={'map_mode': 'everything'}).validate_run_config()

    def test_derived_specs(self):
        config = Config(overrides={'variant': 'linear-no-fusion', 'classes': 4, 'bands': 20, 'seed': 9})
        train_config = config.train_config(checkpoint_stem='ckpt/model')
        self.assertFalse(train_config.fusion)
        self.assertEqual(train_config.decoder, 'linear')
        self.assertEqual(train_config.lr0, 1e-3)
        self.assertEqual(train_config.seed, 9)
        self.assertEqual(train_config.checkpoint_stem, 'ckpt/model')
        scene = config.scene_spec()
        self.assertEqual((scene.bands, scene.endmember_count), (20, 4))
        self.assertEqual(config.split_spec().seed, 9)

    def test_as_dict_hides_credentials(self):
        os.environ['AWS_ACCESS_KEY_ID'] = 'test_key'
        os.environ['AWS_SECRET_ACCESS_KEY'] = 'test_secret'
        values = Config().as_dict()
        self.assertNotIn('aws_access_key_id', values)
        self.assertNotIn('aws_secret_access_key', values)
        self.assertNotIn('logging', values)
        self.assertIn('seed', values)
        json.dumps(values)

    @patch('config.logging.basicConfig')
    def test_setup_logging(self, mock_basic_config):
        """Test logging setup honours LOG_LEVEL."""
        with patch.dict(os.environ, {'LOG_LEVEL': 'debug'}):
            Config().setup_logging()
        kwargs = mock_basic_config.call_args.kwargs
        self.assertEqual(kwargs['level'], 'DEBUG')
        self.assertEqual(kwargs['format'], '%(asctime)s - %(levelname)s - %(message)s')
        self.assertTrue(kwargs['force'])


if __name__ == '__main__':
    unittest.main()
