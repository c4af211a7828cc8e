#!/usr/bin/env python3
"""
Configuration management for DSNet runs.

This module handles reading and validating settings. Sources, highest
precedence first: command-line flags, a JSON config file, DSNET_*
environment variables, built-in defaults.
"""

import json
import logging
import os
import sys
from typing import Any, Dict, Optional

from dsnet import VARIANTS
from hsi_data import SceneSpec, SplitSpec
from trainer import SCHEDULES, TrainConfig
from unmixing import MAX_DECODER_LAYERS, RELU_PLACEMENTS

SUPPORTED_PATCH_SIZES = (5, 7)
MAP_MODES = ('labeled', 'all')


class ConfigurationError(Exception):
    """Exception raised for configuration errors."""
    pass


def _parse_bool(value: str) -> bool:
    return str(value).strip().lower() in ('true', '1', 'yes')


class Config:
    """Resolved settings for every command."""

    # setting -> (environment variable, parser)
    ENVIRONMENT = {
        'seed': ('DSNET_SEED', int),
        'epochs': ('DSNET_EPOCHS', int),
        'batch_size': ('DSNET_BATCH_SIZE', int),
        'lr': ('DSNET_LR', float),
        'lam': ('DSNET_LAMBDA', float),
        'decoder_layers': ('DSNET_DECODER_LAYERS', int),
        'patch_size': ('DSNET_PATCH', int),
        'precision': ('DSNET_PRECISION', int),
        'deterministic': ('DSNET_DETERMINISTIC', _parse_bool),
        'output_dir': ('DSNET_OUTPUT_DIR', str),
        'checkpoint_every': ('DSNET_CHECKPOINT_EVERY', int),
    }

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize configuration from defaults, the environment, a config file and overrides.

        Args:
            config_file: Optional JSON file of setting -> value
            overrides: Settings given on the command line; None values are ignored

        Raises:
            ConfigurationError: If a value cannot be parsed or a setting is unknown
        """
        self.logging = logging.getLogger(__name__)

        self._load_run_config()
        self._load_training_config()
        self._load_scene_config()
        self._load_evaluation_config()
        self._load_environment()
        self._load_aws_config()
        self.config_file = config_file
        if config_file:
            self._apply(self._read_config_file(config_file), source=config_file)
        if overrides:
            self._apply({k: v for k, v in overrides.items() if v is not None}, source='command line')

    def _load_run_config(self):
        """Load run-wide defaults."""
        self.seed = 0
        self.deterministic = False
        self.precision = 32
        self.output_dir = 'runs'
        self.checkpoint_every = 0

    def _load_training_config(self):
        """Load training defaults."""
        self.epochs = 500
        self.batch_size = 64
        self.lr = 1e-3
        self.decay_factor = 0.9
        self.decay_every = 50
        self.lam = 0.5
        self.decoder_layers = 2
        self.patch_size = 7
        self.variant = 'full'
        self.relu_placement = 'table'
        self.schedule = 'blended'
        self.endmembers: Optional[int] = None
        self.train_per_class: Optional[int] = 50
        self.train_ratio: Optional[float] = None

    def _load_scene_config(self):
        """Load synthetic scene defaults."""
        self.bands = 32
        self.classes = 5
        self.rows = 64
        self.cols = 64
        self.smoothness = 1.5
        self.nonlinear_strength = 0.3
        self.snr_db = 30.0
        self.dirichlet_alpha = 0.1
        self.min_purity: Optional[float] = None

    def _load_evaluation_config(self):
        """Load evaluation defaults."""
        self.workers = 1
        self.map_mode = 'labeled'

    def _load_environment(self):
        """Override defaults from DSNET_* environment variables."""
        for setting, (variable, parser) in self.ENVIRONMENT.items():
            raw = os.getenv(variable)
            if raw is None or raw == '':
                continue
            try:
                setattr(self, setting, parser(raw))
            except ValueError:
                raise ConfigurationError(f"Invalid value for {variable}: '{raw}'")

    def _load_aws_config(self):
        """Load the optional S3 mirror settings for run manifests."""
        self.aws_access_key_id = os.getenv('AWS_ACCESS_KEY_ID')
        self.aws_secret_access_key = os.getenv('AWS_SECRET_ACCESS_KEY')
        self.aws_region = os.getenv('AWS_REGION')
        self.s3_bucket = os.getenv('DSNET_S3_BUCKET', '')

    def _read_config_file(self, path: str) -> Dict[str, Any]:
        try:
            with open(path) as f:
                values = json.load(f)
        except FileNotFoundError:
            raise ConfigurationError(f"Config file not found: {path}")
        except OSError as e:
            raise ConfigurationError(f"Config file {path} cannot be read: {e.strerror or e}")
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(values, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        return values

    def _apply(self, values: Dict[str, Any], source: str):
        known = self.as_dict()
        for key, value in values.items():
            if key not in known:
                raise ConfigurationError(f"Unknown setting '{key}' in {source}")
            setattr(self, key, value)
        # a ratio from a higher-precedence source replaces the per-class count, and vice versa
        if values.get('train_ratio') is not None and 'train_per_class' not in values:
            self.train_per_class = None
        if values.get('train_per_class') is not None and 'train_ratio' not in values:
            self.train_ratio = None
        self.logging.debug(f"Applied {len(values)} settings from {source}")

    def setup_logging(self):
        """Set up logging configuration."""
        logging.basicConfig(
            level=os.getenv('LOG_LEVEL', 'INFO').upper(),
            format='%(asctime)s - %(levelname)s - %(message)s',
            stream=sys.stdout,
            force=True
        )

        logging.info("Logging is configured to level: %s", os.getenv('LOG_LEVEL', 'INFO').upper())

    def _require(self, condition: bool, message: str):
        if not condition:
            raise ConfigurationError(message)

    def validate_training_config(self):
        """
        Validate optimization and model settings.

        Raises:
            ConfigurationError: Naming the first invalid setting
        """
        self._require(isinstance(self.epochs, int) and self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        self._require(isinstance(self.batch_size, int) and self.batch_size >= 1,
                      f"batch_size must be >= 1, got {self.batch_size}")
        self._require(self.lr > 0, f"lr must be positive, got {self.lr}")
        self._require(0.0 < self.decay_factor <= 1.0, f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        self._require(self.decay_every >= 1, f"decay_every must be >= 1, got {self.decay_every}")
        self._require(0.0 <= self.lam <= 1.0, f"lambda must lie in [0, 1], got {self.lam}")
        self._require(1 <= self.decoder_layers <= MAX_DECODER_LAYERS,
                      f"decoder_layers must lie in [1, {MAX_DECODER_LAYERS}], got {self.decoder_layers}")
        self._require(self.patch_size in SUPPORTED_PATCH_SIZES,
                      f"patch_size must be one of {SUPPORTED_PATCH_SIZES}, got {self.patch_size}")
        self._require(self.variant in VARIANTS, f"variant must be one of {sorted(VARIANTS)}, got '{self.variant}'")
        self._require(self.relu_placement in RELU_PLACEMENTS,
                      f"relu_placement must be one of {RELU_PLACEMENTS}, got '{self.relu_placement}'")
        self._require(self.schedule in SCHEDULES, f"schedule must be one of {SCHEDULES}, got '{self.schedule}'")
        self._require(self.endmembers is None or self.endmembers >= 2,
                      f"endmembers must be >= 2, got {self.endmembers}")
        self._require(self.checkpoint_every >= 0, f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def validate_split_config(self):
        """
        Raises:
            ConfigurationError: Unless exactly one of train_per_class / train_ratio is set and in range
        """
        self._require((self.train_per_class is None) != (self.train_ratio is None),
                      "exactly one of train_per_class and train_ratio must be set")
        if self.train_ratio is not None:
            self._require(0.0 <= self.train_ratio <= 1.0, f"train_ratio must lie in [0, 1], got {self.train_ratio}")
        else:
            self._require(self.train_per_class >= 0, f"train_per_class must be >= 0, got {self.train_per_class}")

    def validate_scene_config(self):
        """
        Raises:
            ConfigurationError: If the synthetic scene settings are out of range
        """
        self._require(self.bands >= 2, f"bands must be >= 2, got {self.bands}")
        self._require(self.classes >= 2, f"classes must be >= 2, got {self.classes}")
        self._require(self.rows >= 1 and self.cols >= 1, f"size must be positive, got {self.rows}x{self.cols}")
        self._require(self.smoothness > 0, f"smoothness must be positive, got {self.smoothness}")
        self._require(self.nonlinear_strength >= 0, f"nonlinear_strength must be >= 0, got {self.nonlinear_strength}")
        self._require(self.dirichlet_alpha > 0, f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        self._require(self.min_purity is None or 0.0 <= self.min_purity <= 1.0,
                      f"min_purity must lie in [0, 1], got {self.min_purity}")

    def validate_run_config(self):
        """
        Raises:
            ConfigurationError: If precision, workers or map mode is unsupported
        """
        self._require(self.precision in (32, 64), f"precision must be 32 or 64, got {self.precision}")
        self._require(self.workers >= 1, f"workers must be >= 1, got {self.workers}")
        self._require(self.map_mode in MAP_MODES, f"map_mode must be one of {MAP_MODES}, got '{self.map_mode}'")
        self._require(bool(self.output_dir), "output_dir must not be empty")

    def validate_all(self):
        """
        Run all validation checks.

        Raises:
            ConfigurationError: If any validation fails
        """
        self.validate_run_config()
        self.validate_training_config()
        self.validate_split_config()
        self.validate_scene_config()

    def as_dict(self) -> Dict[str, Any]:
        """Every setting (not credentials) with its resolved value."""
        hidden = {'logging', 'config_file', 'aws_access_key_id', 'aws_secret_access_key'}
        return {k: v for k, v in vars(self).items() if k not in hidden}

    def train_config(self, checkpoint_stem: Optional[str] = None) -> TrainConfig:
        fusion, decoder = VARIANTS[self.variant]
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr0=self.lr, decay_factor=self.decay_factor,
            decay_every=self.decay_every, lam=self.lam, decoder_layers=self.decoder_layers,
            patch_size=self.patch_size, seed=self.seed, precision=self.precision, fusion=fusion,
            decoder=decoder, relu_placement=self.relu_placement, schedule=self.schedule,
            endmembers=self.endmembers, checkpoint_every=self.checkpoint_every,
            checkpoint_stem=checkpoint_stem, deterministic=self.deterministic,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            bands=self.bands, endmember_count=self.classes, rows=self.rows, cols=self.cols,
            abundance_smoothness=self.smoothness, nonlinear_strength=self.nonlinear_strength,
            snr_db=self.snr_db, dirichlet_alpha=self.dirichlet_alpha, min_purity=self.min_purity,
        )

    def split_spec(self) -> SplitSpec:
        if self.train_ratio is not None:
            return SplitSpec(ratio=self.train_ratio, seed=self.seed)
        return SplitSpec(train_per_class=self.train_per_class, seed=self.seed)

    def print_summary(self):
        """Print a summary of the configuration (without credentials)."""
        self.logging.info(f"Configuration loaded:")
        self.logging.info(f"  Log Level: {os.getenv('LOG_LEVEL', 'INFO').upper()}")
        if self.config_file:
            self.logging.info(f"  Config File: {self.config_file}")
        self.logging.info(f"  Seed: {self.seed} (deterministic={self.deterministic}, precision={self.precision})")
        self.logging.info(f"  Output Directory: {self.output_dir}")
        self.logging.info(f"  Variant: {self.variant} (K={self.decoder_layers}, relu={self.relu_placement})")
        self.logging.info(f"  Epochs: {self.epochs}, batch {self.batch_size}, lr {self.lr} "
                          f"x{self.decay_factor} every {self.decay_every}")
        self.logging.info(f"  Lambda: {self.lam}, schedule: {self.schedule}")
        self.logging.info(f"  Patch: {self.patch_size}x{self.patch_size}")
        if self.train_ratio is not None:
            self.logging.info(f"  Training ratio: {self.train_ratio}")
        else:
            self.logging.info(f"  Training samples per class: {self.train_per_class}")
        if self.s3_bucket:
            self.logging.info(f"  Manifest mirror: s3://{self.s3_bucket} ({self.aws_region})")
