#!/usr/bin/env python3
"""
Command implementations: synth, train, eval, sweep, export-abundance and export-features.

Every command receives the resolved Config, the parsed arguments and the
RunManifest it should fill in with inputs, artifacts and timings.
"""

import argparse
import logging
import os
import time
import zlib
from dataclasses import dataclass
from decimal import Decimal
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from config import Config, ConfigurationError
from dsnet import VARIANTS, check_compatible, estimated_endmembers, infer, infer_abundances, load_model, save_model
from hsi_data import (LabelRaster, PatchSet, SpectralCube, extract_patches, generate_scene, load_cube, load_labels,
                      read_split_manifest, save_cube, save_labels, select_pixels, split, write_split_manifest)
from metrics import format_report, metrics, report_csv, write_confusion_matrix
from raster_io import DataError, raster_paths, write_raster
from run_manifest import RunManifest
from trainer import evaluate, train, write_log

logger = logging.getLogger(__name__)

SWEEP_PARAMS = {
    'K': 'decoder_layers',
    'lambda': 'lam',
    'ratio': 'train_ratio',
    'ablation': 'variant',
}

# index 0 (unlabeled) is black
PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128),
    (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
]


def _output_path(config: Config, name: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def _require_argument(args: argparse.Namespace, name: str) -> str:
    value = getattr(args, name, None)
    if not value:
        raise ConfigurationError(f"--{name.replace('_', '-')} is required")
    return value


def _load_scene(args: argparse.Namespace, manifest: RunManifest) -> Tuple[SpectralCube, LabelRaster]:
    cube_stem = _require_argument(args, 'cube')
    labels_stem = _require_argument(args, 'labels')
    cube = load_cube(cube_stem)
    labels = load_labels(labels_stem)
    labels.validate(cube)
    manifest.record_input('cube', raster_paths(cube_stem)[0])
    manifest.record_input('labels', raster_paths(labels_stem)[0])
    return cube, labels


def _split_from_manifest(patches: PatchSet, path: str) -> Tuple[PatchSet, PatchSet]:
    recorded = read_split_manifest(path)
    subsets = []
    for name in ('train', 'test'):
        indices = list(recorded[name].values())
        wanted = np.concatenate(indices) if indices else np.empty(0, dtype=np.int64)
        subsets.append(select_pixels(patches, wanted))
    return subsets[0], subsets[1]


def write_map_png(path: str, label_map: np.ndarray):
    """8-bit indexed image of a class map with the fixed palette (colors repeat after 16 classes)."""
    index = np.where(label_map > 0, (label_map - 1) % (len(PALETTE) - 1) + 1, 0).astype(np.uint8)
    image = Image.frombytes('P', (index.shape[1], index.shape[0]), index.tobytes())
    image.putpalette([channel for color in PALETTE for channel in color])
    image.save(path)


def cmd_synth(config: Config, args: argparse.Namespace, manifest: RunManifest):
    """Generate a synthetic scene: cube, labels, true abundances and endmembers."""
    config.validate_scene_config()
    started = time.perf_counter()
    scene = generate_scene(config.scene_spec(), config.seed)

    outputs = {
        'cube': _output_path(config, 'cube'),
        'labels': _output_path(config, 'labels'),
        'abundances': _output_path(config, 'abundances'),
    }
    save_cube(outputs['cube'], scene.cube)
    save_labels(outputs['labels'], scene.labels)
    write_raster(outputs['abundances'], scene.abundances, 'float32')
    endmember_path = _output_path(config, 'endmembers.txt')
    np.savetxt(endmember_path, scene.endmembers, fmt='%.9e', header='rows: bands, columns: endmembers')

    for name, stem in outputs.items():
        manifest.record_artifact(name, f"{stem}.raw")
    manifest.record_artifact('endmembers', endmember_path)
    manifest.timings['synth_s'] = round(time.perf_counter() - started, 3)
    labeled = int(np.count_nonzero(scene.labels.labels))
    logger.info(f"Wrote {scene.cube.bands}x{scene.cube.rows}x{scene.cube.cols} scene with "
                f"{labeled} labeled pixels to {config.output_dir}")


def cmd_train(config: Config, args: argparse.Namespace, manifest: RunManifest):
    """Split the labeled pixels, train DSNet and write the checkpoint, log and split."""
    config.validate_all()
    cube, labels = _load_scene(args, manifest)
    patches = extract_patches(cube, labels, config.patch_size)
    if getattr(args, 'split', None):
        manifest.record_input('split', args.split)
        train_set, test_set = _split_from_manifest(patches, args.split)
    else:
        train_set, test_set = split(patches, config.split_spec())
    split_path = _output_path(config, 'split.txt')
    write_split_manifest(split_path, train_set, test_set)

    checkpoint_stem = os.path.join(config.output_dir, 'checkpoints', 'model') if config.checkpoint_every else None
    started = time.perf_counter()
    result = train(train_set, config.train_config(checkpoint_stem), classes=labels.num_classes)
    manifest.timings['train_s'] = round(time.perf_counter() - started, 3)

    model_stem = _output_path(config, 'model')
    save_model(model_stem, result.params, {'seed': str(config.seed), 'epochs': str(config.epochs)})
    log_path = _output_path(config, 'train_log.csv')
    write_log(log_path, result.log)

    manifest.record_artifact('split', split_path)
    manifest.record_artifact('checkpoint', model_stem)
    manifest.record_artifact('train_log', log_path)
    first, last = result.log[0], result.log[-1]
    logger.info(f"Training finished: total loss {first.total_loss:.6f} -> {last.total_loss:.6f}")


def cmd_eval(config: Config, args: argparse.Namespace, manifest: RunManifest):
    """Score the test split and write the report, confusion matrix and classification map."""
    config.validate_run_config()
    checkpoint = _require_argument(args, 'checkpoint')
    cube, labels = _load_scene(args, manifest)
    params = load_model(checkpoint, config.precision)
    manifest.record_input('checkpoint', f"{checkpoint}.bin")
    arch = params.architecture
    check_compatible(params, cube.bands, arch.patch_size, labels.num_classes)

    patches = extract_patches(cube, labels, arch.patch_size)
    if getattr(args, 'split', None):
        manifest.record_input('split', args.split)
        _, test_set = _split_from_manifest(patches, args.split)
    else:
        logger.warning("No split manifest given, scoring every labeled pixel")
        test_set = patches
    if len(test_set) == 0:
        raise DataError("No test samples to evaluate")

    started = time.perf_counter()
    cm = evaluate(params, test_set, workers=config.workers)
    empty = [k + 1 for k, recall in enumerate(cm.recalls()) if recall is None]
    if empty:
        logger.warning(f"Classes {empty} have no test samples and are left out of AA")
    result = metrics(cm, skip_empty_rows=True)

    report_path = _output_path(config, 'report.txt')
    with open(report_path, 'w') as f:
        f.write(format_report(cm, title=f"DSNet ({arch.variant}) on {len(test_set)} test samples"))
    csv_path = _output_path(config, 'report.csv')
    with open(csv_path, 'w') as f:
        f.write(report_csv(cm))
    confusion_path = _output_path(config, 'confusion.csv')
    write_confusion_matrix(confusion_path, cm)

    map_patches = extract_patches(cube, labels, arch.patch_size, include_unlabeled=(config.map_mode == 'all'))
    predicted, _ = infer(params, map_patches.values)
    label_map = np.zeros((cube.rows, cube.cols), dtype=np.int64)
    label_map[map_patches.rows, map_patches.cols] = predicted
    map_stem = _output_path(config, 'map')
    write_raster(map_stem, label_map, 'uint16')
    png_path = _output_path(config, 'map.png')
    write_map_png(png_path, label_map)
    manifest.timings['eval_s'] = round(time.perf_counter() - started, 3)

    for name, path in (('report', report_path), ('report_csv', csv_path), ('confusion', confusion_path),
                       ('map', f"{map_stem}.raw"), ('map_png', png_path)):
        manifest.record_artifact(name, path)
    logger.info(f"OA={result.oa:.4f} AA={result.aa:.4f} Kappa={result.kappa:.4f}")


def parse_values(text: str, param: str) -> List[Any]:
    """
    Parse sweep values: a comma list ('1,2,3', 'full,no-fusion') or an
    inclusive range 'start:stop:step'.
    """
    if param == 'ablation':
        values = [v.strip() for v in text.split(',') if v.strip()] if text else list(VARIANTS)
        unknown = [v for v in values if v not in VARIANTS]
        if unknown:
            raise ConfigurationError(f"Unknown variants {unknown}, expected {sorted(VARIANTS)}")
        return values
    if not text:
        raise ConfigurationError(f"--values is required for --param {param}")
    try:
        if ':' in text:
            start, stop, step = (Decimal(part) for part in text.split(':'))
            if step <= 0:
                raise ConfigurationError(f"Range step must be positive, got {step}")
            decimals = []
            current = start
            while current <= stop:
                decimals.append(current)
                current += step
        else:
            decimals = [Decimal(v.strip()) for v in text.split(',') if v.strip()]
    except ArithmeticError:
        raise ConfigurationError(f"Cannot parse sweep values '{text}'")
    if param == 'K':
        return [int(d) for d in decimals]
    return [float(d) for d in decimals]


def cell_seed(base_seed: int, param: str, value: Any, repeat: int) -> int:
    """Seed of one sweep cell, derived from the cell's identity rather than its position."""
    key = zlib.crc32(f"{param}={value}".encode())
    return int(np.random.SeedSequence([base_seed, key, repeat]).generate_state(1)[0])


@dataclass
class CellResult:
    param: str
    value: Any
    repeat: int
    seed: int
    status: str
    oa: Optional[float] = None
    aa: Optional[float] = None
    kappa: Optional[float] = None
    error: Optional[str] = None


def run_cell(config: Config, param: str, value: Any, repeat: int, patches: PatchSet, classes: int) -> CellResult:
    """Train and score one sweep cell; failures are returned, not raised."""
    seed = cell_seed(config.seed, param, value, repeat)
    overrides: Dict[str, Any] = dict(config.as_dict())
    overrides[SWEEP_PARAMS[param]] = value
    overrides['seed'] = seed
    if param == 'ratio':
        overrides['train_per_class'] = None
    try:
        cell_config = Config(overrides=overrides)
        cell_config.validate_all()
        train_set, test_set = split(patches, cell_config.split_spec())
        result = train(train_set, cell_config.train_config(), classes=classes)
        cm = evaluate(result.params, test_set, workers=config.workers)
        scores = metrics(cm, skip_empty_rows=True)
        return CellResult(param, value, repeat, seed, 'ok', scores.oa, scores.aa, scores.kappa)
    except Exception as e:
        logger.error(f"Sweep cell {param}={value} (repeat {repeat}) failed: {e}")
        return CellResult(param, value, repeat, seed, 'failed', error=str(e))


def _summarize(cells: List[CellResult], value: Any) -> Dict[str, Optional[Tuple[float, float]]]:
    ok = [c for c in cells if c.value == value and c.status == 'ok']
    summary = {}
    for metric in ('oa', 'aa', 'kappa'):
        scores = [getattr(c, metric) * 100 for c in ok]
        summary[metric] = (float(np.mean(scores)), float(np.std(scores))) if scores else None
    return summary


def _format_score(score: Optional[Tuple[float, float]], repeats: int) -> str:
    if score is None:
        return 'failed'
    return f"{score[0]:.2f}" if repeats == 1 else f"{score[0]:.2f}±{score[1]:.2f}"


def format_sweep_table(param: str, values: List[Any], cells: List[CellResult], repeats: int) -> str:
    """
    Decoder-layer sweeps put one column per value with metric rows; other
    sweeps put one row per value. Ablation rows also show which modules are on.
    """
    summaries = {str(v): _summarize(cells, v) for v in values}
    metric_names = (('oa', 'OA (%)'), ('aa', 'AA (%)'), ('kappa', 'Kappa (%)'))
    if param == 'K':
        lines = [f"{'Number of decoder layers K':<28}" + ''.join(f"{str(v):>14}" for v in values)]
        for key, label in metric_names:
            lines.append(f"{label:<28}" + ''.join(f"{_format_score(summaries[str(v)][key], repeats):>14}"
                                                  for v in values))
        return '\n'.join(lines) + '\n'

    if param == 'ablation':
        header = f"{'Variant':<20}{'Decoder':>12}{'Fusion':>8}"
    else:
        header = f"{param:<20}"
    lines = [header + ''.join(f"{label:>16}" for _, label in metric_names)]
    for v in values:
        if param == 'ablation':
            fusion, decoder = VARIANTS[v]
            prefix = f"{v:<20}{decoder:>12}{'yes' if fusion else 'no':>8}"
        else:
            prefix = f"{str(v):<20}"
        lines.append(prefix + ''.join(f"{_format_score(summaries[str(v)][key], repeats):>16}"
                                      for key, _ in metric_names))
    return '\n'.join(lines) + '\n'


def cmd_sweep(config: Config, args: argparse.Namespace, manifest: RunManifest):
    """Train and score one model per (value, repeat) cell of a parameter grid."""
    config.validate_all()
    param = _require_argument(args, 'param')
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"--param must be one of {sorted(SWEEP_PARAMS)}, got '{param}'")
    values = parse_values(getattr(args, 'values', None), param)
    repeats = getattr(args, 'repeats', None) or 1
    if repeats < 1:
        raise ConfigurationError(f"--repeats must be >= 1, got {repeats}")

    cube, labels = _load_scene(args, manifest)
    patches = extract_patches(cube, labels, config.patch_size)
    cells: List[CellResult] = []
    started = time.perf_counter()
    for value in values:
        for repeat in range(repeats):
            logger.info("=" * 80)
            logger.info(f"Sweep cell {param}={value} repeat {repeat + 1}/{repeats}")
            logger.info("=" * 80)
            cells.append(run_cell(config, param, value, repeat, patches, labels.num_classes))
    manifest.timings['sweep_s'] = round(time.perf_counter() - started, 3)

    table_path = _output_path(config, 'sweep.txt')
    with open(table_path, 'w') as f:
        f.write(format_sweep_table(param, values, cells, repeats))
    csv_path = _output_path(config, 'sweep.csv')
    with open(csv_path, 'w') as f:
        f.write('param,value,repeat,seed,status,oa,aa,kappa,error\n')
        for c in cells:
            scores = ','.join('' if s is None else repr(s) for s in (c.oa, c.aa, c.kappa))
            error = (c.error or '').replace(',', ';').replace('\n', ' ')
            f.write(f"{c.param},{c.value},{c.repeat},{c.seed},{c.status},{scores},{error}\n")
    manifest.record_artifact('sweep_table', table_path)
    manifest.record_artifact('sweep_csv', csv_path)

    if param == 'lambda':
        curve_path = _output_path(config, 'lambda_oa.csv')
        with open(curve_path, 'w') as f:
            f.write('lambda,oa\n')
            for value in values:
                oa = _summarize(cells, value)['oa']
                f.write(f"{value},{'' if oa is None else repr(oa[0] / 100)}\n")
        manifest.record_artifact('lambda_curve', curve_path)

    failed = sum(1 for c in cells if c.status != 'ok')
    logger.info(f"Sweep finished: {len(cells) - failed} cells succeeded, {failed} failed")


def cmd_export_abundance(config: Config, args: argparse.Namespace, manifest: RunManifest):
    """Write per-endmember abundance maps of the whole cube and the decoder's endmember estimate."""
    checkpoint = _require_argument(args, 'checkpoint')
    cube_stem = _require_argument(args, 'cube')
    cube = load_cube(cube_stem)
    manifest.record_input('cube', raster_paths(cube_stem)[0])
    params = load_model(checkpoint, config.precision)
    manifest.record_input('checkpoint', f"{checkpoint}.bin")
    check_compatible(params, cube.bands, params.architecture.patch_size)

    abundances = infer_abundances(params, cube.reflectance)
    stem = _output_path(config, 'abundance')
    write_raster(stem, abundances, 'float32')
    endmember_path = _output_path(config, 'endmembers_estimate.txt')
    np.savetxt(endmember_path, estimated_endmembers(params), fmt='%.9e',
               header='rows: bands, columns: endmembers (linear decoder path)')
    manifest.record_artifact('abundance', f"{stem}.raw")
    manifest.record_artifact('endmembers_estimate', endmember_path)
    logger.info(f"Wrote {abundances.shape[0]} abundance maps to {stem}.raw")


def cmd_export_features(config: Config, args: argparse.Namespace, manifest: RunManifest):
    """Write one row per test sample: pixel index, true label and class features."""
    checkpoint = _require_argument(args, 'checkpoint')
    cube, labels = _load_scene(args, manifest)
    params = load_model(checkpoint, config.precision)
    manifest.record_input('checkpoint', f"{checkpoint}.bin")
    check_compatible(params, cube.bands, params.architecture.patch_size, labels.num_classes)
    patches = extract_patches(cube, labels, params.architecture.patch_size)
    if getattr(args, 'split', None):
        manifest.record_input('split', args.split)
        _, samples = _split_from_manifest(patches, args.split)
    else:
        samples = patches

    _, features = infer(params, samples.values)
    path = _output_path(config, 'features.txt')
    with open(path, 'w') as f:
        for pixel, label, row in zip(samples.pixel_indices, samples.labels, features):
            f.write(f"{int(pixel)} {int(label)} " + ' '.join(repr(float(x)) for x in row) + '\n')
    manifest.record_artifact('features', path)
    logger.info(f"Wrote features of {len(samples)} samples to {path}")


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'export-abundance': cmd_export_abundance,
    'export-features': cmd_export_features,
}
