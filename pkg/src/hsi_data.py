#!/usr/bin/env python3
"""
Hyperspectral scene data.

This module handles:
- Synthetic scenes under the linear and bilinear mixing models
- Loading and saving cubes and label rasters
- Patch extraction around labeled pixels
- Stratified train/test splitting and split manifests
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from raster_io import DataError, read_raster, write_raster

logger = logging.getLogger(__name__)

MIN_ENDMEMBER_ANGLE = 0.05
SIMPLEX_TOLERANCE = 1e-6


class DegenerateEndmemberError(DataError):
    """Exception raised when two endmember spectra are nearly parallel."""
    pass


class UnsatisfiableSplitError(DataError):
    """Exception raised when a split asks for more samples than a class has."""
    pass


@dataclass
class SpectralCube:
    """Reflectance array of shape [bands, rows, cols]."""

    reflectance: np.ndarray

    @property
    def bands(self) -> int:
        return self.reflectance.shape[0]

    @property
    def rows(self) -> int:
        return self.reflectance.shape[1]

    @property
    def cols(self) -> int:
        return self.reflectance.shape[2]

    def validate(self):
        if self.reflectance.ndim != 3:
            raise DataError(f"Cube must be [bands, rows, cols], got shape {self.reflectance.shape}")
        if self.bands < 2:
            raise DataError(f"Cube needs at least 2 bands, got {self.bands}")
        bad = ~np.isfinite(self.reflectance)
        if bad.any():
            band, row, col = (int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"Cube has a non-finite value at band {band}, row {row}, col {col}")


@dataclass
class LabelRaster:
    """Per-pixel class ids: 0 is unlabeled, 1..num_classes are classes."""

    labels: np.ndarray

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def validate(self, cube: Optional[SpectralCube] = None, require_all_classes: bool = False):
        if self.labels.ndim != 2:
            raise DataError(f"Label raster must be [rows, cols], got shape {self.labels.shape}")
        if self.labels.min() < 0:
            raise DataError("Label raster contains negative class ids")
        if cube is not None and (cube.rows, cube.cols) != self.labels.shape:
            raise DataError(
                f"Label raster is {self.rows}x{self.cols} but the cube is {cube.rows}x{cube.cols}")
        if require_all_classes:
            present = set(np.unique(self.labels).tolist()) - {0}
            missing = sorted(set(range(1, self.num_classes + 1)) - present)
            if missing:
                raise DataError(f"Classes {missing} have no labeled pixels")


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene."""

    bands: int = 32
    endmember_count: int = 5
    rows: int = 64
    cols: int = 64
    abundance_smoothness: float = 1.5
    nonlinear_strength: float = 0.3
    snr_db: float = 30.0
    dirichlet_alpha: float = 0.1
    min_purity: Optional[float] = None
    endmembers: Optional[np.ndarray] = None

    def validate(self):
        if self.bands < 2:
            raise DataError(f"Scene needs at least 2 bands, got {self.bands}")
        if self.endmember_count < 2:
            raise DataError(f"Scene needs at least 2 endmembers, got {self.endmember_count}")
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"Scene size must be positive, got {self.rows}x{self.cols}")
        if self.abundance_smoothness <= 0:
            raise DataError(f"abundance_smoothness must be positive, got {self.abundance_smoothness}")
        if self.nonlinear_strength < 0:
            raise DataError(f"nonlinear_strength must be >= 0, got {self.nonlinear_strength}")
        if self.dirichlet_alpha <= 0:
            raise DataError(f"dirichlet_alpha must be positive, got {self.dirichlet_alpha}")
        if self.min_purity is not None and not 0.0 <= self.min_purity <= 1.0:
            raise DataError(f"min_purity must lie in [0, 1], got {self.min_purity}")
        if self.endmembers is not None:
            if self.endmembers.shape != (self.bands, self.endmember_count):
                raise DataError(
                    f"endmembers must be [{self.bands}, {self.endmember_count}], got {self.endmembers.shape}")
            check_endmembers(self.endmembers)


@dataclass
class GroundTruthScene:
    """A synthetic cube with the abundances, endmembers and noise that produced it."""

    cube: SpectralCube
    abundances: np.ndarray
    labels: LabelRaster
    endmembers: np.ndarray
    noise: np.ndarray


@dataclass
class Patch:
    """An [L, H, H] window centered on a labeled pixel."""

    values: np.ndarray
    center_row: int
    center_col: int
    label: int


@dataclass
class PatchSet:
    """
    Patches stacked for batching: values [N, L, H, H] with per-patch labels and centers.

    Indexing yields Patch objects, so a PatchSet is a sequence of patches.
    """

    values: np.ndarray
    labels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    scene_cols: int

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> Patch:
        return Patch(self.values[i], int(self.rows[i]), int(self.cols[i]), int(self.labels[i]))

    def __iter__(self) -> Iterator[Patch]:
        for i in range(len(self)):
            yield self[i]

    @property
    def patch_size(self) -> int:
        return int(self.values.shape[-1])

    @property
    def bands(self) -> int:
        return int(self.values.shape[1])

    @property
    def pixel_indices(self) -> np.ndarray:
        return self.rows * self.scene_cols + self.cols

    def subset(self, indices: Sequence[int]) -> 'PatchSet':
        indices = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.values[indices], self.labels[indices], self.rows[indices],
                        self.cols[indices], self.scene_cols)


@dataclass
class SplitSpec:
    """
    How many training samples to draw per class.

    Exactly one of train_per_class (same count for every class), per_class
    (class id -> count) or ratio (fraction of each class) must be set.
    """

    train_per_class: Optional[int] = None
    per_class: Optional[Dict[int, int]] = None
    ratio: Optional[float] = None
    seed: int = 0

    def validate(self):
        chosen = [x is not None for x in (self.train_per_class, self.per_class, self.ratio)]
        if sum(chosen) != 1:
            raise DataError("SplitSpec needs exactly one of train_per_class, per_class or ratio")
        if self.ratio is not None and not 0.0 <= self.ratio <= 1.0:
            raise DataError(f"Split ratio must lie in [0, 1], got {self.ratio}")
        if self.train_per_class is not None and self.train_per_class < 0:
            raise DataError(f"train_per_class must be >= 0, got {self.train_per_class}")

    def train_count(self, class_id: int, available: int) -> int:
        if self.ratio is not None:
            return int(round(self.ratio * available))
        if self.per_class is not None:
            return int(self.per_class.get(class_id, 0))
        return int(self.train_per_class)


def spectral_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angles between the columns of a and b, in radians."""
    cos = (a.T @ b) / np.outer(np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def check_endmembers(endmembers: np.ndarray, min_angle: float = MIN_ENDMEMBER_ANGLE):
    """
    Reject endmember matrices with negative entries or nearly parallel columns.

    Raises:
        DegenerateEndmemberError: If two columns are closer than min_angle radians
    """
    if np.any(endmembers < 0):
        raise DegenerateEndmemberError("Endmember spectra must be nonnegative")
    if np.any(np.linalg.norm(endmembers, axis=0) == 0):
        raise DegenerateEndmemberError("Endmember spectra must be nonzero")
    angles = spectral_angles(endmembers, endmembers)
    count = endmembers.shape[1]
    for p in range(count):
        for q in range(p + 1, count):
            if angles[p, q] < min_angle:
                raise DegenerateEndmemberError(
                    f"Endmembers {p} and {q} are {angles[p, q]:.4f} rad apart, minimum is {min_angle}")


def default_endmembers(bands: int, count: int, rng: np.random.Generator, max_attempts: int = 100) -> np.ndarray:
    """
    Draw smooth, pairwise-distinct reflectance spectra in [0.05, 0.95].

    Each spectrum is a sum of three Gaussian absorption/reflection bumps over a
    random baseline.
    """
    grid = np.linspace(0.0, 1.0, bands)
    for _ in range(max_attempts):
        spectra = np.empty((bands, count))
        for p in range(count):
            curve = np.full(bands, rng.uniform(0.2, 0.6))
            for _ in range(3):
                center, width, height = rng.uniform(0, 1), rng.uniform(0.05, 0.25), rng.uniform(-0.4, 0.4)
                curve += height * np.exp(-0.5 * ((grid - center) / width) ** 2)
            low, high = curve.min(), curve.max()
            spectra[:, p] = 0.05 + 0.9 * (curve - low) / (high - low) if high > low else 0.5
        try:
            check_endmembers(spectra)
            return spectra
        except DegenerateEndmemberError:
            continue
    raise DegenerateEndmemberError(f"Could not draw {count} distinct endmembers in {max_attempts} attempts")


def project_to_simplex(values: np.ndarray) -> np.ndarray:
    """Euclidean projection of every vector along axis 0 onto the probability simplex."""
    count = values.shape[0]
    flat = values.reshape(count, -1).T
    ordered = -np.sort(-flat, axis=1)
    thresholds = (np.cumsum(ordered, axis=1) - 1.0) / np.arange(1, count + 1)
    support = np.sum(ordered > thresholds, axis=1)
    theta = thresholds[np.arange(flat.shape[0]), support - 1]
    projected = np.maximum(flat - theta[:, None], 0.0)
    return projected.T.reshape(values.shape)


def smooth_abundances(draws: np.ndarray, width: float) -> np.ndarray:
    """
    Turn per-pixel simplex draws [P, rows, cols] into spatially coherent abundance fields.

    The Gaussian blur (sigma = width pixels) averages every pixel toward the
    uniform mixture 1/P. Deviations from 1/P are scaled back up to the spread
    of the raw draws, then each pixel is projected onto the simplex. The result
    has blob-shaped regions about width pixels across, pure cores and mixed
    borders.
    """
    blurred = gaussian_filter(draws, sigma=(0, width, width), mode='reflect')
    center = 1.0 / draws.shape[0]
    spread, blurred_spread = np.std(draws), np.std(blurred)
    if blurred_spread > 0:
        blurred = center + (blurred - center) * (spread / blurred_spread)
    return project_to_simplex(blurred)


def linear_mixture(endmembers: np.ndarray, abundances: np.ndarray) -> np.ndarray:
    """Spectra M a for abundances [P, rows, cols] -> [L, rows, cols]."""
    return np.tensordot(endmembers, abundances, axes=(1, 0))


def bilinear_interaction(endmembers: np.ndarray, abundances: np.ndarray) -> np.ndarray:
    """Sum over p < q of a_p a_q (m_p * m_q), shape [L, rows, cols]."""
    bands = endmembers.shape[0]
    out = np.zeros((bands,) + abundances.shape[1:])
    count = endmembers.shape[1]
    for p in range(count):
        for q in range(p + 1, count):
            out += (endmembers[:, p] * endmembers[:, q])[:, None, None] * (abundances[p] * abundances[q])[None]
    return out


def synthesize_spectra(endmembers: np.ndarray, abundances: np.ndarray, nonlinear_strength: float,
                       snr_db: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mix abundances into spectra and add white Gaussian noise.

    The noise realization is rescaled so the empirical scene SNR equals snr_db
    exactly; an infinite snr_db adds no noise.

    Returns:
        Tuple of (noisy spectra, noise), both [L, rows, cols]
    """
    clean = linear_mixture(endmembers, abundances)
    if nonlinear_strength:
        clean = clean + nonlinear_strength * bilinear_interaction(endmembers, abundances)
    if np.isinf(snr_db):
        return clean, np.zeros_like(clean)
    noise = rng.standard_normal(clean.shape)
    target_power = np.mean(clean ** 2) / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(target_power / np.mean(noise ** 2))
    return clean + noise, noise


def generate_scene(spec: SceneSpec, seed: int) -> GroundTruthScene:
    """
    Generate a synthetic scene.

    Abundances are drawn per pixel from a symmetric Dirichlet, blurred spatially
    with a Gaussian of width spec.abundance_smoothness and projected back onto
    the simplex (see smooth_abundances). Labels are the per-pixel argmax
    abundance (1-based); with
    spec.min_purity set, pixels whose largest abundance falls below it stay 0.

    Args:
        spec: Scene parameters
        seed: Random seed

    Returns:
        GroundTruthScene generated at 64-bit precision

    Raises:
        DataError: If the scene settings are invalid
        DegenerateEndmemberError: If endmember columns are nearly parallel
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    endmembers = spec.endmembers if spec.endmembers is not None else default_endmembers(
        spec.bands, spec.endmember_count, rng)
    endmembers = np.asarray(endmembers, dtype=np.float64)

    draws = rng.dirichlet(np.full(spec.endmember_count, spec.dirichlet_alpha), size=(spec.rows, spec.cols))
    abundances = smooth_abundances(np.moveaxis(draws, -1, 0), spec.abundance_smoothness)

    spectra, noise = synthesize_spectra(endmembers, abundances, spec.nonlinear_strength, spec.snr_db, rng)

    labels = np.argmax(abundances, axis=0).astype(np.int64) + 1
    if spec.min_purity is not None:
        labels[abundances.max(axis=0) < spec.min_purity] = 0

    logger.info(f"Generated {spec.rows}x{spec.cols} scene with {spec.bands} bands and "
                f"{spec.endmember_count} endmembers (b={spec.nonlinear_strength}, snr={spec.snr_db} dB)")
    return GroundTruthScene(
        cube=SpectralCube(spectra),
        abundances=abundances,
        labels=LabelRaster(labels),
        endmembers=endmembers,
        noise=noise,
    )


def extract_patches(cube: SpectralCube, labels: LabelRaster, patch_size: int,
                    include_unlabeled: bool = False) -> PatchSet:
    """
    Cut one [L, H, H] patch per labeled pixel, in row-major order.

    Borders are handled by mirror-padding the cube, so every patch's center
    value equals the cube value at its pixel.

    Args:
        cube: Spectral cube
        labels: Label raster of the same spatial size
        patch_size: Odd window size H
        include_unlabeled: Also cut patches around label-0 pixels (for full-scene maps)

    Returns:
        PatchSet, empty when no pixel qualifies

    Raises:
        DataError: If H is even or larger than the scene
    """
    if patch_size < 1 or patch_size % 2 == 0:
        raise DataError(f"Patch size must be odd, got {patch_size}")
    if patch_size > min(cube.rows, cube.cols):
        raise DataError(f"Patch size {patch_size} exceeds scene size {cube.rows}x{cube.cols}")
    labels.validate(cube)

    mask = np.ones_like(labels.labels, dtype=bool) if include_unlabeled else labels.labels > 0
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        logger.warning("No labeled pixels to extract patches from")
        return PatchSet(np.empty((0, cube.bands, patch_size, patch_size), dtype=cube.reflectance.dtype),
                        np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                        np.empty(0, dtype=np.int64), cube.cols)

    half = patch_size // 2
    padded = np.pad(cube.reflectance, ((0, 0), (half, half), (half, half)), mode='reflect')
    windows = np.lib.stride_tricks.sliding_window_view(padded, (patch_size, patch_size), axis=(1, 2))
    values = np.ascontiguousarray(np.moveaxis(windows[:, rows, cols], 0, 1))
    return PatchSet(values, labels.labels[rows, cols].astype(np.int64), rows.astype(np.int64),
                    cols.astype(np.int64), cube.cols)


def split(patches: PatchSet, spec: SplitSpec) -> Tuple[PatchSet, PatchSet]:
    """
    Stratified train/test split without replacement.

    Each class draws from its own generator seeded by (spec.seed, class id), so
    the split of one class does not depend on the others.

    Returns:
        Tuple of (train set, test set), each in the original patch order

    Raises:
        UnsatisfiableSplitError: If a class has fewer samples than requested
    """
    spec.validate()
    train_indices: List[np.ndarray] = []
    classes = np.unique(patches.labels)
    if spec.per_class:
        absent = sorted(c for c, n in spec.per_class.items() if n > 0 and c not in set(classes.tolist()))
        if absent:
            raise UnsatisfiableSplitError(f"Split requests training samples for absent classes {absent}")
    for class_id in classes:
        members = np.flatnonzero(patches.labels == class_id)
        wanted = spec.train_count(int(class_id), members.size)
        if wanted > members.size:
            raise UnsatisfiableSplitError(
                f"Class {class_id} has {members.size} labeled pixels, {wanted} training samples requested")
        rng = np.random.default_rng([spec.seed, int(class_id)])
        chosen = rng.choice(members.size, size=wanted, replace=False)
        train_indices.append(members[chosen])

    train_mask = np.zeros(len(patches), dtype=bool)
    if train_indices:
        train_mask[np.concatenate(train_indices)] = True
    train, test = patches.subset(np.flatnonzero(train_mask)), patches.subset(np.flatnonzero(~train_mask))
    logger.info(f"Split {len(patches)} patches into {len(train)} train / {len(test)} test")
    return train, test


def class_counts(patches: PatchSet) -> Dict[int, int]:
    classes, counts = np.unique(patches.labels, return_counts=True)
    return {int(c): int(n) for c, n in zip(classes, counts)}


def write_split_manifest(path: str, train: PatchSet, test: PatchSet):
    """
    Write the split as text, one line per (subset, class):
    '<train|test> <class id> <pixel index> <pixel index> ...'.
    """
    with open(path, 'w') as f:
        f.write(f"# scene_cols={train.scene_cols if len(train) else test.scene_cols}\n")
        for subset_name, subset in (('train', train), ('test', test)):
            indices = subset.pixel_indices
            for class_id in sorted(set(subset.labels.tolist())):
                members = indices[subset.labels == class_id]
                f.write(f"{subset_name} {class_id} " + ' '.join(str(int(i)) for i in members) + '\n')
    logger.debug(f"Wrote split manifest to {path}")


def read_split_manifest(path: str) -> Dict[str, Dict[int, np.ndarray]]:
    """Read a split manifest back as {'train': {class: pixel indices}, 'test': {...}}."""
    result: Dict[str, Dict[int, np.ndarray]] = {'train': {}, 'test': {}}
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            fields = line.split()
            if len(fields) < 2 or fields[0] not in result:
                raise DataError(f"{path}:{line_number}: malformed split line")
            result[fields[0]][int(fields[1])] = np.array([int(x) for x in fields[2:]], dtype=np.int64)
    return result


def select_pixels(patches: PatchSet, pixel_indices: np.ndarray) -> PatchSet:
    """Subset of patches whose center pixel index is listed, in patch order."""
    wanted = np.isin(patches.pixel_indices, pixel_indices)
    return patches.subset(np.flatnonzero(wanted))


def save_cube(stem: str, cube: SpectralCube):
    cube.validate()
    write_raster(stem, cube.reflectance, 'float32')


def load_cube(stem: str) -> SpectralCube:
    cube = SpectralCube(read_raster(stem, expected_dtype='float32'))
    cube.validate()
    return cube


def save_labels(stem: str, labels: LabelRaster):
    labels.validate()
    if labels.labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise DataError("Class ids exceed the uint16 range")
    write_raster(stem, labels.labels, 'uint16')


def load_labels(stem: str) -> LabelRaster:
    data = read_raster(stem, expected_dtype='uint16')
    if data.shape[0] != 1:
        raise DataError(f"Label raster must have a single band, got {data.shape[0]}")
    return LabelRaster(data[0].astype(np.int64))
