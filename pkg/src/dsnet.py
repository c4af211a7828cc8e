#!/usr/bin/env python3
"""
DSNet: the unmixing branch, the classifier branch and the fusion head as one model.

This module handles:
- Architecture description and model variants
- Parameter initialization and naming
- The joint forward pass and batched inference
- Conversion to and from checkpoints
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from classifier import (ClassifierParams, FusionParams, classifier_only_predict, classify_features,
                        fuse, init_classifier, init_fusion, predict)
from layers import LayerParams
from tensor import Tensor, TensorError, get_dtype, no_grad
from unmixing import (GeneralDecoderParams, UnmixEncoderParams, encode, endmember_estimate, init_decoder,
                      init_encoder, normalize_abundance, unmix_forward)

logger = logging.getLogger(__name__)

# name -> (fusion, decoder)
VARIANTS = {
    'full': (True, 'nonlinear'),
    'no-fusion': (False, 'nonlinear'),
    'linear': (True, 'linear'),
    'linear-no-fusion': (False, 'linear'),
}

FLATTEN_ORDER = 'channel-major'
INIT_STREAM = 0x1D5


@dataclass
class DSNetArchitecture:
    bands: int
    patch_size: int
    endmembers: int
    classes: int
    decoder_layers: int = 2
    fusion: bool = True
    decoder: str = 'nonlinear'
    relu_placement: str = 'table'

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> 'DSNetArchitecture':
        if variant not in VARIANTS:
            raise TensorError(f"Unknown variant '{variant}', expected one of {sorted(VARIANTS)}")
        fusion, decoder = VARIANTS[variant]
        return cls(fusion=fusion, decoder=decoder, **kwargs)

    @property
    def variant(self) -> str:
        for name, combo in VARIANTS.items():
            if combo == (self.fusion, self.decoder):
                return name
        raise TensorError(f"No variant for fusion={self.fusion}, decoder={self.decoder}")

    def to_metadata(self) -> Dict[str, str]:
        metadata = {key: str(value) for key, value in asdict(self).items()}
        metadata['flatten_order'] = FLATTEN_ORDER
        return metadata

    @classmethod
    def from_metadata(cls, metadata: Dict[str, str]) -> 'DSNetArchitecture':
        try:
            values = {}
            for f in fields(cls):
                raw = metadata[f.name]
                if f.type in (int, 'int'):
                    values[f.name] = int(raw)
                elif f.type in (bool, 'bool'):
                    values[f.name] = raw == 'True'
                else:
                    values[f.name] = raw
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"Checkpoint manifest has no usable architecture: {e}")
        if metadata.get('flatten_order', FLATTEN_ORDER) != FLATTEN_ORDER:
            raise CheckpointError(f"Unsupported flatten order '{metadata['flatten_order']}'")
        return cls(**values)


class DSNetOutput(NamedTuple):
    abundances: Tensor
    reconstruction: Tensor
    class_features: Tensor
    logits: Tensor


@dataclass
class DSNetParams:
    architecture: DSNetArchitecture
    encoder: UnmixEncoderParams
    decoder: GeneralDecoderParams
    classifier: ClassifierParams
    fusion: Optional[FusionParams] = None

    def named_parameters(self) -> Dict[str, Tensor]:
        named = self.encoder.named_parameters()
        named.update(self.decoder.named_parameters())
        named.update(self.classifier.named_parameters())
        if self.fusion is not None:
            named.update(self.fusion.named_parameters())
        return named

    def named_layers(self) -> Dict[str, LayerParams]:
        named = {f"unmixing.encoder.{name}": getattr(self.encoder, name) for name in ('block1', 'block2', 'block3')}
        named['unmixing.decoder.G'] = self.decoder.G
        if self.decoder.nonlinear:
            named['unmixing.decoder.nonlinear1'] = self.decoder.hidden
            named['unmixing.decoder.nonlinear2'] = self.decoder.output
        for name in ('conv1', 'conv2', 'fc1', 'fc2'):
            named[f"classifier.{name}"] = getattr(self.classifier, name)
        if self.fusion is not None:
            named['fusion.conv'] = self.fusion.conv
            named['fusion.out'] = self.fusion.out
        return named

    def batchnorm_layers(self) -> List[LayerParams]:
        return [layer for layer in self.named_layers().values() if layer.has_batchnorm]

    def named_buffers(self) -> Dict[str, np.ndarray]:
        named = self.encoder.named_buffers()
        if self.fusion is not None:
            named.update(self.fusion.named_buffers())
        return named

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.zero_grad()

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.named_parameters().items()}
        arrays.update(self.named_buffers())
        return arrays


def init_dsnet(architecture: DSNetArchitecture, seed: int, precision: Optional[int] = None) -> DSNetParams:
    """
    Initialize every parameter from a generator keyed on the seed.

    Raises:
        TensorError: If the architecture is inconsistent
    """
    arch = architecture
    if arch.endmembers < 2 or arch.classes < 2:
        raise TensorError(f"Need at least 2 endmembers and 2 classes, got {arch.endmembers} and {arch.classes}")
    rng = np.random.default_rng([seed, INIT_STREAM])
    params = DSNetParams(
        architecture=arch,
        encoder=init_encoder(rng, arch.bands, arch.endmembers, precision),
        decoder=init_decoder(rng, arch.endmembers, arch.bands, arch.decoder_layers,
                             nonlinear=(arch.decoder == 'nonlinear'),
                             relu_placement=arch.relu_placement, precision=precision),
        classifier=init_classifier(rng, arch.bands, arch.patch_size, arch.classes, precision),
    )
    if arch.fusion:
        params.fusion = init_fusion(rng, arch.endmembers, arch.classes, arch.patch_size, precision)
    logger.debug(f"Initialized DSNet variant '{arch.variant}' with {params.parameter_count()} parameters")
    return params


def forward(params: DSNetParams, x: Tensor, mode: str) -> DSNetOutput:
    """
    Run both branches on the same patch batch and combine them.

    Args:
        params: Model parameters
        x: Patches [B, L, H, H]
        mode: 'train' or 'eval' (batch-norm behaviour)

    Returns:
        DSNetOutput with abundances, reconstruction, class features and logits
    """
    v, x_hat = unmix_forward(x, params.encoder, params.decoder, mode)
    c = classify_features(x, params.classifier, mode)
    if params.fusion is None:
        logits = classifier_only_predict(c)
    else:
        logits = predict(fuse(v, c, params.fusion, mode), params.fusion)
    return DSNetOutput(v, x_hat, c, logits)


def infer(params: DSNetParams, patches: np.ndarray, batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predict classes for patches in eval mode without building a graph.

    Returns:
        Tuple of (predicted class ids 1..P_cls [N], class features [N, P_cls])
    """
    dtype = params.classifier.fc2.weight.dtype
    predictions: List[np.ndarray] = []
    features: List[np.ndarray] = []
    with no_grad():
        for start in range(0, patches.shape[0], batch_size):
            batch = Tensor(np.asarray(patches[start:start + batch_size], dtype=dtype))
            out = forward(params, batch, 'eval')
            predictions.append(np.argmax(out.logits.data, axis=1) + 1)
            features.append(out.class_features.data)
    if not predictions:
        return np.empty(0, dtype=np.int64), np.empty((0, params.architecture.classes), dtype=dtype)
    return np.concatenate(predictions).astype(np.int64), np.concatenate(features)


def infer_abundances(params: DSNetParams, cube: np.ndarray) -> np.ndarray:
    """Abundance maps [P, rows, cols] for a whole [L, rows, cols] cube."""
    dtype = params.classifier.fc2.weight.dtype
    with no_grad():
        v = normalize_abundance(encode(Tensor(np.asarray(cube, dtype=dtype)[None]), params.encoder, 'eval'))
    return v.data[0]


def estimated_endmembers(params: DSNetParams) -> np.ndarray:
    return endmember_estimate(params.decoder)


def save_model(stem: str, params: DSNetParams, extra_metadata: Optional[Dict[str, str]] = None):
    metadata = params.architecture.to_metadata()
    metadata.update(extra_metadata or {})
    save_checkpoint(stem, params.state_arrays(), metadata)


def load_model(stem: str, precision: Optional[int] = None) -> DSNetParams:
    """
    Rebuild a model from a checkpoint.

    Raises:
        CheckpointError: If the checkpoint lacks an array the architecture needs
            or an array has the wrong shape, or a layer fails validation
            (for example a running variance that is not positive)
    """
    arrays, metadata = load_checkpoint(stem)
    architecture = DSNetArchitecture.from_metadata(metadata)
    params = init_dsnet(architecture, seed=0, precision=precision)
    dtype = get_dtype(precision)

    expected = params.named_parameters()
    buffers = params.named_buffers()
    missing = sorted((set(expected) | set(buffers)) - set(arrays))
    if missing:
        raise CheckpointError(f"Checkpoint {stem} is missing arrays: {missing}")
    unexpected = sorted(set(arrays) - set(expected) - set(buffers))
    if unexpected:
        raise CheckpointError(f"Checkpoint {stem} has arrays the architecture does not use: {unexpected}")

    for name, tensor in expected.items():
        if arrays[name].shape != tensor.shape:
            raise CheckpointError(f"'{name}' has shape {arrays[name].shape}, expected {tensor.shape}")
        tensor.data[...] = arrays[name].astype(dtype)
    for name, buffer in buffers.items():
        if arrays[name].shape != buffer.shape:
            raise CheckpointError(f"'{name}' has shape {arrays[name].shape}, expected {buffer.shape}")
        buffer[...] = arrays[name].astype(dtype)
    for name, layer in params.named_layers().items():
        try:
            layer.validate()
        except TensorError as e:
            raise CheckpointError(f"Checkpoint {stem} has an invalid layer '{name}': {e}")
    logger.info(f"Loaded DSNet variant '{architecture.variant}' from {stem}")
    return params


def check_compatible(params: DSNetParams, bands: int, patch_size: int, classes: Optional[int] = None):
    """
    Raises:
        CheckpointError: If the model was built for different data
    """
    arch = params.architecture
    if arch.bands != bands:
        raise CheckpointError(f"Checkpoint expects {arch.bands} bands, data has {bands}")
    if arch.patch_size != patch_size:
        raise CheckpointError(f"Checkpoint expects {arch.patch_size}x{arch.patch_size} patches, got {patch_size}")
    if classes is not None and classes > arch.classes:
        raise CheckpointError(f"Checkpoint predicts {arch.classes} classes, labels go up to {classes}")
