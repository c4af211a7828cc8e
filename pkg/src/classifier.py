#!/usr/bin/env python3
"""
CNN classifier branch and subpixel fusion head.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from layers import (LayerParams, activate, batchnorm, concat, conv2d, flatten, init_conv,
                    init_linear, linear)
from tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

CONV1_CHANNELS = 64
CONV2_CHANNELS = 100
HIDDEN_UNITS = 100
MIN_PATCH_SIZE = 5


def classifier_flatten_size(patch_size: int) -> int:
    """Features after two valid 3x3 convolutions: 100 * (H - 4)^2."""
    return CONV2_CHANNELS * (patch_size - 4) ** 2


def fused_size(endmembers: int, classes: int, patch_size: int) -> int:
    """S = P_em * ceil(H/2)^2 + P_cls."""
    return endmembers * math.ceil(patch_size / 2) ** 2 + classes


@dataclass
class ClassifierParams:
    conv1: LayerParams
    conv2: LayerParams
    fc1: LayerParams
    fc2: LayerParams

    @property
    def classes(self) -> int:
        return self.fc2.out_channels

    def named_parameters(self, prefix: str = 'classifier') -> Dict[str, Tensor]:
        named = {}
        for name in ('conv1', 'conv2', 'fc1', 'fc2'):
            named.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return named


@dataclass
class FusionParams:
    """Stride-2 3x3 conv with BN over the abundance patch, then the output layer S -> P_cls."""

    conv: LayerParams
    out: LayerParams

    def named_parameters(self, prefix: str = 'fusion') -> Dict[str, Tensor]:
        named = self.conv.named_parameters(f"{prefix}.conv")
        named.update(self.out.named_parameters(f"{prefix}.out"))
        return named

    def named_buffers(self, prefix: str = 'fusion') -> Dict[str, np.ndarray]:
        return self.conv.named_buffers(f"{prefix}.conv")

    def parameter_count(self) -> int:
        return self.conv.parameter_count() + self.out.parameter_count()


def init_classifier(rng: np.random.Generator, bands: int, patch_size: int, classes: int,
                    precision: Optional[int] = None) -> ClassifierParams:
    if patch_size < MIN_PATCH_SIZE:
        raise DimensionError(f"classifier needs patches of at least {MIN_PATCH_SIZE}, got {patch_size}",
                             axis='patch', expected=MIN_PATCH_SIZE, actual=patch_size)
    return ClassifierParams(
        conv1=init_conv(rng, bands, CONV1_CHANNELS, 3, precision=precision),
        conv2=init_conv(rng, CONV1_CHANNELS, CONV2_CHANNELS, 3, precision=precision),
        fc1=init_linear(rng, classifier_flatten_size(patch_size), HIDDEN_UNITS, precision=precision),
        fc2=init_linear(rng, HIDDEN_UNITS, classes, precision=precision),
    )


def init_fusion(rng: np.random.Generator, endmembers: int, classes: int, patch_size: int,
                precision: Optional[int] = None) -> FusionParams:
    return FusionParams(
        conv=init_conv(rng, endmembers, endmembers, 3, batchnorm=True, precision=precision),
        out=init_linear(rng, fused_size(endmembers, classes, patch_size), classes, precision=precision),
    )


def classify_features(x: Tensor, params: ClassifierParams, mode: str = 'eval') -> Tensor:
    """
    Class features c [B, P_cls] for patches [B, L, H, H].

    The branch has no batch normalization, so mode does not change the output.

    Raises:
        DimensionError: If H < 5 or L disagrees with the first convolution
    """
    if x.ndim != 4 or x.shape[2] < MIN_PATCH_SIZE:
        raise DimensionError(f"classifier needs [B, L, H, H] patches with H >= {MIN_PATCH_SIZE}, got {x.shape}",
                             axis='patch', expected=MIN_PATCH_SIZE, actual=x.shape[2] if x.ndim == 4 else None)
    h = activate(conv2d(x, params.conv1, kernel=3), 'relu')
    h = activate(conv2d(h, params.conv2, kernel=3), 'relu')
    h = activate(linear(flatten(h), params.fc1), 'relu')
    return linear(h, params.fc2)


def fuse(v: Tensor, c: Tensor, params: FusionParams, mode: str) -> Tensor:
    """
    Joint representation s = [flatten(ReLU(BN(conv(v)))), c], abundance block first.
    """
    reduced = conv2d(v, params.conv, kernel=3, stride=2, padding=1)
    reduced = activate(batchnorm(reduced, params.conv, mode), 'relu')
    return concat([flatten(reduced), c], axis=1)


def predict(s: Tensor, params: FusionParams) -> Tensor:
    """Logits [B, P_cls] from the joint representation."""
    return linear(s, params.out)


def classifier_only_predict(c: Tensor) -> Tensor:
    """Logits when fusion is disabled: the class features themselves."""
    return c
