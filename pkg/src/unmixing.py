#!/usr/bin/env python3
"""
Autoencoder unmixing branch.

The encoder maps each pixel spectrum (three 1x1 convolution blocks) to raw
codes, which are rectified and sum-normalized into abundances. The general
mixing decoder maps abundances back to spectra through a single weight
matrix G split into K chunks: a linear path sums the chunks, a nonlinear
path passes all of them through two sigmoid 1x1 convolutions.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from layers import LayerParams, activate, batchnorm, conv2d, init_conv
from tensor import DimensionError, Tensor, TensorError

logger = logging.getLogger(__name__)

ABUNDANCE_EPSILON = 1e-8
MAX_DECODER_LAYERS = 5
RELU_PLACEMENTS = ('table', 'equation')


def encoder_channels(bands: int, endmembers: int) -> Tuple[int, int, int]:
    """Output channels of the three encoder blocks: L/2, L/4, P (floor, at least 1)."""
    return max(1, bands // 2), max(1, bands // 4), endmembers


@dataclass
class UnmixEncoderParams:
    block1: LayerParams
    block2: LayerParams
    block3: LayerParams

    @property
    def bands(self) -> int:
        return self.block1.weight.shape[1]

    @property
    def endmembers(self) -> int:
        return self.block3.out_channels

    def named_parameters(self, prefix: str = 'unmixing.encoder') -> Dict[str, Tensor]:
        named = {}
        for name in ('block1', 'block2', 'block3'):
            named.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return named

    def named_buffers(self, prefix: str = 'unmixing.encoder') -> Dict[str, np.ndarray]:
        named = {}
        for name in ('block1', 'block2', 'block3'):
            named.update(getattr(self, name).named_buffers(f"{prefix}.{name}"))
        return named


@dataclass
class GeneralDecoderParams:
    """
    Decoder weights.

    G has K*L output channels, read as K contiguous chunks of L. The nonlinear
    path (hidden: LK -> L, output: L -> L, both with bias) is absent in the
    linear-only variant.
    """

    G: LayerParams
    layers: int
    bands: int
    hidden: Optional[LayerParams] = None
    output: Optional[LayerParams] = None
    relu_placement: str = 'table'

    @property
    def nonlinear(self) -> bool:
        return self.hidden is not None

    @property
    def endmembers(self) -> int:
        return self.G.weight.shape[1]

    def validate(self):
        if not 1 <= self.layers <= MAX_DECODER_LAYERS:
            raise TensorError(f"Decoder layer count must lie in [1, {MAX_DECODER_LAYERS}], got {self.layers}")
        if self.relu_placement not in RELU_PLACEMENTS:
            raise TensorError(f"relu_placement must be one of {RELU_PLACEMENTS}, got '{self.relu_placement}'")
        if self.G.out_channels != self.layers * self.bands:
            raise DimensionError(
                f"G has {self.G.out_channels} output channels, expected {self.layers} chunks of {self.bands}",
                axis='chunks', expected=self.layers * self.bands, actual=self.G.out_channels)
        if self.G.bias is not None:
            raise TensorError("G carries no bias")

    def named_parameters(self, prefix: str = 'unmixing.decoder') -> Dict[str, Tensor]:
        named = self.G.named_parameters(f"{prefix}.G")
        if self.nonlinear:
            named.update(self.hidden.named_parameters(f"{prefix}.nonlinear1"))
            named.update(self.output.named_parameters(f"{prefix}.nonlinear2"))
        return named


def init_encoder(rng: np.random.Generator, bands: int, endmembers: int,
                 precision: Optional[int] = None) -> UnmixEncoderParams:
    c1, c2, c3 = encoder_channels(bands, endmembers)
    return UnmixEncoderParams(
        block1=init_conv(rng, bands, c1, 1, batchnorm=True, precision=precision),
        block2=init_conv(rng, c1, c2, 1, batchnorm=True, precision=precision),
        block3=init_conv(rng, c2, c3, 1, precision=precision),
    )


def init_decoder(rng: np.random.Generator, endmembers: int, bands: int, layers: int,
                 nonlinear: bool = True, relu_placement: str = 'table',
                 precision: Optional[int] = None) -> GeneralDecoderParams:
    """
    Create decoder weights. G starts nonnegative; it is not constrained afterwards.

    Raises:
        TensorError: If layers lies outside [1, MAX_DECODER_LAYERS]
    """
    if not 1 <= layers <= MAX_DECODER_LAYERS:
        raise TensorError(f"Decoder layer count must lie in [1, {MAX_DECODER_LAYERS}], got {layers}")
    G = init_conv(rng, endmembers, layers * bands, 1, bias=False, precision=precision)
    np.abs(G.weight.data, out=G.weight.data)
    params = GeneralDecoderParams(G=G, layers=layers, bands=bands, relu_placement=relu_placement)
    if nonlinear:
        params.hidden = init_conv(rng, layers * bands, bands, 1, precision=precision)
        params.output = init_conv(rng, bands, bands, 1, precision=precision)
    params.validate()
    return params


def encode(x: Tensor, params: UnmixEncoderParams, mode: str) -> Tensor:
    """
    Raw abundance codes [B, P, H, W] for spectra [B, L, H, W].

    Blocks 1 and 2 are conv -> BN -> ReLU; block 3 is a bare convolution.

    Raises:
        DimensionError: If L disagrees with the encoder
    """
    h = activate(batchnorm(conv2d(x, params.block1), params.block1, mode), 'relu')
    h = activate(batchnorm(conv2d(h, params.block2), params.block2, mode), 'relu')
    return conv2d(h, params.block3)


def normalize_abundance(codes: Tensor, epsilon: float = ABUNDANCE_EPSILON) -> Tensor:
    """
    Map raw codes onto the probability simplex along the channel axis.

    Each entry becomes (|h_p| + eps) / sum_q (|h_q| + eps): nonnegative, unit
    sum to rounding, uniform for an all-zero code.

    Entries are first divided by their pixel's largest entry, held constant,
    so the sum cannot overflow near the top of the float range. The ratio is
    scale-free, so values and gradients are unchanged.
    """
    rectified = codes.abs() + epsilon
    rectified = rectified / rectified.data.max(axis=1, keepdims=True)
    return rectified / rectified.sum(axis=1, keepdims=True)


def _chunk_sum(z: Tensor, layers: int, bands: int) -> Tensor:
    batch, _, height, width = z.shape
    return z.reshape(batch, layers, bands, height, width).sum(axis=1)


def linear_path(v: Tensor, params: GeneralDecoderParams) -> Tuple[Tensor, Tensor]:
    """
    Returns:
        Tuple of (linear reconstruction [B, L, H, W], rectified mixing z [B, LK, H, W])
    """
    params.validate()
    if v.shape[1] != params.endmembers:
        raise DimensionError(f"decoder expects {params.endmembers} abundance channels, got {v.shape[1]}",
                             axis='endmembers', expected=params.endmembers, actual=v.shape[1])
    mixed = conv2d(v, params.G)
    z = mixed.relu()
    source = z if params.relu_placement == 'table' else mixed
    return _chunk_sum(source, params.layers, params.bands), z


def nonlinear_path(z: Tensor, params: GeneralDecoderParams) -> Tensor:
    hidden = activate(conv2d(z, params.hidden), 'sigmoid')
    return activate(conv2d(hidden, params.output), 'sigmoid')


def decode(v: Tensor, params: GeneralDecoderParams) -> Tensor:
    """
    Reconstruct spectra [B, L, H, W] from abundances [B, P, H, W].

    Raises:
        DimensionError: If P disagrees with G or G is not K chunks of L channels
    """
    linear, z = linear_path(v, params)
    if not params.nonlinear:
        return linear
    return linear + nonlinear_path(z, params)


def unmix_forward(x: Tensor, encoder: UnmixEncoderParams, decoder: GeneralDecoderParams,
                  mode: str) -> Tuple[Tensor, Tensor]:
    """
    Returns:
        Tuple of (abundances v, reconstruction x_hat)
    """
    v = normalize_abundance(encode(x, encoder, mode))
    return v, decode(v, decoder)


def endmember_estimate(params: GeneralDecoderParams) -> np.ndarray:
    """
    Spectra [L, P] the linear path produces for each one-hot abundance.
    """
    weight = params.G.weight.data.reshape(params.layers, params.bands, params.endmembers)
    if params.relu_placement == 'table':
        weight = np.maximum(weight, 0)
    return weight.sum(axis=0)
