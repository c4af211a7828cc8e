#!/usr/bin/env python3
"""
Layer vocabulary of the network: 1x1/3x3 convolution, linear, ReLU/sigmoid,
batch normalization, flatten, concatenation and split.

Shape problems are reported as DimensionError naming the offending axis.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from tensor import (BatchNorm2d, Conv2d, DimensionError, Tensor, TensorError,
                    concat as _concat, conv_output_size, get_dtype)

logger = logging.getLogger(__name__)

SUPPORTED_KERNELS = (1, 3)
SUPPORTED_STRIDES = (1, 2)
SUPPORTED_PADDINGS = (0, 1)

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


@dataclass
class LayerParams:
    """Weights of one layer, plus batch-norm state when the layer normalizes."""

    weight: Tensor
    bias: Optional[Tensor] = None
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def has_batchnorm(self) -> bool:
        return self.gamma is not None

    def validate(self):
        """
        Check the per-channel vectors agree with the output channel count.

        Raises:
            DimensionError: If a vector has the wrong length
            TensorError: If running_var is not strictly positive
        """
        for name in ('bias', 'gamma', 'beta'):
            vector = getattr(self, name)
            if vector is not None and vector.shape != (self.out_channels,):
                raise DimensionError(
                    f"{name} has shape {vector.shape}, expected ({self.out_channels},)",
                    axis='out_channels', expected=self.out_channels, actual=vector.shape[0])
        if self.running_var is not None and not np.all(self.running_var > 0):
            raise TensorError("running_var must be strictly positive")
        if not 0.0 < self.momentum < 1.0:
            raise TensorError(f"momentum must lie in (0, 1), got {self.momentum}")

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        named = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            named[f"{prefix}.bias"] = self.bias
        if self.gamma is not None:
            named[f"{prefix}.bn_gamma"] = self.gamma
            named[f"{prefix}.bn_beta"] = self.beta
        return named

    def named_buffers(self, prefix: str) -> Dict[str, np.ndarray]:
        if self.running_mean is None:
            return {}
        return {
            f"{prefix}.bn_running_mean": self.running_mean,
            f"{prefix}.bn_running_var": self.running_var,
        }

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters('').values())


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
              bias: bool = True, batchnorm: bool = False, precision: Optional[int] = None) -> LayerParams:
    """
    Create a convolution layer with weights uniform in +-1/sqrt(fan_in).

    Args:
        rng: Random generator
        c_in: Input channels
        c_out: Output channels
        kernel: Kernel size (1 or 3)
        bias: Whether the layer carries a bias
        batchnorm: Whether the layer is followed by batch normalization
        precision: 32 or 64, defaults to the engine default

    Returns:
        LayerParams with tracked tensors
    """
    dtype = get_dtype(precision)
    fan_in = c_in * kernel * kernel
    params = LayerParams(
        weight=Tensor(_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype), requires_grad=True),
        bias=Tensor(_uniform(rng, (c_out,), fan_in, dtype), requires_grad=True) if bias else None,
    )
    if batchnorm:
        params.gamma = Tensor(np.ones(c_out, dtype=dtype), requires_grad=True)
        params.beta = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        params.running_mean = np.zeros(c_out, dtype=dtype)
        params.running_var = np.ones(c_out, dtype=dtype)
    return params


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
                precision: Optional[int] = None) -> LayerParams:
    """Create a linear layer with weight [d_out, d_in]."""
    dtype = get_dtype(precision)
    return LayerParams(
        weight=Tensor(_uniform(rng, (d_out, d_in), d_in, dtype), requires_grad=True),
        bias=Tensor(_uniform(rng, (d_out,), d_in, dtype), requires_grad=True) if bias else None,
    )


def conv2d(input: Tensor, params: LayerParams, kernel: int = 1, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Convolve [B, Cin, H, W] with the layer's [Cout, Cin, k, k] weights, then add the bias.

    Raises:
        TensorError: If kernel, stride or padding is outside the supported sets
        DimensionError: If the input is not 4-D, Cin disagrees with the weight,
            or the output would be empty
    """
    if kernel not in SUPPORTED_KERNELS:
        raise TensorError(f"kernel must be one of {SUPPORTED_KERNELS}, got {kernel}")
    if stride not in SUPPORTED_STRIDES:
        raise TensorError(f"stride must be one of {SUPPORTED_STRIDES}, got {stride}")
    if padding not in SUPPORTED_PADDINGS:
        raise TensorError(f"padding must be one of {SUPPORTED_PADDINGS}, got {padding}")
    if input.ndim != 4:
        raise DimensionError(f"conv2d expects [B, C, H, W], got {input.shape}", axis='rank',
                             expected=4, actual=input.ndim)
    weight_shape = params.weight.shape
    if weight_shape[2] != kernel or weight_shape[3] != kernel:
        raise DimensionError(f"weight kernel {weight_shape[2:]} does not match kernel={kernel}",
                             axis='kernel', expected=kernel, actual=weight_shape[2])
    if input.shape[1] != weight_shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {input.shape[1]} channels, weight expects {weight_shape[1]}",
            axis='channels', expected=weight_shape[1], actual=input.shape[1])
    for axis, size in (('height', input.shape[2]), ('width', input.shape[3])):
        if conv_output_size(size, kernel, stride, padding) < 1:
            raise DimensionError(f"conv2d {axis} {size} is too small for kernel {kernel} with padding {padding}",
                                 axis=axis, expected=kernel - 2 * padding, actual=size)

    out = Conv2d.apply(input, params.weight, stride=stride, padding=padding)
    if params.bias is not None:
        out = out + params.bias.reshape(1, -1, 1, 1)
    return out


def linear(input: Tensor, params: LayerParams) -> Tensor:
    """
    Affine map [B, Din] -> [B, Dout].

    Raises:
        DimensionError: If Din disagrees with the weight columns
    """
    if input.ndim != 2:
        raise DimensionError(f"linear expects [B, D], got {input.shape}", axis='rank', expected=2, actual=input.ndim)
    d_out, d_in = params.weight.shape
    if input.shape[1] != d_in:
        raise DimensionError(f"linear feature mismatch: input has {input.shape[1]} features, weight expects {d_in}",
                             axis='features', expected=d_in, actual=input.shape[1])
    out = input @ params.weight.T
    if params.bias is not None:
        out = out + params.bias.reshape(1, -1)
    return out


def activate(input: Tensor, kind: str) -> Tensor:
    """Elementwise 'relu' or 'sigmoid'."""
    if kind == 'relu':
        return input.relu()
    if kind == 'sigmoid':
        return input.sigmoid()
    raise TensorError(f"Unknown activation '{kind}'")


def batchnorm(input: Tensor, params: LayerParams, mode: str) -> Tensor:
    """
    Batch normalization over the batch and spatial axes of [B, C, H, W].

    Train mode uses batch statistics and updates the running statistics;
    eval mode uses the running statistics.

    Raises:
        VarianceDegeneracyError: If train mode sees fewer than 2 points per channel
        DimensionError: If the channel count disagrees with gamma
    """
    if mode not in ('train', 'eval'):
        raise TensorError(f"mode must be 'train' or 'eval', got '{mode}'")
    if not params.has_batchnorm:
        raise TensorError("layer has no batch normalization parameters")
    if input.ndim != 4 or input.shape[1] != params.gamma.shape[0]:
        raise DimensionError(f"batchnorm expects [B, {params.gamma.shape[0]}, H, W], got {input.shape}",
                             axis='channels', expected=params.gamma.shape[0],
                             actual=input.shape[1] if input.ndim > 1 else None)
    return BatchNorm2d.apply(input, params.gamma, params.beta,
                             running_mean=params.running_mean, running_var=params.running_var,
                             momentum=params.momentum, epsilon=params.epsilon,
                             training=(mode == 'train'))


def flatten(input: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)] in row-major (channel-first) order."""
    return input.reshape(input.shape[0], -1)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """
    Concatenate along axis; every other axis must agree.

    Raises:
        DimensionError: On rank or extent mismatch
    """
    if not inputs:
        raise DimensionError("concat needs at least one input")
    reference = inputs[0].shape
    for position, t in enumerate(inputs[1:], start=1):
        if t.ndim != len(reference):
            raise DimensionError(f"concat input {position} has rank {t.ndim}, expected {len(reference)}",
                                 axis='rank', expected=len(reference), actual=t.ndim)
        for ax, (a, b) in enumerate(zip(reference, t.shape)):
            if ax != axis % len(reference) and a != b:
                raise DimensionError(f"concat input {position} has extent {b} on axis {ax}, expected {a}",
                                     axis=str(ax), expected=a, actual=b)
    return _concat(inputs, axis=axis)


def split(input: Tensor, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    """Inverse of concat: slice input into consecutive pieces of the given sizes."""
    if sum(sizes) != input.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not add up to extent {input.shape[axis]}",
                             axis=str(axis), expected=input.shape[axis], actual=sum(sizes))
    pieces, start = [], 0
    for size in sizes:
        index = [slice(None)] * input.ndim
        index[axis] = slice(start, start + size)
        pieces.append(input[tuple(index)])
        start += size
    return pieces
