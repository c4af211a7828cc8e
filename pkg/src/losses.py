#!/usr/bin/env python3
"""
Training objectives: spectral angle reconstruction loss, softmax cross-entropy
and their lambda blend.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tensor import DimensionError, SoftmaxCrossEntropy, Tensor

logger = logging.getLogger(__name__)

COSINE_MARGIN = 1e-12


class LossError(Exception):
    """Exception raised when a loss is undefined for its inputs."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


@dataclass
class LossConfig:
    lam: float = 0.5

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise LossError(f"lambda must lie in [0, 1], got {self.lam}")


def _cosine_margin(dtype) -> float:
    # 1 - 1e-12 rounds to 1 in float32
    return max(COSINE_MARGIN, float(np.finfo(dtype).eps))


def spectral_angle(u: Tensor, w: Tensor, axis: int) -> Tensor:
    """
    Angle in radians between the spectra of u and w along axis.

    Raises:
        LossError: If any spectrum is all zeros
    """
    if u.shape != w.shape:
        raise DimensionError(f"spectral angle needs matching shapes, got {u.shape} and {w.shape}",
                             axis='shape')
    if u.shape[axis] < 2:
        raise LossError(f"spectra need at least 2 bands, got {u.shape[axis]}")
    norm_u = (u * u).sum(axis=axis).sqrt()
    norm_w = (w * w).sum(axis=axis).sqrt()
    if np.any(norm_u.data == 0) or np.any(norm_w.data == 0):
        raise LossError("spectral angle is undefined for an all-zero spectrum")
    cosine = (u * w).sum(axis=axis) / (norm_u * norm_w)
    margin = _cosine_margin(cosine.dtype)
    return cosine.clip(-1.0 + margin, 1.0 - margin).arccos()


def sad(u: Tensor, w: Tensor) -> Tensor:
    """Spectral angle distance between two 1-D spectra."""
    if u.ndim != 1:
        raise DimensionError(f"sad expects 1-D spectra, got shape {u.shape}", axis='rank', expected=1, actual=u.ndim)
    return spectral_angle(u, w, axis=0)


def re_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """
    Reconstruction loss for patches [B, L, H, W]: the spectral angle at every
    pixel, averaged over the pixels of each patch and then over the batch.
    """
    return spectral_angle(x, x_hat, axis=1).mean()


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean softmax cross-entropy of 1-based class labels.

    Raises:
        LossError: If a label is outside 1..P_cls
    """
    labels = np.asarray(labels, dtype=np.int64)
    classes = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"expected {logits.shape[0]} labels, got shape {labels.shape}",
                             axis='batch', expected=logits.shape[0], actual=labels.shape[0] if labels.ndim else None)
    if labels.size and (labels.min() < 1 or labels.max() > classes):
        raise LossError(f"labels must lie in 1..{classes}, got range {labels.min()}..{labels.max()}")
    return SoftmaxCrossEntropy.apply(logits, targets=labels - 1)


def total_loss(re: Optional[Tensor], ce: Optional[Tensor], cfg: LossConfig) -> Tensor:
    """
    lambda * re + (1 - lambda) * ce.

    At lambda 0 (or 1) the other term is left out of the graph entirely, so its
    branch receives an exactly zero gradient.
    """
    cfg.validate()
    if cfg.lam == 0.0:
        return ce
    if cfg.lam == 1.0:
        return re
    return re * cfg.lam + ce * (1.0 - cfg.lam)
