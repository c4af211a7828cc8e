#!/usr/bin/env python3
"""
Joint training of both DSNet branches.

This module handles:
- Adam updates with bias correction
- The step learning-rate schedule
- Seeded mini-batching and the blended or alternating objective
- Evaluation into confusion matrices, optionally sharded across threads
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np

from dsnet import DSNetArchitecture, DSNetParams, forward, infer, init_dsnet, save_model
from hsi_data import PatchSet
from losses import LossConfig, ce_loss, re_loss, total_loss
from metrics import ConfusionMatrix
from tensor import Tensor, get_dtype, no_grad

logger = logging.getLogger(__name__)

SCHEDULES = ('blended', 'alternating')
LOG_COLUMNS = ('epoch', 'lr', 're_loss', 'ce_loss', 'total_loss', 'elapsed_s')
RECALIBRATION_CHUNK = 1024


class TrainingError(Exception):
    """Exception raised when training cannot continue."""

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None,
                 parameter: Optional[str] = None):
        self.message = message
        self.epoch = epoch
        self.batch = batch
        self.parameter = parameter
        super().__init__(self.message)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    lr0: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 50
    lam: float = 0.5
    decoder_layers: int = 2
    patch_size: int = 7
    seed: int = 0
    precision: int = 32
    fusion: bool = True
    decoder: str = 'nonlinear'
    relu_placement: str = 'table'
    schedule: str = 'blended'
    endmembers: Optional[int] = None
    checkpoint_every: int = 0
    checkpoint_stem: Optional[str] = None
    deterministic: bool = False
    recalibrate_batchnorm: bool = True

    def validate(self):
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise TrainingError(f"learning rate must be positive, got {self.lr0}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise TrainingError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise TrainingError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.schedule not in SCHEDULES:
            raise TrainingError(f"schedule must be one of {SCHEDULES}, got '{self.schedule}'")
        if self.checkpoint_every and not self.checkpoint_stem:
            raise TrainingError("checkpoint_every needs a checkpoint_stem")
        LossConfig(self.lam).validate()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class EpochRecord(NamedTuple):
    epoch: int
    lr: float
    re_loss: float
    ce_loss: float
    total_loss: float
    elapsed_s: float


class TrainResult(NamedTuple):
    params: DSNetParams
    log: List[EpochRecord]


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float):
    """
    One Adam update of every parameter, in place.

    Raises:
        TrainingError: If any gradient is non-finite (nothing is updated) or lr <= 0
    """
    if lr <= 0:
        raise TrainingError(f"learning rate must be positive, got {lr}")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise TrainingError(f"gradient of '{name}' has shape {grad.shape}, expected {params[name].shape}",
                                parameter=name)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'", parameter=name)

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, grad in grads.items():
        param = params[name]
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.data.dtype, copy=False)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay_factor ** (epoch // decay_every), epochs counted from 0."""
    if epoch < 0:
        raise TrainingError(f"epoch must be >= 0, got {epoch}")
    steps = epoch // cfg.decay_every
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay_factor)) ** steps)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of the training set for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def build_architecture(train_set: PatchSet, cfg: TrainConfig, classes: int) -> DSNetArchitecture:
    return DSNetArchitecture(
        bands=train_set.bands,
        patch_size=train_set.patch_size,
        endmembers=cfg.endmembers or classes,
        classes=classes,
        decoder_layers=cfg.decoder_layers,
        fusion=cfg.fusion,
        decoder=cfg.decoder,
        relu_placement=cfg.relu_placement,
    )


def train(train_set: PatchSet, cfg: TrainConfig, classes: Optional[int] = None,
          params: Optional[DSNetParams] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """
    Train both branches on the same patch batches.

    Each mini-batch computes the reconstruction and classification losses,
    backpropagates the objective through every parameter and takes one Adam
    step. With the alternating schedule, even batches step on the
    reconstruction loss and odd batches on the classification loss. After
    the last epoch the batch-norm running statistics are recomputed on the
    whole training set unless cfg.recalibrate_batchnorm is off.

    Args:
        train_set: Training patches
        cfg: Training configuration
        classes: Number of classes, defaults to the largest training label
        params: Starting parameters, freshly initialized when omitted
        on_epoch: Callback receiving each epoch's record

    Returns:
        TrainResult with the trained parameters and one record per epoch

    Raises:
        TrainingError: On an empty training set or a non-finite loss or gradient
    """
    cfg.validate()
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if train_set.patch_size != cfg.patch_size:
        raise TrainingError(f"training patches are {train_set.patch_size}x{train_set.patch_size}, "
                            f"config expects {cfg.patch_size}")
    classes = classes or int(train_set.labels.max())
    if params is None:
        params = init_dsnet(build_architecture(train_set, cfg, classes), cfg.seed, cfg.precision)

    dtype = get_dtype(cfg.precision)
    values = np.asarray(train_set.values, dtype=dtype)
    labels = train_set.labels
    loss_cfg = LossConfig(cfg.lam)
    named = params.named_parameters()
    state = AdamState()
    log: List[EpochRecord] = []
    n = len(train_set)
    started = time.perf_counter()

    logger.info(f"Training '{params.architecture.variant}' on {n} patches for {cfg.epochs} epochs "
                f"({params.parameter_count()} parameters, schedule={cfg.schedule}, lambda={cfg.lam})")
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = batch_order(n, cfg.seed, epoch)
        sums = np.zeros(3)
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            index = order[start:start + cfg.batch_size]
            x = Tensor(values[index])
            params.zero_grad()
            out = forward(params, x, 'train')
            re = re_loss(x, out.reconstruction)
            ce = ce_loss(out.logits, labels[index])
            total = total_loss(re, ce, loss_cfg)
            if cfg.schedule == 'alternating':
                objective = re if batch % 2 == 0 else ce
            else:
                objective = total
            batch_losses = (re.item(), ce.item(), total.item())
            if not np.all(np.isfinite(batch_losses)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}: {batch_losses}",
                                    epoch=epoch, batch=batch)
            objective.backward()
            try:
                adam_step(named, {name: t.grad for name, t in named.items()}, state, lr)
            except TrainingError as e:
                raise TrainingError(f"{e.message} at epoch {epoch}, batch {batch}",
                                    epoch=epoch, batch=batch, parameter=e.parameter)
            sums += np.array(batch_losses) * len(index)

        means = sums / n
        elapsed = 0.0 if cfg.deterministic else round(time.perf_counter() - started, 3)
        record = EpochRecord(epoch, lr, float(means[0]), float(means[1]), float(means[2]), elapsed)
        log.append(record)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: lr={lr:.6g} re={record.re_loss:.6f} "
                    f"ce={record.ce_loss:.6f} total={record.total_loss:.6f}")
        if on_epoch:
            on_epoch(record)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_model(f"{cfg.checkpoint_stem}_epoch{epoch + 1:04d}", params, {'epoch': str(epoch + 1)})

    if cfg.recalibrate_batchnorm:
        recalibrate_batchnorm(params, values)
    return TrainResult(params, log)


def recalibrate_batchnorm(params: DSNetParams, values: np.ndarray, chunk_size: int = RECALIBRATION_CHUNK):
    """
    Replace the running batch-norm statistics with those of a whole patch set.

    Runs one train-mode pass without a graph. Chunk k is folded in with weight
    n_k / (n_0 + ... + n_k), so a set that fits in one chunk leaves every
    normalized layer with the exact mean and unbiased variance it sees in
    train mode on that set.
    """
    layers = params.batchnorm_layers()
    if not layers or len(values) == 0:
        return
    dtype = params.classifier.fc2.weight.dtype
    momenta = [layer.momentum for layer in layers]
    seen = 0
    try:
        with no_grad():
            for start in range(0, len(values), chunk_size):
                batch = np.asarray(values[start:start + chunk_size], dtype=dtype)
                for layer in layers:
                    layer.momentum = seen / (seen + len(batch))
                forward(params, Tensor(batch), 'train')
                seen += len(batch)
    finally:
        for layer, momentum in zip(layers, momenta):
            layer.momentum = momentum
    logger.debug(f"Recalibrated {len(layers)} batch-norm layers on {seen} patches")


def format_log(log: List[EpochRecord]) -> str:
    lines = [','.join(LOG_COLUMNS)]
    for r in log:
        lines.append(f"{r.epoch},{r.lr!r},{r.re_loss!r},{r.ce_loss!r},{r.total_loss!r},{r.elapsed_s!r}")
    return '\n'.join(lines) + '\n'


def write_log(path: str, log: List[EpochRecord]):
    with open(path, 'w') as f:
        f.write(format_log(log))


def evaluate(params: DSNetParams, patches: PatchSet, workers: int = 1,
             batch_size: int = 256) -> ConfusionMatrix:
    """
    Classify every patch in eval mode and count the results.

    With workers > 1 the patches are split into contiguous shards classified
    on a thread pool; the shard confusion matrices are summed.
    """
    classes = params.architecture.classes
    if workers <= 1 or len(patches) < 2:
        predicted, _ = infer(params, patches.values, batch_size)
        return ConfusionMatrix.from_labels(patches.labels, predicted, classes)

    shards = [s for s in np.array_split(np.arange(len(patches)), workers) if s.size]

    def run(shard: np.ndarray) -> ConfusionMatrix:
        predicted, _ = infer(params, patches.values[shard], batch_size)
        return ConfusionMatrix.from_labels(patches.labels[shard], predicted, classes)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, shards))
    merged = ConfusionMatrix.empty(classes)
    for cm in results:
        merged = merged + cm
    logger.debug(f"Evaluated {len(patches)} patches in {len(shards)} shards")
    return merged
