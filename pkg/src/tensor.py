#!/usr/bin/env python3
"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a Function subclass. The forward pass runs on
raw numpy arrays; the backward pass receives the gradient of the loss with
respect to the operation output and returns one gradient per input (or None
for inputs that do not need one).
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PRECISIONS = {32: np.float32, 64: np.float64}
GRADIENT_CHECK_STEP = 1e-4

_state = threading.local()
_default_dtype = np.float32


class TensorError(Exception):
    """Exception raised for tensor engine errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class DimensionError(TensorError):
    """Exception raised when operand shapes disagree on an axis."""

    def __init__(self, message: str, axis: Optional[str] = None,
                 expected: Optional[int] = None, actual: Optional[int] = None):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        super().__init__(message)


class VarianceDegeneracyError(TensorError):
    """Exception raised when batch statistics are computed over a single point."""
    pass


def set_precision(bits: int):
    """
    Set the default floating point precision for newly created tensors.

    Args:
        bits: 32 or 64

    Raises:
        TensorError: If the precision is not supported
    """
    global _default_dtype
    if bits not in PRECISIONS:
        raise TensorError(f"Unsupported precision {bits}, expected one of {sorted(PRECISIONS)}")
    _default_dtype = PRECISIONS[bits]
    logger.debug(f"Default tensor precision set to {bits}-bit")


def get_dtype(bits: Optional[int] = None) -> type:
    """Return the numpy dtype for a precision, or the current default."""
    if bits is None:
        return _default_dtype
    if bits not in PRECISIONS:
        raise TensorError(f"Unsupported precision {bits}, expected one of {sorted(PRECISIONS)}")
    return PRECISIONS[bits]


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added so grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *inputs: 'Tensor'):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: 'Tensor', **kwargs) -> 'Tensor':
        """
        Run the forward pass and attach the function to the result for backprop.

        Args:
            *inputs: Input tensors
            **kwargs: Non-differentiable arguments passed to forward

        Returns:
            Output tensor
        """
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None)


class Tensor:
    """
    An n-dimensional array with optional gradient tracking.

    The gradient accumulator is allocated lazily as zeros the first time it is
    read, so a tracked tensor the loss never touches reports an exactly zero
    gradient after backward.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 creator: Optional[Function] = None):
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if np.issubdtype(array.dtype, np.floating) else _default_dtype
        self.data = np.asarray(array, dtype=dtype)
        self.requires_grad = requires_grad
        self.creator = creator
        self._grad: Optional[np.ndarray] = None

    @property
    def grad(self) -> Optional[np.ndarray]:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, grad: np.ndarray):
        if self._grad is None:
            self._grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self._grad += grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _wrap(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), requires_grad=False)

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other):
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._wrap(other))

    def __rtruediv__(self, other):
        return Div.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._wrap(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    @property
    def T(self) -> 'Tensor':
        return Transpose.apply(self)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def abs(self) -> 'Tensor':
        return Abs.apply(self)

    def sqrt(self) -> 'Tensor':
        return Sqrt.apply(self)

    def exp(self) -> 'Tensor':
        return Exp.apply(self)

    def log(self) -> 'Tensor':
        return Log.apply(self)

    def clip(self, low: float, high: float) -> 'Tensor':
        return Clip.apply(self, low=low, high=high)

    def arccos(self) -> 'Tensor':
        return Arccos.apply(self)

    def relu(self) -> 'Tensor':
        return ReLU.apply(self)

    def sigmoid(self) -> 'Tensor':
        return Sigmoid.apply(self)

    def backward(self):
        """
        Backpropagate from this scalar through every tracked tensor.

        Gradients accumulate into each tracked tensor's grad, so repeated calls
        without zero_grad add up.

        Raises:
            TensorError: If this tensor is not a scalar
        """
        if self.data.size != 1:
            raise TensorError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise TensorError("backward called on a tensor that is not connected to tracked tensors")

        order = _topological_order(self)
        pending: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node._accumulate(grad)
            if node.creator is None:
                continue
            input_grads = node.creator.backward(grad)
            for inp, inp_grad in zip(node.creator.inputs, input_grads):
                if inp_grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                pending[key] = pending[key] + inp_grad if key in pending else inp_grad


def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order over tracked tensors, inputs before the outputs they feed."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for inp in node.creator.inputs:
                if inp.requires_grad and id(inp) not in visited:
                    stack.append((inp, False))
    return order


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (_unbroadcast(grad * self.b, self.a.shape),
                _unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class PowScalar(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(
                f"matmul inner dimension mismatch: {a.shape} @ {b.shape}",
                axis='inner', expected=b.shape[0], actual=a.shape[1])
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else tuple(self.axis)
            axes = sorted(a % len(self.shape) for a in axes)
            for axis in axes:
                grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, self.shape),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}: {e}")

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Clip(Function):
    def forward(self, a, low, high):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


class Arccos(Function):
    def forward(self, a):
        self.a = a
        return np.arccos(a)

    def backward(self, grad):
        return (-grad / np.sqrt(1.0 - self.a * self.a),)


class ReLU(Function):
    def forward(self, a):
        # subgradient at exactly 0 is 0
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        e = np.exp(-np.abs(a))
        self.out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (grad.T,)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial extent after a convolution: floor((size + 2*padding - kernel) / stride) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """
    Cross-correlation of [B, Cin, H, W] with weights [Cout, Cin, k, k].

    Columns are gathered one kernel offset at a time, so the reduction order is
    fixed for a given shape.
    """

    def forward(self, x, weight, stride=1, padding=0):
        batch, c_in, height, width = x.shape
        c_out, w_in, kernel, _ = weight.shape
        h_out = conv_output_size(height, kernel, stride, padding)
        w_out = conv_output_size(width, kernel, stride, padding)
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = np.empty((batch, c_in, kernel, kernel, h_out, w_out), dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                cols[:, :, i, j] = x[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
        cols = cols.reshape(batch, c_in * kernel * kernel, h_out * w_out)
        w_mat = weight.reshape(c_out, -1)

        self.cols, self.w_mat = cols, w_mat
        self.geometry = (batch, c_in, height, width, kernel, stride, padding, h_out, w_out)
        self.weight_shape = weight.shape
        return np.matmul(w_mat, cols).reshape(batch, c_out, h_out, w_out)

    def backward(self, grad):
        batch, c_in, height, width, kernel, stride, padding, h_out, w_out = self.geometry
        c_out = self.weight_shape[0]
        grad = grad.reshape(batch, c_out, h_out * w_out)

        grad_w = np.tensordot(grad, self.cols, axes=([0, 2], [0, 2])).reshape(self.weight_shape)
        grad_cols = np.matmul(self.w_mat.T, grad).reshape(batch, c_in, kernel, kernel, h_out, w_out)
        grad_x = np.zeros((batch, c_in, height + 2 * padding, width + 2 * padding), dtype=grad.dtype)
        for i in range(kernel):
            for j in range(kernel):
                grad_x[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += grad_cols[:, :, i, j]
        if padding:
            grad_x = grad_x[:, :, padding:-padding, padding:-padding]
        return grad_x, grad_w


class BatchNorm2d(Function):
    """
    Per-channel normalization of [B, C, H, W] over the batch and spatial axes.

    In train mode the running statistics passed in are updated in place.
    """

    def forward(self, x, gamma, beta, running_mean, running_var, momentum, epsilon, training):
        shape = (1, -1, 1, 1)
        self.training = training
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            if count < 2:
                raise VarianceDegeneracyError(
                    f"batch normalization in train mode needs at least 2 points per channel, got {count}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var * (count / (count - 1))
            self.count = count
        else:
            mean, var = running_mean, running_var
        self.inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype, copy=False)
        self.x_hat = (x - mean.reshape(shape)) * self.inv_std.reshape(shape)
        self.gamma = gamma
        return gamma.reshape(shape) * self.x_hat + beta.reshape(shape)

    def backward(self, grad):
        shape = (1, -1, 1, 1)
        grad_gamma = (grad * self.x_hat).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        grad_x_hat = grad * self.gamma.reshape(shape)
        if self.training:
            n = self.count
            sum_g = grad_x_hat.sum(axis=(0, 2, 3)).reshape(shape)
            sum_gx = (grad_x_hat * self.x_hat).sum(axis=(0, 2, 3)).reshape(shape)
            grad_x = (self.inv_std.reshape(shape) / n) * (n * grad_x_hat - sum_g - self.x_hat * sum_gx)
        else:
            grad_x = grad_x_hat * self.inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta


class SoftmaxCrossEntropy(Function):
    """Mean negative log softmax probability of 0-based target indices."""

    def forward(self, logits, targets):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        log_prob = shifted - np.log(total)
        self.prob = exp / total
        self.targets = targets
        rows = np.arange(logits.shape[0])
        return np.asarray(-log_prob[rows, targets].mean(), dtype=logits.dtype)

    def backward(self, grad):
        batch = self.prob.shape[0]
        grad_logits = self.prob.copy()
        grad_logits[np.arange(batch), self.targets] -= 1.0
        return (grad_logits * (grad / batch),)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def check_gradients(fn: Callable[..., Tensor], inputs: Iterable[Tensor],
                    step: float = GRADIENT_CHECK_STEP) -> float:
    """
    Compare backprop gradients against central finite differences.

    Meant for 64-bit inputs. The default step keeps the rounding error of
    (f(x + h) - f(x - h)) / 2h near 1e-12 * |f|, so inputs whose gradient is
    many orders below the loss still compare cleanly.

    Args:
        fn: Callable mapping the inputs to a scalar tensor
        inputs: Tracked tensors to differentiate with respect to
        step: Finite-difference step

    Returns:
        The largest relative error over all inputs, ||analytic - numeric|| / max(||analytic||, ||numeric||)
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    fn(*inputs).backward()
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, grad in zip(inputs, analytic):
            numeric = np.zeros_like(t.data)
            for index in np.ndindex(*t.shape):
                original = t.data[index]
                t.data[index] = original + step
                plus = fn(*inputs).item()
                t.data[index] = original - step
                minus = fn(*inputs).item()
                t.data[index] = original
                numeric[index] = (plus - minus) / (2.0 * step)
            scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, float(np.linalg.norm(grad - numeric) / scale))
    return worst
