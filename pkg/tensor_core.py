"""
Tensor Core - Dense float64 tensors with define-by-run reverse-mode differentiation
Provides exactly the layers gated MLPs and LeNet-style CNNs need, plus Adam
"""

import contextlib
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from utils.errors import ConfigurationError, UsageError


ACTIVATIONS = ('identity', 'relu')

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording a graph"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense row-major float64 array that remembers how it was computed

    Args:
        data: Array-like values
        requires_grad: Whether gradients should be accumulated into this tensor
    """

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Tuple['Tensor', ...] = (), _op: str = ''):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Callable[[], None] = lambda: None
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op='{self._op}', requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    # --- graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Tuple['Tensor', ...], op: str) -> 'Tensor':
        track = _grad_enabled and any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)

    def __add__(self, other) -> 'Tensor':
        other = as_tensor(other)
        out = Tensor._result(self.data + other.data, (self, other), 'add')

        def _backward():
            self._accumulate(out.grad)
            other._accumulate(out.grad)
        out._backward = _backward
        return out

    def __radd__(self, other) -> 'Tensor':
        return self + other

    def __neg__(self) -> 'Tensor':
        return self * -1.0

    def __sub__(self, other) -> 'Tensor':
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> 'Tensor':
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> 'Tensor':
        other = as_tensor(other)
        out = Tensor._result(self.data * other.data, (self, other), 'mul')

        def _backward():
            self._accumulate(out.grad * other.data)
            other._accumulate(out.grad * self.data)
        out._backward = _backward
        return out

    def __rmul__(self, other) -> 'Tensor':
        return self * other

    def __truediv__(self, other: float) -> 'Tensor':
        return self * (1.0 / float(other))

    def __pow__(self, exponent: float) -> 'Tensor':
        exponent = float(exponent)
        out = Tensor._result(self.data ** exponent, (self,), f'pow{exponent:g}')

        def _backward():
            self._accumulate(out.grad * exponent * self.data ** (exponent - 1.0))
        out._backward = _backward
        return out

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ConfigurationError(f"matmul shapes do not conform: {self.shape} @ {other.shape}")
        out = Tensor._result(self.data @ other.data, (self, other), 'matmul')

        def _backward():
            self._accumulate(out.grad @ other.data.T)
            other._accumulate(self.data.T @ out.grad)
        out._backward = _backward
        return out

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> 'Tensor':
        out = Tensor._result(np.sum(self.data, axis=axis), (self,), 'sum')

        def _backward():
            grad = out.grad
            if axis is not None:
                grad = np.expand_dims(grad, axis)
            self._accumulate(np.broadcast_to(grad, self.data.shape))
        out._backward = _backward
        return out

    def mean(self) -> 'Tensor':
        return self.sum() / self.data.size

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            data = self.data.reshape(shape)
        except ValueError as e:
            raise ConfigurationError(f"cannot reshape {self.shape} to {shape}") from e
        out = Tensor._result(data, (self,), 'reshape')

        def _backward():
            self._accumulate(out.grad.reshape(self.data.shape))
        out._backward = _backward
        return out

    def relu(self) -> 'Tensor':
        out = Tensor._result(np.maximum(self.data, 0.0), (self,), 'relu')

        def _backward():
            self._accumulate(out.grad * (self.data > 0.0))
        out._backward = _backward
        return out

    def backward(self) -> None:
        backward(self)


class ParamTensor(Tensor):
    """
    Trainable (or frozen) parameter with its gradient and Adam state

    Args:
        value: Initial values
        name: Label used in checkpoints and logs
        frozen: Frozen parameters never receive gradient
    """

    def __init__(self, value, name: str = '', frozen: bool = False):
        super().__init__(value, requires_grad=not frozen, _op='param')
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def frozen(self) -> bool:
        return not self.requires_grad

    def freeze(self) -> None:
        self.requires_grad = False

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"ParamTensor('{self.name}', shape={self.shape}, frozen={self.frozen})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def backward(loss: Tensor) -> None:
    """
    Reverse-mode sweep from a scalar loss into every tensor that requires grad

    Args:
        loss: Scalar node produced by a recorded forward pass
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called before a forward pass recorded the computation")

    order: List[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._parents and node.grad is not None:
            node._backward()


# --- layers ------------------------------------------------------------------

def dense_forward(x: Tensor, W: ParamTensor, b: Optional[ParamTensor] = None,
                  activation: str = 'identity') -> Tensor:
    """
    Fully connected layer y = act(xW + b)

    Args:
        x: Input of shape (batch, in)
        W: Weights of shape (in, out)
        b: Bias of shape (out,), optional
        activation: 'identity' or 'relu'

    Returns:
        Tensor: Output of shape (batch, out)
    """
    x = as_tensor(x)
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation '{activation}'")
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ConfigurationError(f"dense shapes do not conform: x{x.shape} W{W.shape}")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ConfigurationError(f"bias shape {b.shape} does not match {W.shape[1]} outputs")
        y = y + b
    return y.relu() if activation == 'relu' else y


def conv2d_forward(x: Tensor, K: ParamTensor, b: Optional[ParamTensor] = None,
                   stride: int = 1) -> Tensor:
    """
    Valid-padding 2D cross-correlation

    Args:
        x: Input of shape (batch, cin, h, w)
        K: Kernels of shape (cout, cin, kh, kw)
        b: Bias of shape (cout,), optional
        stride: Positive step between windows

    Returns:
        Tensor: Output of shape (batch, cout, h', w')
    """
    x = as_tensor(x)
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ConfigurationError(f"conv2d shapes do not conform: x{x.shape} K{K.shape}")
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    batch, cin, h, w = x.shape
    cout, _, kh, kw = K.shape
    if h < kh or w < kw or (h - kh) % stride or (w - kw) % stride:
        raise ConfigurationError(
            f"conv2d output extent is not integral for input {h}x{w}, kernel {kh}x{kw}, stride {stride}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum('bchwij,fcij->bfhw', windows, K.data, optimize=True)
    parents = (x, K)
    if b is not None:
        if b.shape != (cout,):
            raise ConfigurationError(f"bias shape {b.shape} does not match {cout} filters")
        data = data + b.data[None, :, None, None]
        parents = (x, K, b)
    out = Tensor._result(data, parents, 'conv2d')

    def _backward():
        g = out.grad
        K._accumulate(np.einsum('bchwij,bfhw->fcij', windows, g, optimize=True))
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                        'bfhw,fc->bchw', g, K.data[:, :, i, j], optimize=True)
            x._accumulate(dx)
    out._backward = _backward
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """
    Non-overlapping 2x2 max pooling over the two trailing axes

    Args:
        x: Input of shape (batch, channels, h, w) with even h and w

    Returns:
        Tensor: Output of shape (batch, channels, h/2, w/2)
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ConfigurationError(f"maxpool2x2 needs even spatial extents, got {x.shape}")
    batch, channels, h, w = x.shape
    blocks = (x.data.reshape(batch, channels, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(batch, channels, h // 2, w // 2, 4))
    winner = blocks.argmax(axis=-1)[..., None]
    out = Tensor._result(np.take_along_axis(blocks, winner, axis=-1)[..., 0], (x,), 'maxpool2x2')

    def _backward():
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, winner, out.grad[..., None], axis=-1)
        x._accumulate(routed.reshape(batch, channels, h // 2, w // 2, 2, 2)
                      .transpose(0, 1, 2, 4, 3, 5)
                      .reshape(batch, channels, h, w))
    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    return as_tensor(x).reshape(x.shape[0], -1)


def apply_gate(x: Tensor, mask) -> Tensor:
    """
    Multiply each unit (dense) or channel (conv) of x by its mask entry

    Args:
        x: Activations of shape (batch, units) or (batch, channels, h, w)
        mask: Vector with one entry per unit/channel (array or Tensor)

    Returns:
        Tensor: Gated activations
    """
    x = as_tensor(x)
    mask = as_tensor(mask)
    if mask.ndim != 1 or mask.shape[0] != x.shape[1]:
        raise ConfigurationError(f"mask of shape {mask.shape} does not match {x.shape[1]} units")
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    return x * mask.reshape(shape)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean softmax cross-entropy over the batch

    Args:
        logits: Scores of shape (batch, classes)
        labels: Integer class labels of shape (batch,)

    Returns:
        Tensor: Scalar loss
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigurationError(f"labels {labels.shape} do not match logits {logits.shape}")
    batch = logits.shape[0]
    log_probs = log_softmax(logits.data, axis=1)
    rows = np.arange(batch)
    out = Tensor._result(np.array(-log_probs[rows, labels].mean()), (logits,), 'softmax_xent')

    def _backward():
        grad = softmax(logits.data, axis=1)
        grad[rows, labels] -= 1.0
        logits._accumulate(grad * (out.grad / batch))
    out._backward = _backward
    return out


def mse_loss(prediction: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over every element"""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != prediction.shape:
        raise ConfigurationError(f"target {target.shape} does not match prediction {prediction.shape}")
    return ((prediction - target) ** 2).mean()


# --- optimization --------------------------------------------------------------

def adam_step(p: ParamTensor, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> ParamTensor:
    """
    Bias-corrected Adam update applied in place

    Args:
        p: Parameter with a populated gradient
        lr: Learning rate
        betas: Exponential decay rates of the two moments
        eps: Denominator floor

    Returns:
        ParamTensor: The same parameter, updated
    """
    beta1, beta2 = betas
    p.step += 1
    p.m = beta1 * p.m + (1.0 - beta1) * p.grad
    p.v = beta2 * p.v + (1.0 - beta2) * p.grad ** 2
    m_hat = p.m / (1.0 - beta1 ** p.step)
    v_hat = p.v / (1.0 - beta2 ** p.step)
    p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


class Adam:
    """Adam over a fixed list of parameters; frozen ones are skipped"""

    def __init__(self, params: Iterable[ParamTensor], lr: float = 0.001,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def add_params(self, params: Iterable[ParamTensor]) -> None:
        known = {id(p) for p in self.params}
        self.params.extend(p for p in params if id(p) not in known)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.requires_grad:
                adam_step(p, self.lr, self.betas, self.eps)


# --- checking ------------------------------------------------------------------

def finite_difference_gradient(loss_fn: Callable[[], float], tensor: Tensor,
                               step: float = 1e-4) -> np.ndarray:
    """
    Central finite-difference gradient of a scalar function of one tensor

    Args:
        loss_fn: Recomputes the scalar loss from the current tensor values
        tensor: Tensor whose entries are perturbed in place
        step: Perturbation size

    Returns:
        np.ndarray: Numerical gradient with the tensor's shape
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = loss_fn()
        flat[i] = original - step
        lower = loss_fn()
        flat[i] = original
        flat_grad[i] = (upper - lower) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error between two gradients"""
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
