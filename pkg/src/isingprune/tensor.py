"""A small reverse-mode autodiff engine on top of numpy.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded on it whenever at least one input requires a gradient. Calling
:func:`backward` replays the tape in reverse and accumulates ``.grad`` on the
leaf tensors. Outside a tape, operations run forward-only.

All data is stored as float64.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, UsageError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed operations.

    Tapes are thread-local: a tape entered on one thread does not capture
    operations run on another.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise UsageError("backward called on a tensor that was not recorded on any tape (detached)")
    if tape is None:
        tape = loss._tape
    elif loss._tape is not tape:
        raise UsageError("loss was recorded on a different tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                pending[key] = gi if key not in pending else pending[key] + gi


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), bw)


def tsum(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.array(x.data.sum()), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _emit(x.data.reshape(shape), (x,), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0

    def bw(g):
        return (g * active,)

    return _emit(np.where(active, x.data, 0.0), (x,), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    Args:
        x: input of shape (B, Cin, H, W).
        kernel: weights of shape (Cout, Cin, K1, K2).
        stride: positive step between output positions.
        padding: zero padding added on every spatial border.

    Returns:
        Tensor of shape (B, Cout, H', W') with H' = (H + 2*padding - K1) / stride + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (B,Cin,H,W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D (Cout,Cin,K1,K2), got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise InputError(f"invalid stride={stride} / padding={padding}")
    B, C, H, W = x.shape
    Cout, Ck, K1, K2 = kernel.shape
    if Ck != C:
        raise DimensionError(f"conv2d channel mismatch: input axis 1 (Cin) = {C}, kernel axis 1 (Cin) = {Ck}")
    oh, rh = divmod(H + 2 * padding - K1, stride)
    ow, rw = divmod(W + 2 * padding - K2, stride)
    if oh < 0 or rh:
        raise DimensionError(f"conv2d height axis: (H={H} + 2*{padding} - K1={K1}) is not a non-negative multiple of stride {stride}")
    if ow < 0 or rw:
        raise DimensionError(f"conv2d width axis: (W={W} + 2*{padding} - K2={K2}) is not a non-negative multiple of stride {stride}")
    oh += 1
    ow += 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (K1, K2), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * K1 * K2)
    kmat = kernel.data.reshape(Cout, C * K1 * K2)
    out = (cols @ kmat.T).reshape(B, oh, ow, Cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * oh * ow, Cout)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(B, oh, ow, C, K1, K2)
            dxp = np.zeros(xp.shape)
            hs = stride * (oh - 1) + 1
            ws = stride * (ow - 1) + 1
            for i in range(K1):
                for j in range(K2):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return gx, gk

    return _emit(np.ascontiguousarray(out), (x, kernel), bw)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    h, w = H // 2, W // 2
    blocks = (x.data[:, :, :2 * h, :2 * w]
              .reshape(B, C, h, 2, w, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, h, w, 4))
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def bw(g):
        g4 = np.zeros((B, C, h, w, 4))
        np.put_along_axis(g4, arg, g[..., None], axis=-1)
        gx = np.zeros(x.shape)
        gx[:, :, :2 * h, :2 * w] = g4.reshape(B, C, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)
        return (gx,)

    return _emit(out, (x,), bw)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights.T + bias`` for x of shape (B, N), weights (M, N)."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim != 2 or weights.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(f"dense inner dimension mismatch: input axis 1 = {x.shape[1]}, weights axis 1 = {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"dense bias shape {bias.shape} does not match weights axis 0 = {weights.shape[0]}")

    def bw(g):
        gx = g @ weights.data if x.requires_grad else None
        gw = g.T @ x.data if weights.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit(x.data @ weights.data.T + bias.data, (x, weights, bias), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of -log softmax(logits)[label], stabilised by max subtraction."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D (B, C), got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits batch axis {B}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InputError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(lse - z[rows, labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _emit(np.array(loss), (logits,), bw)


def sgd_step(params: Sequence[Tensor], velocities: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0, active=None) -> None:
    """In-place SGD with momentum and L2 decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    When ``active`` is given (one boolean array per parameter), entries where it is
    False keep both their value and their velocity untouched.
    """
    if lr <= 0:
        raise InputError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise InputError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise InputError(f"weight decay must be non-negative, got {weight_decay}")
    for k, (p, v) in enumerate(zip(params, velocities)):
        g = p.grad if p.grad is not None else 0.0
        new_v = momentum * v + g + weight_decay * p.data
        if active is None or active[k] is None:
            v[...] = new_v
            p.data -= lr * v
        else:
            m = active[k]
            v[m] = new_v[m]
            p.data[m] -= lr * v[m]


class SGD:
    """Holds velocity buffers for :func:`sgd_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, active=None) -> None:
        sgd_step(self.params, self.velocities, self.lr, self.momentum, self.weight_decay, active)
