"""Dense tensors with reverse-mode differentiation for VGG-style networks.

Only the handful of ops a plain conv/pool/linear classifier needs are
provided. Every op records a :class:`TapeNode` on its output; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.

Batched inputs are ``[N, C, H, W]`` for images and ``[N, F]`` for vectors;
the unbatched forms ``[C, H, W]`` and ``[F]`` are accepted as well.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default float type (``float64`` for grad checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@dataclass
class TapeNode:
    op_kind: str
    inputs: tuple
    backward_fn: Callable
    saved_context: dict = field(default_factory=dict)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self._retain = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        op = self.node.op_kind if self.node else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op}, requires_grad={self.requires_grad})"

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this (intermediate) tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # elementwise helpers; enough for losses built by hand in tests
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, guided: bool = False) -> None:
        """Populate ``grad`` on every leaf that requires it.

        With ``guided=True`` each ReLU only passes gradient where both its
        forward input and the incoming gradient are positive.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.shape}")
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(_topological_order(self)):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None or t._retain:
                if t.requires_grad or t._retain:
                    t.grad = g.copy() if t.grad is None else t.grad + g
            if t.node is None:
                continue
            in_grads = t.node.backward_fn(g, guided)
            for parent, pg in zip(t.node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op_kind: str, inputs: Sequence[Tensor], backward_fn, **ctx) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op_kind, tuple(inputs), backward_fn, ctx)
    return out


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b) if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def backward(g, guided):
        ga = g if a.data.size == g.size else np.sum(g).reshape(a.shape)
        gb = g if b.data.size == g.size else np.sum(g).reshape(b.shape)
        return ga, gb

    return _result(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=a.dtype)
        return _result(a.data * scale, "scale", (a,), lambda g, guided: (g * scale,))
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g, guided):
        return g * b.data, g * a.data

    return _result(a.data * b.data, "mul", (a, b), backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g, guided):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), backward)


def take(a: Tensor, index) -> Tensor:
    out = np.asarray(a.data[index])

    def backward(g, guided):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out.copy(), "index", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, "reshape", (a,), lambda g, guided: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Flatten everything but the batch axis (unbatched input flattens fully)."""
    if a.ndim == 4:
        return reshape(a, (a.shape[0], -1))
    return reshape(a, (-1,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0

    def backward(g, guided):
        if guided:
            return (np.where(positive & (g > 0), g, 0).astype(g.dtype),)
        return (np.where(positive, g, 0).astype(g.dtype),)

    # np.maximum lets NaN through so bad inputs surface downstream
    return _result(np.maximum(a.data, 0).astype(a.dtype), "relu", (a,), backward,
                   positive=positive)


# --------------------------------------------------------------------------
# layers


def _batched(x: Tensor, ndim: int, name: str):
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


def conv2d(x, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) via im2col."""
    x = as_tensor(x)
    xb, squeeze = _batched(x, 4, "conv2d")
    n, c, h, w = xb.shape
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out, C_in, kH, kW], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input channel axis has {c} but weight in-channel axis has {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis has {bias.shape} but weight out-channel axis has {c_out}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel axes must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if (hp - kh) % stride or (wp - kw) % stride or hp < kh or wp < kw:
        raise DimensionError(
            f"conv2d: height/width axes {h}x{w} do not tile with kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g, guided):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if xb.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return gx, gw, gb

    y = _result(np.ascontiguousarray(out), "conv2d", (xb, weight, bias), backward,
                stride=stride, padding=padding)
    return reshape(y, y.shape[1:]) if squeeze else y


def maxpool2d(x, k: int = 2, stride: Optional[int] = None) -> Tensor:
    """Window max; gradient goes to the first (row-major) maximal element."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise DimensionError(f"maxpool2d: invalid k={k} stride={stride}")
    xb, squeeze = _batched(x, 4, "maxpool2d")
    n, c, h, w = xb.shape
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise DimensionError(
            f"maxpool2d: height/width axes {h}x{w} are not tiled by window {k} with stride {stride}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(xb.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g, guided):
        gx = np.zeros_like(xb.data)
        for p in range(k * k):
            i, j = divmod(p, k)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(idx == p, g, 0)
        return (gx,)

    y = _result(np.ascontiguousarray(out), "maxpool2d", (xb,), backward, argmax=idx)
    return reshape(y, y.shape[1:]) if squeeze else y


def linear(x, weight: Tensor, bias: Tensor) -> Tensor:
    x = as_tensor(x)
    xb, squeeze = _batched(x, 2, "linear")
    if weight.ndim != 2 or weight.shape[1] != xb.shape[1]:
        raise DimensionError(
            f"linear: input feature axis has {xb.shape[1]} but weight is {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight rows {weight.shape[0]}")
    out = xb.data @ weight.data.T + bias.data

    def backward(g, guided):
        gx = g @ weight.data if xb.requires_grad else None
        gw = g.T @ xb.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    y = _result(out, "linear", (xb, weight, bias), backward)
    return reshape(y, y.shape[1:]) if squeeze else y


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = as_tensor(logits)
    lb, _ = _batched(logits, 2, "softmax_cross_entropy")
    labels = np.atleast_1d(np.asarray(labels))
    n, k = lb.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {n}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    logp = log_softmax(lb.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g, guided):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=lb.dtype), "softmax_cross_entropy", (lb,), backward)


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    learning_rate: float
    first_moment: list
    second_moment: list
    step_count: int = 0


class Adam:
    """Adaptive-moment optimizer (bias-corrected)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = OptimizerState(
            learning_rate=lr,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state, self.beta1, self.beta2, self.eps)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("adam_step: params, grads and state buffers differ in length")
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: gradient shape {g.shape} vs parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.state = OptimizerState(learning_rate=lr, first_moment=[], second_moment=[])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.state.step_count += 1
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.state.learning_rate * p.grad).astype(p.dtype)
