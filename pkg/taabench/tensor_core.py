"""
Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every op whose inputs require grad appends a node to the calling thread's
current tape. backward() replays the tape in exact reverse execution order,
which is always a valid topological order of the graph.

Image tensors use NHWC layout: (batch, height, width, channels).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from taabench.errors import NonFiniteError, ShapeError, TapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()
_tape_ids = itertools.count(1)
_tape_lock = threading.Lock()
_tapes_created = 0


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


@contextmanager
def no_grad():
    """Ops executed inside this block are never recorded."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def tapes_created() -> int:
    """Number of tapes created by this process so far (instrumentation)."""
    return _tapes_created


@dataclass(eq=False)
class _Node:
    op: str
    output: "Tensor"
    inputs: Tuple["Tensor", ...]
    backward: Backward


class Tape:
    """
    Ordered record of executed differentiable ops.

    Use as a context manager to scope a computation to its own tape; ops run
    outside any explicit tape go to a per-thread ambient tape that is replaced
    once backward has consumed it.
    """

    def __init__(self):
        global _tapes_created
        with _tape_lock:
            _tapes_created += 1
        self.id = next(_tape_ids)
        self.records: list[_Node] = []
        self.consumed = False

    def record(self, node: _Node) -> int:
        if self.consumed:
            raise TapeError(f"tape {self.id} was consumed by backward; call reset() before reuse")
        self.records.append(node)
        return len(self.records) - 1

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def ops(self) -> list[str]:
        return [node.op for node in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _current_tape() -> Tape:
    stack = _tape_stack()
    if stack:
        return stack[-1]
    ambient = getattr(_state, "ambient", None)
    if ambient is None or ambient.consumed:
        ambient = _state.ambient = Tape()
    return ambient


class Tensor:
    """n-dimensional float64 array with optional tape participation"""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "_leaf")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._index = -1
        self._leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor has more than one element")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        tape = _current_tape()
        out.requires_grad = True
        out._leaf = False
        out._tape = tape
        out._index = tape.record(_Node(op, out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def subtract(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("subtract", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("subtract", a.data - b.data, (a, b), backward)


def multiply(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Hadamard product"""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("multiply", a.data * b.data, (a, b), backward)


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _make("scale", a.data * factor, (a,), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make("relu", np.where(mask, x.data, 0.0), (x,), backward)


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (x,), backward)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (x,), backward)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def softmax(x: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    p = _softmax_np(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (x,), backward)


def log_softmax(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = x.data - _logsumexp_np(x.data)[..., None]

    def backward(g):
        return (g - _softmax_np(x.data) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


def logsumexp(x: ArrayLike) -> Tensor:
    """log(sum(exp(x))) over the last axis, computed stably."""
    x = as_tensor(x)

    def backward(g):
        return (g[..., None] * _softmax_np(x.data),)

    return _make("logsumexp", _logsumexp_np(x.data), (x,), backward)


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make("log", out, (x,), backward)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: ArrayLike, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _make("sum", x.data.sum(axis=axes), (x,), backward)


def mean(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),)

    return _make("mean", x.data.mean(axis=axes), (x,), backward)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), backward)


def stack(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        first, second = sorted(shapes)[:2]
        raise ShapeError("stack", first, second)
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _make("stack", out, tensors, backward)


def select(x: ArrayLike, indices: Sequence[int]) -> Tensor:
    """Pick one entry per row of a (batch, classes) tensor."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError("select", x.shape, idx.shape)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return _make("select", x.data[rows, idx], (x,), backward)


def pad(x: ArrayLike, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; widths holds (before, after) per axis."""
    x = as_tensor(x)
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim or any(v < 0 for w in widths for v in w):
        raise ShapeError("pad", x.shape, (len(widths),), detail="one (before, after) pair per axis")
    window = tuple(slice(before, before + extent) for (before, _), extent in zip(widths, x.shape))

    def backward(g):
        return (g[window],)

    return _make("pad", np.pad(x.data, widths), (x,), backward)


def resize_nearest(x: ArrayLike, height: int, width: int) -> Tensor:
    """Nearest-neighbour resize of an NHWC batch."""
    x = as_tensor(x)
    if x.ndim != 4 or height < 1 or width < 1:
        raise ShapeError("resize_nearest", x.shape, (height, width))
    _, h, w, _ = x.shape
    rows = ((np.arange(height) + 0.5) * h / height).astype(np.int64)
    cols = ((np.arange(width) + 0.5) * w / width).astype(np.int64)

    def backward(g):
        by_rows = np.zeros((g.shape[0], h, width, g.shape[3]))
        np.add.at(by_rows, (slice(None), rows), g)
        full = np.zeros(x.shape)
        np.add.at(full, (slice(None), slice(None), cols), by_rows)
        return (full,)

    return _make("resize_nearest", x.data[:, rows][:, :, cols], (x,), backward)


def clamp(x: ArrayLike, low: float, high: float) -> Tensor:
    """Clip to [low, high]; gradient passes strictly inside the bounds only."""
    x = as_tensor(x)
    inside = (x.data > low) & (x.data < high)

    def backward(g):
        return (g * inside,)

    return _make("clamp", np.clip(x.data, low, high), (x,), backward)


def l1_norm(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)

    def backward(g):
        return (np.expand_dims(g, axes) * np.sign(x.data),)

    return _make("l1_norm", np.abs(x.data).sum(axis=axes), (x,), backward)


def l2_norm(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axes))

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        scaled = np.where(norm > 0, g / safe, 0.0)
        return (np.expand_dims(scaled, axes) * x.data,)

    return _make("l2_norm", norm, (x,), backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: ArrayLike, labels: Sequence[int], reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy from raw logits of shape (batch, classes)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"cross_entropy: unknown reduction '{reduction}'")
    rows = np.arange(logits.shape[0])
    per_row = _logsumexp_np(logits.data) - logits.data[rows, labels]
    divisor = float(logits.shape[0]) if reduction == "mean" else 1.0
    value = per_row.sum() / divisor if reduction == "mean" else per_row.sum()

    def backward(g):
        grad = _softmax_np(logits.data)
        grad[rows, labels] -= 1.0
        if reduction == "mean":
            grad = grad / divisor
        return (grad * g,)

    return _make("cross_entropy", np.asarray(value), (logits,), backward)


def binary_cross_entropy_with_logits(logits: ArrayLike, targets: ArrayLike) -> Tensor:
    """Mean binary cross-entropy; stable for large |logits|."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise ShapeError("binary_cross_entropy_with_logits", logits.shape, targets.shape)
    z, t = logits.data, targets.data
    per_item = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        return ((_sigmoid_np(z) - t) * (g / z.size), None)

    return _make("binary_cross_entropy", np.asarray(per_item.mean()), (logits, targets), backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return sliding_window_view(padded, (k, k), axis=(1, 2))


def conv2d(x: ArrayLike, kernel: ArrayLike) -> Tensor:
    """
    Stride-1 convolution with zero "same" padding.

    x is (batch, height, width, in_channels); kernel is
    (k, k, in_channels, out_channels) with odd k.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if (x.ndim != 4 or kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]
            or kernel.shape[0] % 2 == 0 or x.shape[3] != kernel.shape[2]):
        raise ShapeError("conv2d", x.shape, kernel.shape)
    k = kernel.shape[0]
    win = _windows(x.data, k)
    out = np.einsum("bhwcij,ijco->bhwo", win, kernel.data, optimize=True)

    def backward(g):
        d_kernel = np.einsum("bhwcij,bhwo->ijco", win, g, optimize=True)
        d_x = np.einsum("bhwoij,ijco->bhwc", _windows(g, k), kernel.data[::-1, ::-1], optimize=True)
        return d_x, d_kernel

    return _make("conv2d", out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# Orthogonal DCT
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DctBasis:
    """Orthonormal type-II DCT matrix A; dct2(x) = A x Aᵀ per channel."""

    size: int
    matrix: np.ndarray

    @classmethod
    def of(cls, size: int) -> "DctBasis":
        return dct_basis(size)


@lru_cache(maxsize=None)
def dct_basis(size: int) -> DctBasis:
    if size < 1:
        raise ValueError(f"DCT basis size must be positive, got {size}")
    matrix = dct(np.eye(size), norm="ortho", axis=0)
    matrix.setflags(write=False)
    return DctBasis(size, matrix)


def _check_dct(op: str, x: Tensor, basis: DctBasis) -> None:
    if x.ndim < 3 or x.shape[-3] != basis.size or x.shape[-2] != basis.size:
        raise ShapeError(op, x.shape, (basis.size, basis.size), detail="spatial dims must equal basis size")


def _dct2_np(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.einsum("ij,...jkc,lk->...ilc", a, x, a, optimize=True)


def _idct2_np(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.einsum("ji,...jkc,kl->...ilc", a, x, a, optimize=True)


def dct2(image: ArrayLike, basis: DctBasis) -> Tensor:
    """2-D DCT over the (height, width) axes of an HWC or NHWC tensor."""
    image = as_tensor(image)
    _check_dct("dct2", image, basis)
    a = basis.matrix

    def backward(g):
        return (_idct2_np(g, a),)

    return _make("dct2", _dct2_np(image.data, a), (image,), backward)


def idct2(coefficients: ArrayLike, basis: DctBasis) -> Tensor:
    coefficients = as_tensor(coefficients)
    _check_dct("idct2", coefficients, basis)
    a = basis.matrix

    def backward(g):
        return (_dct2_np(g, a),)

    return _make("idct2", _idct2_np(coefficients.data, a), (coefficients,), backward)


# ---------------------------------------------------------------------------
# Non-differentiable helpers
# ---------------------------------------------------------------------------

def sign(t: ArrayLike) -> Tensor:
    """Elementwise sign in {-1, 0, +1}; never recorded."""
    return Tensor(np.sign(as_tensor(t).data))


def backward(scalar_loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from scalar_loss."""
    if scalar_loss.data.size != 1:
        raise TapeError(f"backward expects a scalar loss, got shape {scalar_loss.shape}")
    tape = scalar_loss._tape
    if tape is None:
        raise TapeError("loss is not on a tape: none of its inputs required grad")
    if tape.consumed:
        raise TapeError(f"backward already ran on tape {tape.id}; call reset() before another pass")
    tape.consumed = True

    grads = {id(scalar_loss): np.ones_like(scalar_loss.data)}
    for node in reversed(tape.records[: scalar_loss._index + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for parent, parent_grad in zip(node.inputs, node.backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent._leaf:
                parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad
            else:
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def grad_of(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> Tuple[float, np.ndarray]:
    """Value and gradient of a scalar function at x, on a private tape."""
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape():
        out = fn(leaf)
        if not out.requires_grad:
            # output does not depend on x at all
            return out.item(), np.zeros_like(leaf.data)
        backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return out.item(), grad


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5,
                       indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central differences of a scalar function; only `indices` (flat) if given."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + h
            up = fn(Tensor(x)).item()
            flat[i] = original - h
            down = fn(Tensor(x)).item()
            flat[i] = original
            grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def check_gradients(fn: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5,
                    indices: Optional[Sequence[int]] = None) -> float:
    """
    Max relative error between the reverse-mode and central-difference
    gradients, normalised by the largest gradient magnitude.
    """
    _, analytic = grad_of(fn, x)
    numeric = numerical_gradient(fn, x, h=h, indices=indices)
    if indices is not None:
        analytic = analytic.reshape(-1)[list(indices)]
        numeric = numeric.reshape(-1)[list(indices)]
    scale_ = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)
