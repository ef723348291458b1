# cbam/services/tensor.py
"""
Dense NCHW tensors on float64 numpy buffers, plus a thread-confined gradient tape.

Ops are plain functions. While a GradTape is active on the calling thread, any op with an
input that was watched on (or produced by) that tape records a vector-Jacobian closure;
backward() replays the records in reverse. Tensors never change after construction.
"""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from django.conf import settings

from cbam.exceptions import (
    InvalidKernel,
    LabelOutOfRange,
    NodeNotOnTape,
    NotScalar,
    NumericalError,
    ShapeMismatch,
)

_node_ids = itertools.count(1)
_local = threading.local()


class Tensor:
    """Immutable float64 array with an optional node identity on a GradTape."""

    __slots__ = ("_data", "node_id")

    def __init__(self, data, node_id: Optional[int] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self._data = _freeze(arr)
        self.node_id = node_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, node_id: Optional[int] = None) -> "Tensor":
        # No copy: only used for buffers freshly produced by an op.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        t._data = _freeze(arr)
        t.node_id = node_id
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return broadcast_mul(self, other)

    __rmul__ = __mul__


def _freeze(arr: np.ndarray) -> np.ndarray:
    if any(n < 1 for n in arr.shape):
        raise ShapeMismatch(f"all extents must be >= 1, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# --- Constructors -----------------------------------------------------------
def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor._wrap(np.full(tuple(shape), float(value)))


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape)


def ones_like(t: Tensor) -> Tensor:
    return ones(t.shape)


def normal(shape: Sequence[int], std: float, rng: np.random.Generator) -> Tensor:
    return Tensor._wrap(rng.normal(0.0, std, size=tuple(shape)))


# --- Gradient tape ----------------------------------------------------------
@dataclass(frozen=True)
class _Record:
    output: int
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


class GradTape:
    """
    Ordered log of differentiable ops. Use as a context manager; the tape is bound to
    the thread that entered it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.shapes: dict[int, tuple] = {}
        self._thread: Optional[int] = None

    def __enter__(self) -> "GradTape":
        self._thread = threading.get_ident()
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __contains__(self, node_id) -> bool:
        return node_id in self.shapes

    def watch(self, t: Tensor) -> Tensor:
        """Return a copy of t registered as a leaf node on this tape."""
        node = next(_node_ids)
        self.shapes[node] = t.shape
        return Tensor._wrap(t.data, node)

    def _record(self, out: Tensor, inputs: tuple, vjp) -> Tensor:
        if threading.get_ident() != self._thread:
            raise RuntimeError("a GradTape cannot be shared between threads")
        node = next(_node_ids)
        self.shapes[node] = out.shape
        self.records.append(_Record(node, inputs, vjp))
        return Tensor._wrap(out.data, node)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on the current thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor._wrap(data)
    if settings.DEBUG:
        _check_finite(out, inputs)
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(t.node_id if t.node_id in tape else None for t in inputs)
    if all(node is None for node in ids):
        return out
    return tape._record(out, ids, vjp)


def _check_finite(out: Tensor, inputs: Sequence[Tensor]):
    if np.isfinite(out.data).all():
        return
    if all(np.isfinite(t.data).all() for t in inputs):
        raise NumericalError(f"non-finite values produced from finite inputs (shape {out.shape})")


def backward(tape: GradTape, loss: Tensor) -> dict:
    """
    Return dLoss/dNode for every node recorded on the tape, keyed by node id.
    Nodes the loss does not depend on get zero tensors.
    """
    if loss.size != 1:
        raise NotScalar(f"loss must have a single element, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id not in tape:
        raise NodeNotOnTape("loss was not produced on this tape")

    grads = {node: np.zeros(shape) for node, shape in tape.shapes.items()}
    grads[loss.node_id] = np.ones(loss.shape)
    for rec in reversed(tape.records):
        g = grads[rec.output]
        if not g.any():
            continue
        for node, contrib in zip(rec.inputs, rec.vjp(g)):
            if node is not None and contrib is not None:
                grads[node] += contrib
    return {node: Tensor._wrap(g) for node, g in grads.items()}


# --- Broadcasting helpers ---------------------------------------------------
def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast axes so grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_4d(t: Tensor, what: str):
    if t.ndim != 4:
        raise ShapeMismatch(f"{what} must be N×C×H×W, got shape {t.shape}")


# --- Elementwise ------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), vjp)


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; size-1 axes are stretched to the other operand's extent."""
    _broadcast_shape(a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Kept strictly inside (0, 1): float64 rounds to 1.0 above ~37 and to 0.0 below ~-745.
    with np.errstate(over="ignore"):
        return np.clip(1.0 / (1.0 + np.exp(-z)), _SIGMOID_LO, _SIGMOID_HI)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


# --- Shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat_channel(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat input")
    _require_4d(b, "concat input")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeMismatch(f"concat needs equal N, H, W: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1), (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def downsample(x: Tensor, factor: int = 2) -> Tensor:
    """Keep every factor-th row and column, starting at (0, 0)."""
    _require_4d(x, "downsample input")
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        gx[:, :, ::factor, ::factor] = g
        return (gx,)

    return _result(x.data[:, :, ::factor, ::factor], (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result(np.array([x.data.sum() / n]), (x,), lambda g: (np.full(shape, g[0] / n),))


# --- Linear algebra ---------------------------------------------------------
def linear(x: Tensor, w: Tensor) -> Tensor:
    """x (...×Cin) times wᵀ (Cin×Cout); no bias."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} does not match weight {w.shape}")
    cin, cout = w.shape[1], w.shape[0]

    def vjp(g):
        gx = g @ w.data
        gw = g.reshape(-1, cout).T @ x.data.reshape(-1, cin)
        return gx, gw

    return _result(x.data @ w.data.T, (x, w), vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """
    Zero-padded cross-correlation by direct summation, stride 1.

    Each output element accumulates x·w in (cin, ky, kx) order from 0.0 and adds the
    bias last, which is exactly what a naive nested loop computes.
    """
    _require_4d(x, "conv2d input")
    if kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d kernel must be Cout×Cin×k×k, got {kernel.shape}")
    cout, cin, k, k2 = kernel.shape
    if k != k2:
        raise InvalidKernel(f"kernel must be square, got {k}×{k2}")
    if k % 2 == 0:
        raise InvalidKernel(f"kernel size must be odd, got {k}")
    if x.shape[1] != cin:
        raise ShapeMismatch(f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding < 0:
        raise InvalidKernel(f"padding must be >= 0, got {padding}")
    n, _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {h}×{w} (padding {padding})")

    p = padding
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    wt = kernel.data
    acc = np.zeros((n, cout, ho, wo))
    for ci in range(cin):
        for i in range(k):
            for j in range(k):
                acc += xp[:, None, ci, i:i + ho, j:j + wo] * wt[None, :, ci, i, j, None, None]
    out = acc + bias.data[None, :, None, None]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wt)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i:i + ho, j:j + wo]
                gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch)
                gxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, wt[:, :, i, j])
        gx = gxp[:, :, p:p + h, p:p + w]
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, (x, kernel, bias), vjp)


# --- Pooling ----------------------------------------------------------------
# Sums use np.add.accumulate, which adds strictly left to right, so the averages agree
# bit-for-bit with a sequential loop.
def global_avg_pool_spatial(f: Tensor) -> Tensor:
    _require_4d(f, "pool input")
    n, c, h, w = f.shape
    total = np.add.accumulate(f.data.reshape(n, c, h * w), axis=2)[:, :, -1]
    out = (total / (h * w)).reshape(n, c, 1, 1)
    shape = f.shape
    return _result(out, (f,), lambda g: (np.broadcast_to(g / (h * w), shape),))


def global_max_pool_spatial(f: Tensor) -> Tensor:
    """Spatial max; the gradient goes to the first maximal position in row-major order."""
    _require_4d(f, "pool input")
    n, c, h, w = f.shape
    flat = f.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)[:, :, None]
    out = np.take_along_axis(flat, idx, axis=2).reshape(n, c, 1, 1)

    def vjp(g):
        gflat = np.zeros((n, c, h * w))
        np.put_along_axis(gflat, idx, g.reshape(n, c, 1), axis=2)
        return (gflat.reshape(n, c, h, w),)

    return _result(out, (f,), vjp)


def channel_avg_pool(f: Tensor) -> Tensor:
    _require_4d(f, "pool input")
    c = f.shape[1]
    out = np.add.accumulate(f.data, axis=1)[:, -1:] / c
    shape = f.shape
    return _result(out, (f,), lambda g: (np.broadcast_to(g / c, shape),))


def channel_max_pool(f: Tensor) -> Tensor:
    """Max across channels; the gradient goes to the first maximal channel."""
    _require_4d(f, "pool input")
    idx = f.data.argmax(axis=1)[:, None]
    out = np.take_along_axis(f.data, idx, axis=1)
    shape = f.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _result(out, (f,), vjp)


# --- Losses -----------------------------------------------------------------
def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy of N×K logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be N×K, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got {labels.size}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = np.array([(lse - z[np.arange(n), labels]).sum() / n])

    def vjp(g):
        probs = softmax(z)
        probs[np.arange(n), labels] -= 1.0
        return (probs * (g[0] / n),)

    return _result(loss, (logits,), vjp)


# --- Finite differences -----------------------------------------------------
def _as_float(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x, one element at a time."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data)
    grad = np.empty_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _as_float(f(Tensor(base)))
            flat[i] = orig - eps
            f_minus = _as_float(f(Tensor(base)))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor._wrap(grad)


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-3) -> float:
    """max|a − n| scaled by the larger of max|a|, max|n| and floor."""
    a, n = analytic.data, numeric.data
    if a.shape != n.shape:
        raise ShapeMismatch(f"gradient shapes differ: {a.shape} vs {n.shape}")
    scale_ = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale_)
