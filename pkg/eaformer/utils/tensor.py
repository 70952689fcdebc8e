"""
Tensor & Tape - minimal reverse-mode autodiff
基于 numpy float64 的稠密张量，只实现模型实际需要的算子

Usage::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # -> array([2., 4.])

Ops executed while no tape is active are evaluated but not recorded; their
results are constants (inference mode).
"""
import logging
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from eaformer.exceptions import DomainError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


# === Tape ===
class _TapeStack(threading.local):
    def __init__(self):
        self.stack: List["Tape"] = []


_local = _TapeStack()


def current_tape() -> Optional["Tape"]:
    """当前线程上处于激活状态的 tape (没有则返回 None)"""
    return _local.stack[-1] if _local.stack else None


class _Record:
    __slots__ = ("op", "output", "inputs", "backward")

    def __init__(self, op: str, output: "Tensor", inputs: Tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed ops. Single-threaded; one backward per tape."""

    def __init__(self):
        self.records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _local.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: "Tensor", inputs: Tuple["Tensor", ...], backward: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that already ran backward")
        output._tape = self
        self.records.append(_Record(op, output, inputs, backward))

    def backward(self, loss: "Tensor") -> None:
        """
        Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

        Records are visited in exact reverse execution order. Leaf gradients
        accumulate additively (fan-out and repeated tapes).
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not None and loss._tape is not self:
            raise TapeError("loss was produced on a different tape")
        if loss._tape is None and not loss.requires_grad:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            input_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
                else:
                    inp._accumulate(ig)
        # loss itself may be a leaf
        if loss._tape is not self and loss.requires_grad:
            loss._accumulate(grads.pop(id(loss)))
        logger.debug("backward over %d records", len(self.records))


def backward(loss: "Tensor") -> None:
    """Run backward on the tape that produced ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not produced on a tape")
    loss._tape.backward(loss)


# === Tensor ===
class Tensor:
    """Dense float64 tensor with optional gradient tape participation."""

    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    # --- basic properties ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # --- operators ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p: float): return power(self, p)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(_lift(other), -1.0))

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    # --- method forms ---
    def sum(self, axis=None) -> "Tensor": return tensor_sum(self, axis)
    def mean(self, axis=None) -> "Tensor": return mean(self, axis)
    def exp(self) -> "Tensor": return exp(self)
    def log(self) -> "Tensor": return log(self)
    def reshape(self, *shape) -> "Tensor": return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, axes=None) -> "Tensor": return transpose(self, axes)


# === helpers ===
def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _lift(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap an op result and record it on the active tape when gradients are needed."""
    _check_finite(data, op)
    needs_grad = any(t.requires_grad for t in inputs)
    tape = current_tape() if needs_grad else None
    out = Tensor._wrap(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, out, inputs, backward)
    return out


def _binary_operands(a: ArrayLike, b: ArrayLike, op: str) -> Tuple[Tensor, Tensor]:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast is supported)")
    return a, b


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # inverse of scalar broadcast
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


# === elementwise ===
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record_op("add", a.data + b.data, (a, b), _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def _backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return record_op("sub", a.data - b.data, (a, b), _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Hadamard product (or scalar multiply)."""
    a, b = _binary_operands(a, b, "mul")

    def _backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return record_op("mul", a.data * b.data, (a, b), _backward)


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = _lift(x)
    factor = float(factor)
    return record_op("scale", x.data * factor, (x,), lambda g: (g * factor,))


def neg(x: ArrayLike) -> Tensor:
    x = _lift(x)
    return record_op("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: ArrayLike) -> Tensor:
    x = _lift(x)
    y = np.exp(x.data)
    return record_op("exp", y, (x,), lambda g: (g * y,))


def log(x: ArrayLike) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")
    return record_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def power(x: ArrayLike, p: float) -> Tensor:
    x = _lift(x)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.power(x.data, p)

    def _backward(g):
        if p == 0.0:
            return (np.zeros_like(x.data),)
        return (g * p * np.power(x.data, p - 1.0),)

    return record_op("power", y, (x,), _backward)


def maximum(x: ArrayLike, floor: float) -> Tensor:
    """Clamp from below; gradient passes only where x > floor."""
    x = _lift(x)
    keep = x.data > floor
    return record_op("maximum", np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def sigmoid(x: ArrayLike) -> Tensor:
    x = _lift(x)
    z = x.data
    s = np.empty_like(z)
    pos = z >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    s[~pos] = ez / (1.0 + ez)
    return record_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: ArrayLike) -> Tensor:
    x = _lift(x)
    t = np.tanh(x.data)
    return record_op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def gelu(x: ArrayLike) -> Tensor:
    """tanh-approximated GELU (smooth everywhere)."""
    x = _lift(x)
    z = x.data
    inner = _GELU_C * (z + _GELU_K * z ** 3)
    t = np.tanh(inner)
    y = 0.5 * z * (1.0 + t)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * z * z)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * d_inner),)

    return record_op("gelu", y, (x,), _backward)


# === reductions / shape ===
def tensor_sum(x: ArrayLike, axis=None) -> Tensor:
    x = _lift(x)
    y = np.sum(x.data, axis=axis)

    def _backward(g):
        if axis is None:
            return (np.full(x.shape, float(np.sum(g))),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return record_op("sum", np.asarray(y, dtype=np.float64), (x,), _backward)


def mean(x: ArrayLike, axis=None) -> Tensor:
    x = _lift(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis), 1.0 / n)


def reshape(x: ArrayLike, shape) -> Tensor:
    x = _lift(x)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from e
    return record_op("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes=None) -> Tensor:
    x = _lift(x)
    y = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return record_op("transpose", y, (x,), lambda g: (np.transpose(g, inverse),))


def index(x: ArrayLike, key) -> Tensor:
    x = _lift(x)
    y = np.array(x.data[key], dtype=np.float64)

    basic = all(isinstance(k, (slice, int)) for k in (key if isinstance(key, tuple) else (key,)))

    def _backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return record_op("index", y, (x,), _backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(_lift(t) for t in tensors)
    if not parts:
        raise ShapeError("concat of empty sequence")
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", y, parts, _backward)


# === linear algebra ===
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g):
        return g @ b.data.T, a.data.T @ g

    return record_op("matmul", a.data @ b.data, (a, b), _backward)


def add_rowvec(x: ArrayLike, v: ArrayLike) -> Tensor:
    """x[m, n] + v[n] applied to every row (bias add)."""
    x, v = _lift(x), _lift(v)
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec: {x.shape} and {v.shape}")
    return record_op("add_rowvec", x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)))


def mul_rowvec(x: ArrayLike, v: ArrayLike) -> Tensor:
    """x[m, n] * v[n] applied to every row (gain)."""
    x, v = _lift(x), _lift(v)
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise ShapeError(f"mul_rowvec: {x.shape} and {v.shape}")
    return record_op("mul_rowvec", x.data * v.data, (x, v), lambda g: (g * v.data, (g * x.data).sum(axis=0)))


# === attention / normalisation ===
def softmax_rows(x: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise softmax with per-row max subtraction.

    ``mask`` (bool, same shape) keeps entries where True; excluded entries get
    probability 0. A row with no kept entry is all zeros.
    """
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs logits {z.shape}")
        row_max = np.where(mask, z, -np.inf).max(axis=1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.where(mask, np.exp(np.where(mask, z - row_max, 0.0)), 0.0)
        denom = e.sum(axis=1, keepdims=True)
        y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def _backward(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return record_op("softmax_rows", y, (x,), _backward)


def layer_norm_rows(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit variance (no affine part)."""
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects a matrix, got {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std

    def _backward(g):
        return (inv_std * (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)),)

    return record_op("layer_norm_rows", xhat, (x,), _backward)


# === spatial ===
def avg_pool2d(x: ArrayLike, patch: int) -> Tensor:
    """Non-overlapping patch average pool of an (H, W, C) map."""
    x = _lift(x)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool2d expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if patch <= 0 or h % patch or w % patch:
        raise ShapeError(f"image {w}x{h} is not divisible by patch size {patch}")
    y = x.data.reshape(h // patch, patch, w // patch, patch, c).mean(axis=(1, 3))

    def _backward(g):
        g = g / (patch * patch)
        return (np.repeat(np.repeat(g, patch, axis=0), patch, axis=1),)

    return record_op("avg_pool2d", y, (x,), _backward)


def neighborhood3x3(x: ArrayLike) -> Tensor:
    """
    Gather the zero-padded 3x3 neighbourhood of every cell of an (H, W, C) map.

    Returns (H*W, 9*C); neighbour order is (dy, dx) row-major, channels innermost.
    """
    x = _lift(x)
    if x.ndim != 3:
        raise ShapeError(f"neighborhood3x3 expects (H, W, C), got {x.shape}")
    h, w, c = x.shape
    padded = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    shifts = [(dy, dx) for dy in range(3) for dx in range(3)]
    y = np.concatenate([padded[dy:dy + h, dx:dx + w, :] for dy, dx in shifts], axis=2)

    def _backward(g):
        g = g.reshape(h, w, 9, c)
        full = np.zeros_like(padded)
        for k, (dy, dx) in enumerate(shifts):
            full[dy:dy + h, dx:dx + w, :] += g[:, :, k, :]
        return (full[1:-1, 1:-1, :],)

    return record_op("neighborhood3x3", y.reshape(h * w, 9 * c), (x,), _backward)
