"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`).  Outside a tape nothing is recorded, which is
how inference and probing run.

Broadcasting is limited to adding a 1-D bias over the rows of a matrix.
Every other binary operation needs identical shapes.
"""
from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ValueError):
    """Raised on NaN inputs or other numerically invalid values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of operations; use as a context manager.

    Each entry holds the output tensor, its inputs and a closure mapping the
    output gradient to one gradient per input.  Entries are appended in
    execution order, so inputs always precede the operations consuming them.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self.nodes.append((out, inputs, backward_fn))
        self._tracked.add(id(out))


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    t = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape.record(t, inputs, backward_fn)
    return t


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every ``requires_grad`` leaf reachable on ``tape``.

    Leaf gradients accumulate into ``.grad`` (call ``zero_grad`` between steps).
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not tape.tracks(loss):
        raise ValueError("loss was not produced on this tape")
    leaves: dict[int, Tensor] = {}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for x, gx in zip(inputs, in_grads):
            if gx is None or not tape.tracks(x):
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + gx
            else:
                grads[key] = gx
            if x.requires_grad:
                leaves[key] = x
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0


# ---------------------------------------------------------------------------
# operations


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by subtracting the row max."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got {x.shape}")
    _check_finite(x.data, "softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(y, (x,), fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a matrix, got {x.shape}")
    _check_finite(x.data, "log_softmax_rows")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _record(out, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply ``gain``/``bias``."""
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"layer_norm needs rows of length >= 2, got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({c},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gain, bias), fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth, so finite differences stay clean)."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record(out, (x,), fn)


def take_rows(x: Tensor, idx: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows ``x[idx]``; repeated indices scatter-add in the backward pass."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got {x.shape}")
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise IndexError("take_rows: index out of range")
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(x.data[idx], (x,), fn)


def take_elements(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """1-D vector of ``x[rows[i], cols[i]]``."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(x.data[rows, cols], (x,), fn)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(parts)
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_rows: all parts must be matrices of equal width")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0), parts, fn)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(parts)
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: all parts must be matrices of equal height")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, fn)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _record(x.data[:, start:stop].copy(), (x,), fn)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (norms == 0).any():
        raise NumericError("normalize_rows: zero-norm row")
    y = x.data / norms

    def fn(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _record(y, (x,), fn)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _record(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    return _record(np.array([float(p.data) for p in parts]), parts,
                   lambda g: tuple(np.array(gi) for gi in g))


# ---------------------------------------------------------------------------
# portable dump format


def save_tensor(path: str | Path, x) -> None:
    """Write a one-line JSON header (shape, count) then little-endian float64 data."""
    arr = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype="<f8")
    header = json.dumps({"shape": list(arr.shape), "count": int(arr.size), "dtype": "<f8"})
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        payload = fh.read()
    shape = tuple(header["shape"])
    count = int(header["count"])
    if int(np.prod(shape, dtype=np.int64)) != count:
        raise ValueError(f"{path}: header shape {shape} disagrees with count {count}")
    if len(payload) != 8 * count:
        raise ValueError(f"{path}: expected {8 * count} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
