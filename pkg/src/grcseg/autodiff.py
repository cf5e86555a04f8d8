"""Reverse-mode automatic differentiation over dense float64 arrays.

Every trainable computation in the package is built from the operations in
this module.  A :class:`DiffTensor` records the operation that produced it;
:func:`backward` walks that record in reverse topological order.

Binary elementwise operations accept operands of identical shape, a scalar,
or a vector that matches the trailing axis of the other operand.  Any other
broadcast has to be spelled out with :func:`broadcast_to`.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DeterminismError, DimensionError, NumericDomainError

__all__ = [
    "DiffTensor", "tensor", "parameter", "constant",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "square",
    "elementwise", "softplus", "relu", "clamp", "matmul", "reduce",
    "sum", "mean", "softmax_lastaxis", "log_softmax_lastaxis", "reshape",
    "transpose", "concat", "gather_rows", "broadcast_to", "pad2d",
    "backward", "gradient_check", "GradCheckReport",
    "save_tensors", "load_tensors",
]


class DiffTensor:
    """Dense array node in a differentiation tape."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def tensor(data, requires_grad=False, name=None) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> DiffTensor:
    return DiffTensor(data, requires_grad=True, name=name)


def constant(data) -> DiffTensor:
    return data if isinstance(data, DiffTensor) else DiffTensor(data)


def _node(data, parents, backward_fn) -> DiffTensor:
    out = DiffTensor.__new__(DiffTensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- broadcasting

def _check_binary(a: DiffTensor, b: DiffTensor):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and sb[0] == sa[-1]:
        return
    if a.ndim == 1 and b.ndim >= 1 and sa[0] == sb[-1]:
        return
    raise DimensionError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# ------------------------------------------------------------ elementwise ops

def add(a, b) -> DiffTensor:
    a, b = constant(a), constant(b)
    _check_binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> DiffTensor:
    a, b = constant(a), constant(b)
    _check_binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> DiffTensor:
    a, b = constant(a), constant(b)
    _check_binary(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> DiffTensor:
    a, b = constant(a), constant(b)
    _check_binary(a, b)
    zero = np.argwhere(b.data == 0)
    if zero.size:
        raise NumericDomainError(f"division by zero at index {tuple(int(i) for i in zero[0])}")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def neg(a) -> DiffTensor:
    a = constant(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> DiffTensor:
    a = constant(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> DiffTensor:
    a = constant(a)
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        raise NumericDomainError(f"log of non-positive value at index {tuple(int(i) for i in bad[0])}")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> DiffTensor:
    a = constant(a)
    bad = np.argwhere(~(a.data > 0))
    if bad.size:
        raise NumericDomainError(f"sqrt of non-positive value at index {tuple(int(i) for i in bad[0])}")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> DiffTensor:
    a = constant(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div,
                "exp": exp, "log": log, "neg": neg}


def elementwise(op: str, a, b=None) -> DiffTensor:
    """Dispatch by name; ``b`` is required for the binary operations."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("exp", "log", "neg"):
        return fn(a)
    if b is None:
        raise DimensionError(f"{op} needs two operands")
    return fn(a, b)


def softplus(a) -> DiffTensor:
    """ln(1 + e^x), written as max(x, 0) + ln(1 + e^-|x|) so it never overflows."""
    a = constant(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * expit(x),))


def relu(a) -> DiffTensor:
    a = constant(a)
    keep = a.data > 0
    return _node(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


def clamp(a, lo, hi) -> DiffTensor:
    a = constant(a)
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> DiffTensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), bw)


def _norm_axis(x: DiffTensor, axis):
    if axis is None:
        return None
    nd = max(x.ndim, 1)
    if not isinstance(axis, (int, np.integer)) or not -nd <= axis < nd:
        raise DimensionError(f"invalid axis {axis!r} for shape {x.shape}")
    return int(axis) % nd


def reduce(op: str, x, axis=None, keepdims=False) -> DiffTensor:
    x = constant(x)
    axis = _norm_axis(x, axis)
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    out = x.data.sum(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.shape[axis]
    if op == "mean":
        out = out / count
    scale = 1.0 / count if op == "mean" else 1.0

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw)


def sum(x, axis=None, keepdims=False) -> DiffTensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False) -> DiffTensor:
    return reduce("mean", x, axis, keepdims)


def softmax_lastaxis(x) -> DiffTensor:
    x = constant(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw)


def log_softmax_lastaxis(x) -> DiffTensor:
    x = constant(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), bw)


# ------------------------------------------------------------------- shaping

def reshape(x, shape) -> DiffTensor:
    x = constant(x)
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> DiffTensor:
    x = constant(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (x,), lambda g: (np.transpose(g, inv),))


def _getitem(x: DiffTensor, index) -> DiffTensor:
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (x,), bw)


def concat(tensors: Sequence, axis=-1) -> DiffTensor:
    tensors = [constant(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"cannot concatenate shapes {ref.shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(out, tensors, bw)


def gather_rows(x, index) -> DiffTensor:
    """Rows of a 2-D tensor picked by ``index``; entries of -1 yield zero rows.

    ``index`` may have any shape; the result has shape ``index.shape + (c,)``.
    Gradients scatter back additively.
    """
    x = constant(x)
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(index, dtype=np.int64)
    flat = idx.reshape(-1)
    if flat.size and (flat.max() >= x.shape[0] or flat.min() < -1):
        raise DimensionError(f"row index out of range for {x.shape[0]} rows")
    padded = np.vstack([x.data, np.zeros((1, x.shape[1]))])
    out = padded[flat].reshape(idx.shape + (x.shape[1],))
    valid = flat >= 0

    def bw(g):
        g2 = g.reshape(-1, x.shape[1])
        full = np.zeros_like(x.data)
        rows = flat[valid]
        gv = g2[valid]
        # column-wise bincount is much faster than np.add.at for wide gathers
        for j in range(x.shape[1]):
            full[:, j] = np.bincount(rows, weights=gv[:, j], minlength=x.shape[0])
        return (full,)

    return _node(out, (x,), bw)


def broadcast_to(x, shape) -> DiffTensor:
    """Explicit broadcast; gradients are summed back over expanded axes."""
    x = constant(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(out, (x,), bw)


def pad2d(x, pad_h: int, pad_w: int, circular_w=True) -> DiffTensor:
    """Pad an ``[H, W, C]`` map: zeros along H, wrap-around (or zeros) along W."""
    x = constant(x)
    if x.ndim != 3:
        raise DimensionError(f"pad2d expects [H, W, C], got {x.shape}")
    H, W, _ = x.shape
    if circular_w and pad_w > W:
        raise DimensionError("circular padding wider than the map")
    d = x.data
    if pad_w:
        if circular_w:
            d = np.concatenate([d[:, W - pad_w:], d, d[:, :pad_w]], axis=1)
        else:
            d = np.pad(d, ((0, 0), (pad_w, pad_w), (0, 0)))
    if pad_h:
        d = np.pad(d, ((pad_h, pad_h), (0, 0), (0, 0)))

    def bw(g):
        g = g[pad_h:pad_h + H] if pad_h else g
        if not pad_w:
            return (g,)
        core = g[:, pad_w:pad_w + W].copy()
        if circular_w:
            core[:, W - pad_w:] += g[:, :pad_w]
            core[:, :pad_w] += g[:, pad_w + W:]
        return (core,)

    return _node(d, (x,), bw)


# ------------------------------------------------------------------ backward

def _topological(root: DiffTensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffTensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss``.

    Gradients accumulate across calls until :meth:`DiffTensor.zero_grad`.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is not None:
            node.grad = node.grad + g
        else:
            node.grad = g.copy() if node._backward is None else g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    positions: list
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float
    max_rel_err: float = field(init=False)
    passed: bool = field(init=False)

    def __post_init__(self):
        self.max_rel_err = float(self.rel_err.max()) if self.rel_err.size else 0.0
        self.passed = bool(self.max_rel_err < self.tol)


def gradient_check(f: Callable[..., DiffTensor], inputs, step=1e-5, tol=1e-4,
                   n_samples=None, seed=0, floor=1e-6) -> GradCheckReport:
    """Compare analytic gradients of a scalar ``f(*inputs)`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on vanishing gradients from dominating.  With ``n_samples``
    only that many randomly chosen entries are checked.
    """
    if isinstance(inputs, DiffTensor):
        inputs = [inputs]
    inputs = list(inputs)
    base = f(*inputs)
    if base.size != 1:
        raise DimensionError("gradient_check needs a scalar-valued function")
    again = f(*inputs)
    if not np.array_equal(base.data, again.data):
        raise DeterminismError("function output changed between identical evaluations")
    for x in inputs:
        x.zero_grad()
    backward(base)

    positions = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if n_samples is not None and n_samples < len(positions):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(positions), size=n_samples, replace=False)
        positions = [positions[k] for k in sorted(pick)]

    analytic, numeric = [], []
    for i, j in positions:
        x = inputs[i]
        g = x.grad.reshape(-1)[j] if x.grad is not None else 0.0
        orig = x.data
        vals = []
        for sgn in (1.0, -1.0):
            pert = orig.copy()
            pert.reshape(-1)[j] += sgn * step
            x.data = pert
            vals.append(float(f(*inputs).data.reshape(-1)[0]))
        x.data = orig
        analytic.append(g)
        numeric.append((vals[0] - vals[1]) / (2 * step))
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return GradCheckReport(positions, a, n, rel, tol)


# --------------------------------------------------------------- checkpoints

MAGIC = b"GRCW"
FORMAT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write named arrays in the GRCW binary layout (atomic replace)."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value.data if isinstance(value, DiffTensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".grcw-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path) -> dict:
    from .errors import ParseError

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise ParseError(f"{path}: record {name!r} truncated at byte {pos}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ParseError(f"{path}: truncated header at byte {pos}") from exc
    return out
