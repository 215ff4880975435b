"""Dense tensors with reverse-mode gradients on top of NumPy.

A deliberately small engine: every primitive needed by the encoders and
losses (matmul, add, elementwise product, softmax, layer norm, GELU,
embedding gather, mean, concatenate, slice, ...) carries an analytic
gradient rule. Forward applications are appended to an explicit
:class:`Record`; :func:`backward` replays it once in reverse. A central
finite-difference verifier (:func:`finite_diff_check`) closes the loop.

Two precision modes: float64 for gradient verification, float32 for
training. The mode is a module default applied when leaves are created;
primitives follow their inputs' dtype.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Record",
    "ShapeError",
    "DegenerateVectorError",
    "tensor",
    "parameter",
    "constant",
    "set_default_dtype",
    "get_default_dtype",
    "backward",
    "finite_diff_check",
    "l2_normalize",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "power",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gather_rows",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "reduce_sum",
    "reduce_mean",
]

_DEFAULT_DTYPE = np.float32
_IDS = itertools.count()
_ACTIVE: "Record | None" = None


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class DegenerateVectorError(ValueError):
    """Raised when a (near-)zero vector reaches l2_normalize."""


class NonFiniteError(FloatingPointError):
    """Raised when finite differences encounter a non-finite value."""


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created leaves (np.float32/np.float64)."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A dense n-d value participating in reverse-mode differentiation.

    ``data`` is never mutated by the engine once the tensor has been used
    in a recorded op (records are immutable); ``grad`` is populated on
    leaves by :func:`backward`.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64) and np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node_id = next(_IDS)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; keeps model code readable
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("op", "inputs", "out_id", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out_id: int, vjp):
        self.op = op
        self.inputs = inputs
        self.out_id = out_id
        self.vjp = vjp


class Record:
    """Ordered, replayable record of primitive applications.

    Appended to in execution order, hence topologically ordered. Frozen
    on context exit; :func:`backward` visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.frozen = False
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Record":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("nested records are not supported")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None
        self.frozen = True

    def _append(self, node: _Node) -> None:
        if self.frozen:
            raise RuntimeError("record is frozen")
        self.nodes.append(node)
        for t in node.inputs:
            if t.requires_grad and t.node_id not in self._out_ids:
                self.leaves.setdefault(t.node_id, t)
        self._out_ids.add(node.out_id)

    def __len__(self) -> int:
        return len(self.nodes)


def record() -> Record:
    return Record()


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node_id = next(_IDS)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE is not None and out.requires_grad:
        _ACTIVE._append(_Node(op, tuple(inputs), out.node_id, vjp))
    return out


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def backward(rec: Record, loss: Tensor) -> dict[int, np.ndarray]:
    """Populate ``grad`` on every leaf of ``rec`` reachable from ``loss``.

    Leaves recorded but not on the path from ``loss`` get a zero gradient.
    Shared subexpressions accumulate (sum). Returns grads keyed by node id.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(rec.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi
    for leaf in rec.leaves.values():
        g = grads.get(leaf.node_id)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.ascontiguousarray(g)
    return grads


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), out, vjp)


def neg(a) -> Tensor:
    a = _coerce(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), out, vjp)


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dims (operands must be >= 2-d)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    out = a.data ** p
    return _emit("power", (a,), out, lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _coerce(a)
    out = np.maximum(a.data, 0.0)
    return _emit("relu", (a,), out, lambda g: (g * (a.data > 0),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x); derivative Phi(x) + x * phi(x)."""
    a = _coerce(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _emit("gelu", (a,), out, vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", (a,), out, vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), out, vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        n = x.shape[-1]
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gain, bias), out, vjp)


def gather_rows(table, idx) -> Tensor:
    """Rows of ``table`` at integer ``idx`` (any shape); scatter-add backward.

    Covers both embedding lookup and marker-position extraction.
    """
    table = _coerce(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows needs integer indices, got {idx.dtype}")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit("gather_rows", (table,), out, vjp)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_coerce(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _emit("concat", tuple(parts), out, vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    a = _coerce(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        return (ga,)

    return _emit("narrow", (a,), out, vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm.

    A (near-)zero vector is a pipeline bug (a masked-out all-zero embedding
    must never reach the loss), so it raises instead of clamping.
    """
    x = _coerce(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis))
    if np.any(norms < eps):
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(
            f"vector norm {norms.reshape(-1)[bad]:.3e} below {eps:.0e} at flat index {bad}"
        )
    inv = power(reduce_sum(mul(x, x), axis=axis, keepdims=True), -0.5)
    return mul(x, inv)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    coord_samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params`` on every call (it must be
    deterministic). Error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``coord_samples`` bounds the number of probed coordinates per parameter
    (all by default); the subset is drawn with ``rng``.
    """
    with Record() as rec:
        loss = f()
    if loss.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got {loss.shape}")
    if not np.isfinite(loss.data):
        raise NonFiniteError("f() returned a non-finite value at the base point")
    backward(rec, loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if coord_samples is not None and coord_samples < n:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=coord_samples, replace=False)
        else:
            coords = range(n)
        ga = analytic[pi].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = float(f().data)
            flat[c] = orig - step
            down = float(f().data)
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"non-finite f() while perturbing parameter {pi}, coordinate {c}")
            numeric = (up - down) / (2.0 * step)
            err = abs(ga[c] - numeric) / max(abs(ga[c]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
