"""Dense tensors with a tape-based reverse-mode autodiff.

Every primitive is a coarse numpy kernel (matmul, softmax and layer_norm each
record a single tape entry).  Recording only happens inside an active
:class:`Tape`; outside one the same functions run as plain array math, which
is what inference uses.

    >>> x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_all(mul(x, x))
    >>> tape.backward(y)[x].tolist()
    [2.0, 4.0]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, ShapeError

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An n-d real array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes through the primitives below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications.

    Records are appended as outputs are produced, so the list is already in
    topological order and ``backward`` walks it once in reverse.
    """

    records: list[Record] = field(default_factory=list)
    _prev: "Tape | None" = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, set_grad: bool = True) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every recorded tensor that requires grad.

        Returns a mapping from leaf tensors (those not produced by a record)
        to their gradients.  With ``set_grad`` the gradient is also
        accumulated into ``tensor.grad``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        keep: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            produced.add(id(rec.output))
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op}: backward produced {gi.shape} for input {t.shape}")
                key = id(t)
                keep[key] = t
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            t = keep[key]
            if key in produced:
                continue
            leaves[t] = g
            if set_grad:
                t.grad = g if t.grad is None else t.grad + g
        return leaves


_ACTIVE: Tape | None = None


def _needs_record(inputs: Sequence[Tensor]) -> bool:
    return _ACTIVE is not None and any(t.requires_grad for t in inputs)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if _needs_record(inputs):
        t = Tensor(out, requires_grad=True)
        _ACTIVE.records.append(Record(op, tuple(inputs), t, backward))
        return t
    return Tensor(out)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from err
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as err:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from err
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from err

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return _emit("div", out, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log1p", np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return _emit("gelu", out, (x,), bw)


def selu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg_branch = SELU_SCALE * SELU_ALPHA * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, SELU_SCALE * x.data, neg_branch).astype(x.dtype, copy=False)

    def bw(g):
        d = np.where(pos, SELU_SCALE, neg_branch + SELU_SCALE * SELU_ALPHA)
        return ((g * d).astype(x.dtype, copy=False),)

    return _emit("selu", out, (x,), bw)


def where_mask(x, keep: np.ndarray) -> Tensor:
    """Zero the entries where ``keep`` is False; kept entries pass bitwise."""
    x = as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    zero = x.data.dtype.type(0)
    out = np.where(keep, x.data, zero)
    return _emit("where_mask", out, (x,), lambda g: (np.where(keep, g, zero),))


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------- structural


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from err
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError("transpose needs rank >= 2")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def slice_last(x, start: int, stop: int) -> Tensor:
    """Contiguous copy of ``x[..., start:stop]``."""
    x = as_tensor(x)
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_last", out, (x,), bw)


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, tuple(shape))
    return _emit("broadcast_to", np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from err
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, xs, bw)


# ---------------------------------------------------------------- reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sum_all", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum_axis", out, (x,), bw)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Mean over one axis, or over everything when ``axis`` is None."""
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
        out = np.asarray(x.data.mean())
        return _emit("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    n = x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _emit("mean", out, (x,), bw)


# ---------------------------------------------------------------- contractions


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching/broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


bmm = matmul


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` over the last axis; weight is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if bias.requires_grad else None

    return _emit("linear", out, inputs, bw)


# ---------------------------------------------------------------- normalizers


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis, shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return _emit("softmax", out, (x,), bw)


def softmax_rows(x) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis, shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned scale and shift."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n = x.shape[-1]
    # shift by the first entry so constant rows centre to exact zeros
    ref = x.data[..., :1]
    xc = x.data - ref
    xc = xc - xc.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=red) if weight.requires_grad else None
        gb = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gw, gb

    return _emit("layer_norm", out.astype(x.dtype, copy=False), (x, weight, bias), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Rows scaled to unit Euclidean norm; zero-norm rows are rejected."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        bad = np.argwhere(np.squeeze(norm, axis=axis) == 0)[0].tolist()
        raise DegenerateInputError(f"zero-norm row at index {bad}")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), bw)


# ---------------------------------------------------------------- stochastic


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = x.data.dtype.type(1.0 / (1.0 - rate))
    m = keep.astype(x.dtype) * factor
    return _emit("dropout", x.data * m, (x,), lambda g: (g * m,))


def alpha_dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Dropout for SELU nets: dropped entries go to the negative saturation
    value -scale*alpha, then an affine correction restores zero mean and unit
    variance for standardized inputs."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"alpha_dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    sat = -SELU_SCALE * SELU_ALPHA
    keep_prob = 1.0 - rate
    a = (keep_prob * (1.0 + rate * sat * sat)) ** -0.5
    b = -a * sat * rate
    keep = (rng.random(x.shape) < keep_prob).astype(x.dtype)
    out = a * (x.data * keep + sat * (1.0 - keep)) + b
    a_keep = (a * keep).astype(x.dtype)
    return _emit("alpha_dropout", out.astype(x.dtype, copy=False), (x,), lambda g: (g * a_keep,))


# ---------------------------------------------------------------- losses


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean())

    def bw(g):
        gd = g * 2.0 / n * diff
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return _emit("mse", out, (a, b), bw)


def cosine_sim_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` (B x P) and ``b`` (M x P).

    Plain-array helper for retrieval; training uses raw dot products.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or a.shape[1] < 1:
        raise ShapeError(f"cosine_sim_matrix: {a.shape} vs {b.shape}")
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    for label, norms in (("first", na), ("second", nb)):
        zero = np.flatnonzero(norms == 0)
        if zero.size:
            raise DegenerateInputError(f"zero-norm row {int(zero[0])} in {label} operand")
    s = (a / na[:, None]) @ (b / nb[:, None]).T
    return np.clip(s, -1.0, 1.0)
