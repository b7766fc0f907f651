"""Dense tensors recorded on a tape, with reverse-mode differentiation.

A :class:`Tape` is a Wengert list: every primitive appends one node holding
the operation kind, the ids of its inputs, any non-differentiable attributes
and the output value.  :func:`backward` walks the list in reverse.

Primitives live in a registry keyed by kind, so the same table drives the
forward pass, the backward pass, tape replay and the per-primitive gradient
checks.

Broadcasting is deliberately limited to ``add_bias`` (a length-n vector added
to every row of a B x n matrix) and to the per-row coefficient of ``lerp``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Primitive:
    kind: str
    arity: int
    forward: Callable
    # backward(grad_out, inputs, out, **attrs) -> tuple of input grads
    backward: Callable
    check: Callable | None = None
    # selective backward functions take a ``needs`` mask and may skip inputs
    selective: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(kind, arity, forward, backward, check=None, selective=False):
    PRIMITIVES[kind] = Primitive(kind, arity, forward, backward, check, selective)
    return PRIMITIVES[kind]


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool


class Tensor:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications.

    ``dtype`` fixes the precision of every value on the tape: float32 for
    training, float64 for gradient verification.
    """

    def __init__(self, dtype=np.float32, check_finite: bool = True):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self._watched: dict[int, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _leaf(self, value, requires_grad: bool) -> Tensor:
        value = np.asarray(value, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf value contains NaN or Inf")
        self.nodes.append(Node("leaf", (), {}, value, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def constant(self, value) -> Tensor:
        return self._leaf(value, requires_grad=False)

    def variable(self, value: np.ndarray) -> Tensor:
        """Watch ``value`` as a differentiable leaf.

        Watching the same array object twice returns the same leaf, so a
        parameter used by several sub-expressions accumulates one gradient.
        """
        key = id(value)
        if key in self._watched:
            return Tensor(self, self._watched[key])
        t = self._leaf(value, requires_grad=True)
        # keep the caller's array alive so id() stays unique for the tape's life
        self.nodes[t.id].attrs["source"] = value
        self._watched[key] = t.id
        return t

    def leaf_of(self, value: np.ndarray) -> Tensor | None:
        node_id = self._watched.get(id(value))
        return None if node_id is None else Tensor(self, node_id)

    def apply(self, kind: str, inputs: tuple[Tensor, ...], **attrs) -> Tensor:
        prim = PRIMITIVES[kind]
        if len(inputs) != prim.arity:
            raise TypeError(f"{kind} takes {prim.arity} inputs, got {len(inputs)}")
        for t in inputs:
            if t.tape is not self:
                raise ValueError(f"{kind}: input tensor belongs to a different tape")
        values = [self.nodes[t.id].value for t in inputs]
        if prim.check is not None:
            prim.check(*values, **attrs)
        out = np.asarray(prim.forward(*values, **attrs), dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{kind} produced a non-finite value")
        rg = any(self.nodes[t.id].requires_grad for t in inputs)
        self.nodes.append(Node(kind, tuple(t.id for t in inputs), attrs, out, rg))
        return Tensor(self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns the fresh values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
                continue
            prim = PRIMITIVES[node.kind]
            ins = [values[i] for i in node.inputs]
            values.append(np.asarray(prim.forward(*ins, **node.attrs), dtype=self.dtype))
        return values


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Gradient of the scalar ``root`` with respect to every variable leaf.

    Returns a map from node id to gradient.  Variable leaves that do not
    influence ``root`` get an explicit zero gradient.
    """
    if root.tape is not tape:
        raise ValueError("root is not recorded on this tape")
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node_id in range(root.id, -1, -1):
        node = tape.nodes[node_id]
        g = grads.get(node_id)
        if g is None or node.kind == "leaf" or not node.requires_grad:
            continue
        ins = [tape.nodes[i].value for i in node.inputs]
        prim = PRIMITIVES[node.kind]
        if prim.selective:
            needs = tuple(tape.nodes[i].requires_grad for i in node.inputs)
            in_grads = prim.backward(g, ins, node.value, needs=needs, **node.attrs)
        else:
            in_grads = prim.backward(g, ins, node.value, **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.nodes[i].requires_grad:
                continue
            gi = np.asarray(gi, dtype=tape.dtype)
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out = {}
    for node_id in tape._watched.values():
        node = tape.nodes[node_id]
        out[node_id] = grads.get(node_id, np.zeros_like(node.value))
    return out


# --------------------------------------------------------------------------
# shape checks


def _same_shape(a, b, **_):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def _check_matmul(a, b, **_):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul cannot contract {a.shape} with {b.shape}")


def _check_bias(a, b, **_):
    if a.ndim != 2 or b.shape != (a.shape[1],):
        raise ShapeError(f"add_bias needs (B, n) and (n,), got {a.shape} and {b.shape}")


def _check_lerp(a, b, weight):
    _same_shape(a, b)
    if a.ndim != 2 or np.shape(weight) != (a.shape[0],):
        raise ShapeError(
            f"lerp needs (B, n) operands and a (B,) weight, got {a.shape} and {np.shape(weight)}"
        )


def _check_batch(z, **_):
    if z.ndim != 2:
        raise ShapeError(f"expected a (B, n) batch, got {z.shape}")


# --------------------------------------------------------------------------
# elementwise and linear primitives


def _unbroadcast_axis(g, axis, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


register_primitive("add", 2, lambda a, b: a + b, lambda g, ins, out: (g, g), _same_shape)
register_primitive("sub", 2, lambda a, b: a - b, lambda g, ins, out: (g, -g), _same_shape)
register_primitive(
    "mul", 2, lambda a, b: a * b, lambda g, ins, out: (g * ins[1], g * ins[0]), _same_shape
)
register_primitive(
    "scale", 1, lambda a, c: a * c, lambda g, ins, out, c: (g * c,)
)
register_primitive(
    "add_scalar", 1, lambda a, c: a + c, lambda g, ins, out, c: (g,)
)
def _matmul_bwd(g, ins, out, needs=(True, True)):
    a, b = ins
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


register_primitive("matmul", 2, lambda a, b: a @ b, _matmul_bwd, _check_matmul, selective=True)
register_primitive(
    "add_bias",
    2,
    lambda a, b: a + b,
    lambda g, ins, out: (g, g.sum(axis=0)),
    _check_bias,
)
register_primitive(
    "relu",
    1,
    lambda a: np.maximum(a, 0),
    lambda g, ins, out: (g * (ins[0] > 0),),
)
def _leaky_fwd(a, slope=0.2):
    # max(a, slope * a) is the leaky ReLU for 0 <= slope <= 1
    return np.maximum(a, a.dtype.type(slope) * a)


def _leaky_bwd(g, ins, out, slope=0.2):
    t = g.dtype.type
    return (g * ((ins[0] > 0) * t(1 - slope) + t(slope)),)


def _check_slope(a, slope=0.2):
    if not 0 <= slope <= 1:
        raise ValueError(f"leaky_relu slope must lie in [0, 1], got {slope}")


register_primitive("leaky_relu", 1, _leaky_fwd, _leaky_bwd, _check_slope)
register_primitive("tanh", 1, np.tanh, lambda g, ins, out: (g * (1 - out * out),))


def _sigmoid(a):
    # split by sign so exp never overflows
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1 / (1 + e), e / (1 + e))


register_primitive("sigmoid", 1, _sigmoid, lambda g, ins, out: (g * out * (1 - out),))
register_primitive("exp", 1, np.exp, lambda g, ins, out: (g * out,))
register_primitive("log", 1, np.log, lambda g, ins, out: (g / ins[0],))
register_primitive("square", 1, lambda a: a * a, lambda g, ins, out: (2 * g * ins[0],))
register_primitive(
    "clip",
    1,
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda g, ins, out, lo, hi: (g * ((ins[0] >= lo) & (ins[0] <= hi)),),
)

# --------------------------------------------------------------------------
# reductions


def _mean_bwd(g, ins, out, axis=None):
    a = ins[0]
    n = a.size if axis is None else a.shape[axis]
    return (_unbroadcast_axis(g / n, axis, a.shape),)


def _sum_bwd(g, ins, out, axis=None):
    return (_unbroadcast_axis(g, axis, ins[0].shape),)


def _var_fwd(a, axis=None):
    return np.mean((a - a.mean(axis=axis, keepdims=True)) ** 2, axis=axis)


def _var_bwd(g, ins, out, axis=None):
    a = ins[0]
    n = a.size if axis is None else a.shape[axis]
    centered = a - a.mean(axis=axis, keepdims=True)
    return (_unbroadcast_axis(g, axis, a.shape) * (2.0 / n) * centered,)


register_primitive("mean", 1, lambda a, axis=None: a.mean(axis=axis), _mean_bwd)
register_primitive("sum", 1, lambda a, axis=None: a.sum(axis=axis), _sum_bwd)
register_primitive("var", 1, _var_fwd, _var_bwd)
register_primitive(
    "sq_norm", 1, lambda a: np.sum(a * a), lambda g, ins, out: (2 * g * ins[0],)
)

# --------------------------------------------------------------------------
# structural


def _lerp_fwd(a, b, weight):
    w = np.asarray(weight, dtype=a.dtype)[:, None]
    return w * a + (1 - w) * b


def _lerp_bwd(g, ins, out, weight):
    w = np.asarray(weight, dtype=g.dtype)[:, None]
    return (g * w, g * (1 - w))


register_primitive("lerp", 2, _lerp_fwd, _lerp_bwd, _check_lerp)


def _take_rows_bwd(g, ins, out, index):
    res = np.zeros_like(ins[0])
    np.add.at(res, index, g)
    return (res,)


register_primitive(
    "take_rows", 1, lambda a, index: a[np.asarray(index)], _take_rows_bwd
)


def _columns_bwd(g, ins, out, start, stop):
    res = np.zeros_like(ins[0])
    res[:, start:stop] = g
    return (res,)


register_primitive(
    "columns", 1, lambda a, start, stop: a[:, start:stop], _columns_bwd, _check_batch
)

# --------------------------------------------------------------------------
# normalization


def _bn_fwd(z, eps):
    # statistics in float64: a float32 variance is off by ~1e-6 relative,
    # enough to push the output variance outside 1e-5 of 1/(1+eps)
    z64 = z.astype(np.float64)
    m = z64.mean(axis=0)
    v = np.mean((z64 - m) ** 2, axis=0)
    return ((z64 - m) / np.sqrt(v + eps)).astype(z.dtype)


def _bn_bwd(g, ins, out, eps):
    z = ins[0].astype(np.float64)
    v = np.mean((z - z.mean(axis=0)) ** 2, axis=0)
    inv = (1.0 / np.sqrt(v + eps)).astype(g.dtype)
    # out is the normalized batch
    gz = inv * (g - g.mean(axis=0) - out * np.mean(g * out, axis=0))
    return (gz,)


def _check_bn(z, eps):
    _check_batch(z)
    if z.shape[0] < 2:
        raise ShapeError(f"batch normalization needs at least 2 rows, got {z.shape[0]}")


register_primitive("batch_norm", 1, _bn_fwd, _bn_bwd, _check_bn)


def _normalize_fwd(z, mean, var, eps):
    return (z - mean) / np.sqrt(var + eps)


def _normalize_bwd(g, ins, out, mean, var, eps):
    return (g / np.sqrt(var + eps),)


def _check_normalize(z, mean, var, eps):
    _check_batch(z)
    if np.shape(mean) != (z.shape[1],) or np.shape(var) != (z.shape[1],):
        raise ShapeError(
            f"normalize: statistics {np.shape(mean)}/{np.shape(var)} do not match batch {z.shape}"
        )


register_primitive("normalize", 1, _normalize_fwd, _normalize_bwd, _check_normalize)


# --------------------------------------------------------------------------
# functional front-end


def primitive_forward(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    if not inputs:
        raise TypeError("primitive_forward needs at least one input tensor")
    return inputs[0].tape.apply(kind, inputs, **attrs)


def add(a, b):
    return a.tape.apply("add", (a, b))


def sub(a, b):
    return a.tape.apply("sub", (a, b))


def mul(a, b):
    return a.tape.apply("mul", (a, b))


def scale(a, c):
    return a.tape.apply("scale", (a,), c=float(c))


def add_scalar(a, c):
    return a.tape.apply("add_scalar", (a,), c=float(c))


def matmul(a, b):
    return a.tape.apply("matmul", (a, b))


def add_bias(a, b):
    return a.tape.apply("add_bias", (a, b))


def relu(a):
    return a.tape.apply("relu", (a,))


def leaky_relu(a, slope=0.2):
    return a.tape.apply("leaky_relu", (a,), slope=float(slope))


def tanh(a):
    return a.tape.apply("tanh", (a,))


def sigmoid(a):
    return a.tape.apply("sigmoid", (a,))


def exp(a):
    return a.tape.apply("exp", (a,))


def log(a):
    return a.tape.apply("log", (a,))


def square(a):
    return a.tape.apply("square", (a,))


def clip(a, lo, hi):
    return a.tape.apply("clip", (a,), lo=float(lo), hi=float(hi))


def mean(a, axis=None):
    return a.tape.apply("mean", (a,), axis=axis)


def sum(a, axis=None):  # noqa: A001
    return a.tape.apply("sum", (a,), axis=axis)


def var(a, axis=None):
    """Population variance (divides by the count, not count - 1)."""
    return a.tape.apply("var", (a,), axis=axis)


def sq_norm(a):
    return a.tape.apply("sq_norm", (a,))


def lerp(a, b, weight):
    """Row-wise ``weight[i] * a[i] + (1 - weight[i]) * b[i]``; weight is constant."""
    return a.tape.apply("lerp", (a, b), weight=np.asarray(weight))


def take_rows(a, index):
    return a.tape.apply("take_rows", (a,), index=np.asarray(index, dtype=np.intp))


def columns(a, start, stop):
    return a.tape.apply("columns", (a,), start=int(start), stop=int(stop))


def batch_norm(z, eps):
    return z.tape.apply("batch_norm", (z,), eps=float(eps))


def normalize(z, mean, var, eps):
    return z.tape.apply(
        "normalize", (z,), mean=np.asarray(mean), var=np.asarray(var), eps=float(eps)
    )


# --------------------------------------------------------------------------
# verification harness


class GradCheckResult(NamedTuple):
    max_error: float
    index: tuple[int, ...] | None
    failed_nan: bool = False

    def __float__(self):
        return self.max_error


def grad_check(
    function: Callable[[Tape, Tensor], Tensor],
    point,
    step: float = 1e-5,
    analytic_dtype=np.float64,
    coords=None,
) -> GradCheckResult:
    """Compare the tape gradient of a scalar function with central differences.

    ``function(tape, x)`` must build a scalar on ``tape`` from the variable
    ``x``.  The finite-difference side always runs in float64; passing
    ``analytic_dtype=np.float32`` checks the 32-bit backward pass against
    that oracle.  ``coords`` restricts the comparison to a subset of flat
    indices.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    A NaN on either side is reported as an infinite error at that coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)

    tape = Tape(analytic_dtype, check_finite=False)
    x = tape.variable(point.astype(analytic_dtype))
    y = function(tape, x)
    analytic = backward(tape, y)[x.id].astype(np.float64).ravel()

    def value_at(p):
        t = Tape(np.float64, check_finite=False)
        return float(function(t, t.variable(p)).data)

    flat = point.ravel()
    indices = range(flat.size) if coords is None else coords
    worst, worst_idx = 0.0, None
    for i in indices:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        numeric = (value_at(plus.reshape(point.shape)) - value_at(minus.reshape(point.shape))) / (
            2 * step
        )
        a = analytic[i]
        idx = np.unravel_index(i, point.shape)
        if not (np.isfinite(a) and np.isfinite(numeric)):
            return GradCheckResult(float("inf"), tuple(int(j) for j in idx), True)
        err = abs(a - numeric) / max(1.0, abs(a))
        if err > worst or worst_idx is None:
            worst, worst_idx = err, tuple(int(j) for j in idx)
    return GradCheckResult(float(worst), worst_idx)
