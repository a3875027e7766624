"""Tape-based reverse-mode automatic differentiation.

Every operation records onto an explicit tape, and every backward rule is
itself expressed through recorded operations.  Running ``backward`` with
``create_graph=True`` therefore leaves the gradient entries on the tape as
ordinary nodes, so a second ``backward`` through any scalar function of them
yields exact second-order derivatives (the double-backprop needed for
gradient-of-gradient penalties and Hessian-vector products).

All values are float64.  Scalars are rank-1 tensors of shape ``(1,)``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape/op failures."""


class ShapeMismatchError(AutodiffError):
    """Operands have shapes the operation cannot accept."""


class DomainError(AutodiffError):
    """Argument outside the operation's domain (log of nonpositive, division by zero)."""


class NonFiniteError(AutodiffError):
    """An operation produced NaN/Inf from finite inputs (overflow)."""


class TapeError(AutodiffError):
    """Tensor used with the wrong/inactive tape, or backward misuse."""


_TAPE_IDS = itertools.count(1)


class Tensor:
    """n-dimensional float64 value, optionally tracked on a tape.

    ``node`` is the tape node id (None for constants).  Stored values are
    C-contiguous and frozen; operations always allocate fresh outputs.
    """

    __slots__ = ("values", "node", "tape")

    def __init__(self, values, node: int | None = None, tape: "Tape | None" = None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.values = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor({tag}, shape={self.shape})"

    # Operator sugar; all dispatch to the recorded ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass
class OpRecord:
    """One recorded operation: saved inputs/output tensors plus static attrs."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict


class Tape:
    """Ordered operation log.  Topological by construction (SSA append-only)."""

    def __init__(self):
        self.generation = next(_TAPE_IDS)
        self.records: list[OpRecord] = []
        self._next_node = 0

    def new_node(self) -> int:
        nid = self._next_node
        self._next_node += 1
        return nid

    def __len__(self) -> int:
        return len(self.records)

    def replay_check(self) -> bool:
        """Re-run every recorded forward kernel and compare bit-exactly."""
        for rec in self.records:
            value = _KERNELS[rec.kind](*(t.values for t in rec.inputs), **rec.attrs)
            value = np.asarray(value, dtype=np.float64)
            if value.ndim == 0:
                value = value.reshape(1)
            if not np.array_equal(value, rec.output.values):
                return False
        return True


_ACTIVE: list[Tape] = []
_RECORD: list[bool] = [True]


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def new_tape():
    """Activate a fresh tape for the duration of the block."""
    tape = Tape()
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


@contextlib.contextmanager
def stop_recording():
    """Compute values without appending to the active tape."""
    _RECORD.append(False)
    try:
        yield
    finally:
        _RECORD.pop()


def constant(values) -> Tensor:
    """Untracked tensor; gradients never flow into it."""
    return Tensor(values)


def leaf(values) -> Tensor:
    """Tracked input tensor on the active tape (a differentiation root)."""
    tape = active_tape()
    if tape is None:
        raise TapeError("leaf() requires an active tape; use `with new_tape():`")
    return Tensor(values, tape.new_node(), tape)


def _record(kind: str, inputs: tuple[Tensor, ...], value, attrs: dict) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced a non-finite value")
    tape = active_tape()
    tracked = [t for t in inputs if t.node is not None]
    for t in tracked:
        if t.tape is not None and tape is not None and t.tape is not tape:
            raise TapeError(
                f"{kind}: input from tape generation {t.tape.generation} used "
                f"under tape generation {tape.generation}"
            )
    if _RECORD[-1] and tape is not None and tracked:
        out = Tensor(value, tape.new_node(), tape)
        tape.records.append(OpRecord(kind, tuple(inputs), out, attrs))
    else:
        out = Tensor(value)
    return out


# ---------------------------------------------------------------------------
# Broadcasting (deliberately narrow: exactly what the toy models need)
# ---------------------------------------------------------------------------

def _broadcast_allowed(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == (1,) or sb == (1,):
        return True
    if len(sa) == 2 and len(sb) == 2:
        rows = sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1)
        cols = sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1)
        return rows or cols
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sb) == 2 and sa == (sb[1],):
        return True
    return False


def _check_elementwise(kind: str, a: Tensor, b: Tensor) -> None:
    if not _broadcast_allowed(a.shape, b.shape):
        raise ShapeMismatchError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to the operand's shape (recorded ops)."""
    if g.shape == shape:
        return g
    if shape == (1,):
        return sum_(g)
    if len(shape) == 2 and len(g.shape) == 2 and shape[0] == g.shape[0] and shape[1] == 1:
        return sum_(g, axis=1, keepdims=True)
    if len(shape) == 2 and len(g.shape) == 2 and shape[1] == g.shape[1] and shape[0] == 1:
        return sum_(g, axis=0, keepdims=True)
    if len(shape) == 1 and len(g.shape) == 2 and shape[0] == g.shape[1]:
        return sum_(g, axis=0)
    raise ShapeMismatchError(f"cannot reduce gradient {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    return _record("add", (a, b), a.values + b.values, {})


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    return _record("sub", (a, b), a.values - b.values, {})


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    return _record("mul", (a, b), a.values * b.values, {})


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("div", a, b)
    if np.any(b.values == 0.0):
        raise DomainError("div: zero in denominator")
    return _record("div", (a, b), a.values / b.values, {})


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _record("scalar_mul", (a,), a.values * c, {"c": float(c)})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", (a, b), a.values @ b.values, {})


def transpose(a: Tensor) -> Tensor:
    if len(a.shape) != 2:
        raise ShapeMismatchError(f"transpose: expected 2-d, got {a.shape}")
    return _record("transpose", (a,), a.values.T, {})


def relu(a: Tensor) -> Tensor:
    return _record("relu", (a,), np.maximum(a.values, 0.0), {})


def tanh(a: Tensor) -> Tensor:
    return _record("tanh", (a,), np.tanh(a.values), {})


def exp(a: Tensor) -> Tensor:
    return _record("exp", (a,), np.exp(a.values), {})


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError("log: nonpositive argument")
    return _record("log", (a,), np.log(a.values), {})


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None and not (-len(a.shape) <= axis < len(a.shape)):
        raise ShapeMismatchError(f"sum: axis {axis} invalid for shape {a.shape}")
    if axis is None and keepdims and len(a.shape) != 1:
        raise ShapeMismatchError("sum: keepdims over all axes needs a 1-d input")
    return _record("sum", (a,), np.sum(a.values, axis=axis, keepdims=keepdims),
                   {"axis": axis, "keepdims": keepdims})


def mean(a: Tensor) -> Tensor:
    return _record("mean", (a,), np.mean(a.values), {})


def l2_norm(a: Tensor) -> Tensor:
    return _record("l2_norm", (a,), np.sqrt(np.sum(a.values * a.values)), {})


def dot(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"dot: expected equal 1-d shapes, got {a.shape} and {b.shape}")
    return _record("dot", (a, b), np.dot(a.values, b.values), {})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concat: empty input list")
    nd = len(tensors[0].shape)
    for t in tensors:
        if len(t.shape) != nd:
            raise ShapeMismatchError(
                f"concat: rank mismatch {[u.shape for u in tensors]}")
    if not (-nd <= axis < nd):
        raise ShapeMismatchError(f"concat: axis {axis} invalid for rank {nd}")
    value = np.concatenate([t.values for t in tensors], axis=axis)
    return _record("concat", tuple(tensors), value, {"axis": axis})


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = len(a.shape)
    if not (-nd <= axis < nd):
        raise ShapeMismatchError(f"slice: axis {axis} invalid for shape {a.shape}")
    axis = axis % nd
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeMismatchError(
            f"slice: bounds [{start}, {stop}) invalid for axis {axis} of {a.shape}")
    sl = tuple(slice(start, stop) if i == axis else slice(None) for i in range(nd))
    return _record("slice", (a,), a.values[sl], {"axis": axis, "start": start, "stop": stop})


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatchError(f"reshape: cannot view {a.shape} as {shape}")
    return _record("reshape", (a,), a.values.reshape(shape), {"shape": shape})


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(logits.shape) != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    n, k = logits.shape
    if n == 0:
        raise ShapeMismatchError("softmax_cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"softmax_cross_entropy: label outside [0, {k})")
    value = _softmax_cross_entropy_kernel(logits.values, labels=labels)
    return _record("softmax_cross_entropy", (logits,), value, {"labels": labels})


def _softmax_cross_entropy_kernel(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z - m), axis=1)) + m[:, 0]
    picked = z[np.arange(z.shape[0]), labels]
    return np.mean(lse - picked)


# Forward kernels keyed by op kind, used for record_forward dispatch and replay.
_KERNELS: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "scalar_mul": lambda a, c: a * c,
    "matmul": lambda a, b: a @ b,
    "transpose": lambda a: a.T,
    "relu": lambda a: np.maximum(a, 0.0),
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sum": lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    "mean": np.mean,
    "l2_norm": lambda a: np.sqrt(np.sum(a * a)),
    "dot": np.dot,
    "concat": lambda *ts, axis: np.concatenate(ts, axis=axis),
    "slice": lambda a, axis, start, stop: a[tuple(
        slice(start, stop) if i == axis else slice(None) for i in range(a.ndim))],
    "reshape": lambda a, shape: a.reshape(shape),
    "softmax_cross_entropy": _softmax_cross_entropy_kernel,
}


# ---------------------------------------------------------------------------
# Backward rules, each composed of the recorded ops above, so that a
# create_graph backward leaves a differentiable graph on the tape.
# ---------------------------------------------------------------------------

def _bw_add(inputs, out, g, attrs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(inputs, out, g, attrs):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(scalar_mul(g, -1.0), b.shape)


def _bw_mul(inputs, out, g, attrs):
    a, b = inputs
    return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)


def _bw_div(inputs, out, g, attrs):
    a, b = inputs
    ga = _unbroadcast(div(g, b), a.shape)
    gb = _unbroadcast(scalar_mul(mul(g, div(out, b)), -1.0), b.shape)
    return ga, gb


def _bw_scalar_mul(inputs, out, g, attrs):
    return (scalar_mul(g, attrs["c"]),)


def _bw_matmul(inputs, out, g, attrs):
    a, b = inputs
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _bw_transpose(inputs, out, g, attrs):
    return (transpose(g),)


def _bw_relu(inputs, out, g, attrs):
    (a,) = inputs
    mask = constant((a.values > 0.0).astype(np.float64))
    return (mul(g, mask),)


def _bw_tanh(inputs, out, g, attrs):
    one = constant(1.0)
    return (mul(g, sub(one, mul(out, out))),)


def _bw_exp(inputs, out, g, attrs):
    return (mul(g, out),)


def _bw_log(inputs, out, g, attrs):
    (a,) = inputs
    return (div(g, a),)


def _bw_sum(inputs, out, g, attrs):
    (a,) = inputs
    axis, keepdims = attrs["axis"], attrs["keepdims"]
    if axis is not None and not keepdims:
        kshape = list(a.shape)
        kshape[axis % len(a.shape)] = 1
        g = reshape(g, tuple(kshape))
    return (mul(g, constant(np.ones(a.shape))),)


def _bw_mean(inputs, out, g, attrs):
    (a,) = inputs
    return (mul(scalar_mul(g, 1.0 / a.size), constant(np.ones(a.shape))),)


def _bw_l2_norm(inputs, out, g, attrs):
    (a,) = inputs
    return (mul(a, div(g, out)),)


def _bw_dot(inputs, out, g, attrs):
    a, b = inputs
    return mul(b, g), mul(a, g)


def _bw_concat(inputs, out, g, attrs):
    axis = attrs["axis"]
    grads, offset = [], 0
    for t in inputs:
        width = t.shape[axis]
        grads.append(slice_(g, axis, offset, offset + width))
        offset += width
    return tuple(grads)


def _bw_slice(inputs, out, g, attrs):
    (a,) = inputs
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    parts = []
    if start > 0:
        before = list(a.shape)
        before[axis] = start
        parts.append(constant(np.zeros(before)))
    parts.append(g)
    if stop < a.shape[axis]:
        after = list(a.shape)
        after[axis] = a.shape[axis] - stop
        parts.append(constant(np.zeros(after)))
    return (concat(parts, axis=axis) if len(parts) > 1 else g,)


def _bw_reshape(inputs, out, g, attrs):
    (a,) = inputs
    return (reshape(g, a.shape),)


def _bw_softmax_cross_entropy(inputs, out, g, attrs):
    (logits,) = inputs
    labels = attrs["labels"]
    n, k = logits.shape
    # Row max is detached: softmax is shift-invariant, so the composite value
    # and all its derivatives are exact with m held constant.
    m = constant(np.max(logits.values, axis=1, keepdims=True))
    e = exp(sub(logits, m))
    p = div(e, sum_(e, axis=1, keepdims=True))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return (mul(sub(p, constant(onehot)), scalar_mul(g, 1.0 / n)),)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "scalar_mul": _bw_scalar_mul,
    "matmul": _bw_matmul,
    "transpose": _bw_transpose,
    "relu": _bw_relu,
    "tanh": _bw_tanh,
    "exp": _bw_exp,
    "log": _bw_log,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "l2_norm": _bw_l2_norm,
    "dot": _bw_dot,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "reshape": _bw_reshape,
    "softmax_cross_entropy": _bw_softmax_cross_entropy,
}

_PUBLIC_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "l2_norm": l2_norm,
    "dot": dot,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "softmax_cross_entropy": softmax_cross_entropy,
}

OP_KINDS = tuple(_PUBLIC_OPS)


def record_forward(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Uniform dispatch entry: validate, compute, and record one operation."""
    if kind not in _PUBLIC_OPS:
        raise AutodiffError(f"unknown op kind {kind!r}")
    fn = _PUBLIC_OPS[kind]
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamLayout:
    """Ordered (name, shape, offset) triples describing a flat parameter vector."""

    entries: tuple[tuple[str, tuple[int, ...], int], ...]
    total: int

    @classmethod
    def of(cls, named_shapes: Iterable[tuple[str, tuple[int, ...]]]) -> "ParamLayout":
        entries, offset = [], 0
        for name, shape in named_shapes:
            shape = tuple(int(s) for s in shape)
            entries.append((name, shape, offset))
            offset += int(np.prod(shape)) if shape else 1
        return cls(tuple(entries), offset)

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.total:
            raise ShapeMismatchError(f"vector length {vec.size} != layout total {self.total}")
        out = {}
        for name, shape, offset in self.entries:
            size = int(np.prod(shape)) if shape else 1
            out[name] = vec[offset:offset + size].reshape(shape).copy()
        return out

    def flatten(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        parts = []
        for name, shape, _ in self.entries:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {arr.shape}")
            parts.append(arr.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class GradientVector:
    """Flat gradient over a named parameter layout.

    ``tensor`` is shape ``(total,)``; it is a tape node whenever the gradient
    was produced with ``create_graph=True``.
    """

    tensor: Tensor
    layout: ParamLayout

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    def norm(self) -> float:
        return float(np.linalg.norm(self.tensor.values))

    def unflatten(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.tensor.values)


def _wrt_items(wrt) -> list[tuple[str, Tensor]]:
    if isinstance(wrt, Mapping):
        return list(wrt.items())
    return [(f"p{i}", t) for i, t in enumerate(wrt)]


def backward(scalar: Tensor, wrt, create_graph: bool = False) -> GradientVector:
    """Reverse sweep: d(scalar)/d(wrt), flattened per the wrt ordering.

    With ``create_graph=True`` the adjoint computations are themselves
    recorded, so the returned flat gradient is a tape node and supports a
    further backward pass (second order).
    """
    if scalar.node is None:
        raise TapeError("backward: scalar is not on a tape")
    if scalar.shape != (1,):
        raise ShapeMismatchError(f"backward: expected scalar of shape (1,), got {scalar.shape}")
    tape = active_tape()
    if tape is None or scalar.tape is not tape:
        raise TapeError("backward: scalar does not belong to the active tape")
    if create_graph and not _RECORD[-1]:
        raise TapeError("backward: create_graph=True inside stop_recording()")
    items = _wrt_items(wrt)
    for name, t in items:
        if t.node is None or t.tape is not tape:
            raise TapeError(f"backward: parameter {name!r} is not on the active tape")

    adjoint: dict[int, Tensor] = {scalar.node: constant(np.ones(1))}
    n_records = len(tape.records)
    ctx = contextlib.nullcontext() if create_graph else stop_recording()
    with ctx:
        for rec in reversed(tape.records[:n_records]):
            g = adjoint.pop(rec.output.node, None)
            if g is None:
                continue
            grads = _BACKWARD[rec.kind](rec.inputs, rec.output, g, rec.attrs)
            for t, gt in zip(rec.inputs, grads):
                if t.node is None or gt is None:
                    continue
                cur = adjoint.get(t.node)
                adjoint[t.node] = gt if cur is None else add(cur, gt)

        parts = []
        for _, t in items:
            gt = adjoint.get(t.node)
            if gt is None:
                gt = constant(np.zeros(t.size))
            elif gt.shape != (t.size,):
                gt = reshape(gt, (t.size,))
            parts.append(gt)
        flat = parts[0] if len(parts) == 1 else concat(parts, axis=0)

    layout = ParamLayout.of((name, t.shape) for name, t in items)
    return GradientVector(flat, layout)


def hvp(loss_eval: Callable[[dict[str, Tensor]], Tensor],
        params: Mapping[str, np.ndarray],
        v: np.ndarray) -> GradientVector:
    """Hessian-vector product H·v of a scalar loss at ``params``.

    Computed without materializing H: one create_graph backward gives the
    gradient g as tape nodes, then backward of gᵀv gives H·v exactly.
    """
    layout = ParamLayout.of((name, np.asarray(a).shape) for name, a in params.items())
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != layout.total:
        raise ShapeMismatchError(f"hvp: v has length {v.size}, expected {layout.total}")
    with new_tape():
        leaves = {name: leaf(a) for name, a in params.items()}
        loss = loss_eval(leaves)
        g = backward(loss, leaves, create_graph=True)
        s = dot(g.tensor, constant(v))
        hv = backward(s, leaves, create_graph=False)
    return hv
