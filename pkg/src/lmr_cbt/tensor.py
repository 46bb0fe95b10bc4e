"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tape`` records every differentiable operation of one forward pass as an
append-only list of nodes; node ids are list indices, so inputs always have
smaller ids than their consumers. ``backward`` walks ids in strictly
decreasing order once, accumulating adjoints, and adds the result into the
``grad`` buffer of every ``requires_grad`` leaf. Repeated backward calls
accumulate; call ``zero_grad`` on the leaves between optimizer steps.

Ops run without recording when no tape is active (evaluation mode) or when
no input participates in differentiation. Storage is always row-major
float64; slicing and reshaping copy.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_STATE = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class TapeNode:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only operation record for a single forward/backward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def append(self, node: TapeNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    ``requires_grad`` marks differentiable leaves (parameters). Tensors
    produced by ops under an active tape carry a ``node`` id on that tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; layers mostly call the module-level functions.
    def __add__(self, other): return add(self, _lift(other))
    def __sub__(self, other): return sub(self, _lift(other))
    def __mul__(self, other): return mul(self, _lift(other))
    def __matmul__(self, other): return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(arr: np.ndarray) -> Tensor:
    # fast constructor for op results: arr is always a fresh contiguous
    # float64 array produced by numpy, so the checks in __init__ are skipped
    out = object.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.grad = None
    out.tape = None
    out.node = None
    return out


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording a node when differentiation
    is active for any input."""
    out = _wrap(out_data)
    stack = getattr(_STATE, "stack", None)
    if not stack:
        return out
    tape = stack[-1]
    tracked = False
    for inp in inputs:
        if inp.node is not None:
            if inp.tape is not tape:
                raise ContractError(
                    f"{kind}: input produced on a different tape; tapes are single-pass")
            tracked = True
        elif inp.requires_grad:
            tracked = True
    if not tracked:
        return out
    out.tape = tape
    out.node = tape.append(TapeNode(kind, inputs, backward))
    out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# binary elementwise


def _broadcast_error(kind: str, a: Tensor, b: Tensor) -> DimensionError:
    return DimensionError(
        f"{kind}: shapes {a.data.shape} and {b.data.shape} are not broadcastable")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise _broadcast_error("add", a, b) from None

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise _broadcast_error("sub", a, b) from None

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError:
        raise _broadcast_error("mul", a, b) from None

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    try:
        out = ad / bd
    except ValueError:
        raise _broadcast_error("div", a, b) from None

    def bwd(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _record("div", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# scalar-constant and unary elementwise


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("shift", (x,), x.data + c, lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # exp(-log(1 + e^-x)) never overflows for any finite x
    return np.exp(-np.logaddexp(0.0, -x))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (x,), out, bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", (x,), np.log(xd), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _record("abs", (x,), np.abs(xd), lambda g: (g * np.sign(xd),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)     # overflow-free log(1 + e^x)
    sig = _sigmoid_stable(x.data)
    return _record("softplus", (x,), out, lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# softmax


def softmax(x: Tensor, axis: int) -> Tensor:
    xd = x.data
    if axis >= xd.ndim or axis < -xd.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for shape {xd.shape}")
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax: input contains NaN or Inf")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax", (x,), out, bwd)


# ---------------------------------------------------------------------------
# matmul / transpose


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise DimensionError(f"matmul: operands must be at least 1-D, got {ad.shape} and {bd.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0] if bd.ndim == 1 else bd.shape[-2]
    if inner_a != inner_b:
        raise DimensionError(f"matmul: inner extents differ for shapes {ad.shape} and {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2:
        try:
            np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
        except ValueError:
            raise DimensionError(
                f"matmul: batch extents not broadcastable for shapes {ad.shape} and {bd.shape}") from None
    out = np.matmul(ad, bd)

    def bwd(g):
        if ad.ndim == 1 and bd.ndim == 1:       # dot -> scalar
            return g * bd, g * ad
        if ad.ndim == 1:                        # (k,) @ (...,k,n) -> (...,n)
            ga = np.matmul(bd, g[..., :, None])[..., 0]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        if bd.ndim == 1:                        # (...,m,k) @ (k,) -> (...,m)
            ga = g[..., :, None] * bd[None, :]
            gb = np.matmul(np.swapaxes(ad, -1, -2), g[..., :, None])[..., 0]
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", (a, b), out, bwd)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes (copying)."""
    if x.data.ndim < 2:
        raise DimensionError(f"transpose: needs >= 2 axes, got shape {x.data.shape}")
    out = np.swapaxes(x.data, -1, -2).copy()
    return _record("transpose", (x,), out, lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# shape ops (all copy; no views)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat: needs at least one part")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or any(
                i != axis % len(ref) and s[i] != ref[i] for i in range(len(ref))):
            raise DimensionError(
                f"concat: extents disagree off axis {axis}: {ref} vs {s}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        grads = []
        offset = 0
        for size in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            grads.append(g[tuple(idx)])
            offset += size
        return grads

    return _record("concat", tuple(parts), out, bwd)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start, stop) along one axis, copying."""
    xd = x.data
    if xd.ndim == 2 and axis in (0, 1, -1):
        key = ((slice(start, stop), slice(None)) if axis == 0
               else (slice(None), slice(start, stop)))
    else:
        idx = [slice(None)] * xd.ndim
        idx[axis] = slice(start, stop)
        key = tuple(idx)
    out = xd[key].copy()
    shape = xd.shape

    def bwd(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record("narrow", (x,), out, bwd)


def pad(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    widths = [(0, 0)] * x.data.ndim
    widths[axis] = (before, after)
    out = np.pad(x.data, widths)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(before, before + x.data.shape[axis])

    def bwd(g):
        return (np.ascontiguousarray(g[tuple(idx)]),)

    return _record("pad", (x,), out, bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(x.data.reshape(shape))
    old = x.data.shape
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None,
         keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), out, bwd)


def tmean(x: Tensor, axis: int | tuple[int, ...] | None = None,
          keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``grad``."""
    if loss.data.shape not in ((), (1,)):
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None or loss.tape is None:
        raise ContractError("backward: loss is not on a tape")
    tape = loss.tape
    adjoints: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for nid in range(loss.node, -1, -1):
        adj = adjoints.pop(nid, None)
        if adj is None:
            continue
        node = tape.nodes[nid]
        grads = node.backward(adj)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            if inp.node is not None:
                prev = adjoints.get(inp.node)
                if prev is None:
                    adjoints[inp.node] = g.copy() if g.base is not None or g is adj else g
                else:
                    prev += g
            elif inp.requires_grad:
                inp.accumulate_grad(g)
