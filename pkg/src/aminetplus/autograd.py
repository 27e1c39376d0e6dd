"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one tensor with ``requires_grad`` are recorded in
execution order.  :func:`backward` walks the tape once in reverse.  Outside a
tape every operation is a plain numpy computation, which is what inference
and finite-difference checks use.

Masks are always explicit boolean arrays; padded entries never enter a
reduction or softmax, so they are inert by construction.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import DomainError, MaskError, NondeterminismError, NumericError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "negate",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "power",
    "clip",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "masked_softmax",
    "reduce",
    "layer_norm",
    "gather_rows",
    "backward",
    "gradcheck",
    "GradcheckReport",
]


class Tensor:
    """A float64 array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(negate(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class _Node:
    op: str
    out: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"
    visits: int = 0


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-confined: the active tape lives in thread-local storage,
    so independent tapes can run on different threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.backward_visits = 0

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _check_finite(op, out):
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")


def _result(op, out, inputs, backward_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, requires_grad=needs)
    if needs:
        node = _Node(op, res, tuple(inputs), backward_fn, tape)
        res._node = node
        tape.nodes.append(node)
    return res


# --------------------------------------------------------------------------
# broadcasting: one operand carries the result shape; the other may omit
# leading extents or hold extent 1 anywhere.


def _broadcast_shape(op, a_shape, b_shape):
    if a_shape == b_shape:
        return a_shape
    for big, small in ((a_shape, b_shape), (b_shape, a_shape)):
        if len(small) <= len(big) and all(
            s == 1 or s == g for s, g in zip(reversed(small), reversed(big))
        ):
            return big
    raise ShapeError(f"{op}: operands not broadcastable", a_shape, b_shape)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ga, gb = a.requires_grad, b.requires_grad
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa) if ga else None, _unbroadcast(g, sb) if gb else None),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    ga, gb = a.requires_grad, b.requires_grad

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if ga else None,
            _unbroadcast(g * ad, bd.shape) if gb else None,
        )

    return _result("mul", ad * bd, (a, b), back)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _result("scale", a.data * factor, (a,), lambda g: (g * factor,))


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _result("negate", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    _check_finite("exp", y)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        bad = a.data[a.data <= 0].reshape(-1)[0]
        raise DomainError(f"log of non-positive value {bad!r}")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a scalar exponent; the base must be non-negative."""
    a = as_tensor(a)
    p = float(exponent)
    x = a.data
    if np.any(x < 0):
        raise DomainError("power of a negative base")
    if p != 0.0 and p < 1.0 and np.any(x == 0):
        raise DomainError(f"derivative of x**{p} is unbounded at 0")
    with np.errstate(over="ignore"):
        y = np.power(x, p)
    _check_finite("pow", y)

    def back(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        return (g * p * np.power(x, p - 1.0),)

    return _result("pow", y, (a,), back)


def clip(a, low: float, high: float) -> Tensor:
    """Clamp to ``[low, high]``; gradient flows only inside the interval."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _result("clip", np.clip(a.data, low, high), (a,), lambda g: (np.where(inside, g, 0.0),))


_UNARY = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "negate": negate,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None, *, factor: Optional[float] = None) -> Tensor:
    """Dispatch by name; ``scale`` and ``pow`` take ``factor``."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "scale":
        return scale(a, factor)
    if op_kind == "pow":
        return power(a, factor)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# --------------------------------------------------------------------------
# linear algebra and shape plumbing


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has exactly the same batch axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner extents differ", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul batch extents differ", a.shape, b.shape)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one GEMM over all leading rows instead of a stack of small ones
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))
    else:
        out = ad @ bd

    def back(g):
        if flat:
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = ad.reshape(-1, k).T @ g2 if need_b else None
        else:
            ga = g @ _swap(bd) if need_a else None
            gb = _swap(ad) @ g if need_b else None
        return ga, gb

    return _result("matmul", out, (a, b), back)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _result("transpose", _swap(a.data), (a,), lambda g: (_swap(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape", old, tuple(shape)) from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError("concat extents differ", ts[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _result("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)))


# --------------------------------------------------------------------------
# masked softmax and reductions


def _full_mask(mask, shape, op):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(m, shape)
    except ValueError:
        raise ShapeError(f"{op}: mask does not fit input", m.shape, shape) from None


def _check_slices(valid, axis, op):
    if not np.all(np.any(valid, axis=axis)):
        raise MaskError(f"{op}: a slice along axis {axis} has no valid entries")


def _seq_sum(x, axis):
    # strictly left-to-right accumulation: zero-filled padding then yields
    # bit-identical sums to the compacted array
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis))
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


def masked_softmax(x, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is true.

    Masked outputs are exactly zero.  The per-slice valid maximum is
    subtracted before exponentiation.
    """
    x = as_tensor(x)
    ax = axis % x.ndim
    valid = _full_mask(mask, x.shape, "masked_softmax")
    _check_slices(valid, ax, "masked_softmax")
    shifted = np.where(valid, x.data, -np.inf)
    m = shifted.max(axis=ax, keepdims=True)
    e = np.exp(shifted - m)
    y = e / _seq_sum(e, ax)[(slice(None),) * ax + (None,)]

    def back(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _result("masked_softmax", y, (x,), back)


def reduce(op_kind: str, x, axis: int = -1, mask=None) -> Tensor:
    """Reduce ``axis`` with one of ``sum``, ``mean``, ``max``, ``lse``.

    Masked entries contribute nothing, so a masked reduction equals the same
    reduction over the compacted valid entries.  ``max`` sends its gradient to
    the lowest-index maximal entry.
    """
    x = as_tensor(x)
    ax = axis % x.ndim
    valid = _full_mask(mask, x.shape, "reduce")
    if mask is not None:
        _check_slices(valid, ax, f"reduce({op_kind})")
    elif x.shape[ax] == 0 and op_kind != "sum":
        raise MaskError(f"reduce({op_kind}) over an empty axis")
    xd = x.data
    expand = (slice(None),) * ax + (None,)

    if op_kind == "sum":
        out = _seq_sum(np.where(valid, xd, 0.0), ax)
        return _result("reduce_sum", out, (x,), lambda g: (np.where(valid, g[expand], 0.0),))

    if op_kind == "mean":
        count = valid.sum(axis=ax).astype(np.float64)
        out = _seq_sum(np.where(valid, xd, 0.0), ax) / count
        return _result(
            "reduce_mean", out, (x,), lambda g: (np.where(valid, (g / count)[expand], 0.0),)
        )

    if op_kind == "max":
        filled = np.where(valid, xd, -np.inf)
        idx = np.argmax(filled, axis=ax)
        out = np.take_along_axis(filled, idx[expand], axis=ax).squeeze(ax)

        def back_max(g):
            gx = np.zeros_like(xd)
            np.put_along_axis(gx, idx[expand], g[expand], axis=ax)
            return (gx,)

        return _result("reduce_max", out, (x,), back_max)

    if op_kind == "lse":
        filled = np.where(valid, xd, -np.inf)
        m = filled.max(axis=ax)
        e = np.exp(filled - m[expand])
        s = _seq_sum(e, ax)
        out = m + np.log(s)
        w = e / s[expand]
        return _result("reduce_lse", out, (x,), lambda g: (w * g[expand],))

    raise ValueError(f"unknown reduction {op_kind!r}")


# --------------------------------------------------------------------------
# layer norm and embedding lookup


def layer_norm(x, gain, bias, epsilon: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last axis", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * rstd
    out = gain.data * xhat + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _result("layer_norm", out, (x, gain, bias), back)


def gather_rows(table, indices) -> Tensor:
    """Row lookup; the backward pass scatter-adds into the table."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError("gather_rows needs a 2-D table", table.shape)
    idx = np.asarray(indices)
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise DomainError(f"gather_rows indices must be integers, got {idx.dtype}")
    idx = idx.astype(np.intp, copy=False)
    v = table.shape[0]
    bad = (idx < 0) | (idx >= v)
    if np.any(bad):
        raise DomainError(f"gather_rows index {int(idx[bad][0])} outside [0, {v})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("gather_rows", table.data[idx], (table,), back)


# --------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Assign ``.grad`` on every leaf with ``requires_grad`` recorded on ``tape``.

    Gradients are assigned afresh (not accumulated across calls); leaves the
    loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar loss", loss.shape)
    node = loss._node
    if node is None:
        raise TapeError("loss was not produced on a tape")
    if tape is None:
        tape = node.tape
    elif node.tape is not tape:
        raise TapeError("loss was produced on a different tape")

    for n in tape.nodes:
        for t in n.inputs:
            if t.requires_grad and t._node is None:
                t.grad = np.zeros_like(t.data)

    pending = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes):
        n.visits += 1
        tape.backward_visits += 1
        g = pending.pop(id(n.out), None)
        if g is None:
            continue
        grads = n.backward_fn(g)
        for t, gi in zip(n.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad += gi
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradcheckReport:
    step: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def failures(self) -> list:
        return [n for n, e in self.errors.items() if e > self.tolerance]

    def lines(self):
        for name, err in self.errors.items():
            verdict = "ok" if err <= self.tolerance else "FAIL"
            yield f"{name:<24s} max_rel_err={err:.3e} {verdict}"


def gradcheck(
    builder: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    grad_hook: Optional[Callable[[str, np.ndarray], np.ndarray]] = None,
) -> GradcheckReport:
    """Compare tape gradients with central differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the report holds the worst value per tensor.  Tensors with
    ``requires_grad=False`` are left out.  ``grad_hook`` can rewrite an
    analytic gradient before comparison (negative-control testing).
    """
    first = builder()
    second = builder()
    if first.data.size != 1:
        raise ShapeError("gradcheck builder must return a scalar", first.shape)
    if not np.array_equal(first.data, second.data):
        raise NondeterminismError(
            f"builder returned {first.item()!r} then {second.item()!r} for identical inputs"
        )

    with Tape() as tape:
        loss = builder()
    backward(loss, tape)

    report = GradcheckReport(step=step, tolerance=tolerance)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = builder().item()
            flat[i] = orig - step
            fm = builder().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.errors[name] = worst
    return report
