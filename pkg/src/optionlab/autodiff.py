"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a float64 C-contiguous array.  While a ``Tape`` is active,
every primitive that touches a gradient-requiring tensor appends one record
(output, inputs, backward rules) to a Wengert list; ``Tape.backward`` walks
that list once in reverse, accumulating vector-Jacobian products.  Tensors are
value-semantic: primitives never alias their inputs, and slicing or reshaping
copies.

The primitive set is intentionally small; everything in the layer zoo is
composed from it.  Gradients of ``matmul`` support broadcasting over leading
batch axes; elementwise primitives unbroadcast their gradients back to each
operand's shape.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_finite_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "concat",
    "reshape",
    "slice_",
    "transpose_last",
    "reduce_mean",
    "dropout_apply",
    "mse_loss",
    "grad_check",
]

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-primitive finite-output assertion (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A float64 array with an optional gradient slot.

    ``requires_grad`` marks leaves whose gradients the caller wants; it
    propagates automatically through primitives.  ``grad`` is populated by
    ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would lift 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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
        return float(self.data.item())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; scalars route through ``scale``/``add`` with constants.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add(self, Tensor(np.full((), float(other))))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return sub(self, Tensor(np.full((), float(other))))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a scalar, not a Tensor")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return slice_(self, key)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """A Wengert list.  Use as a context manager around the forward pass."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def backward(self, loss: Tensor, params=None) -> dict:
        """Reverse-accumulate gradients of a scalar ``loss``.

        Walks the list once in reverse, so each recorded node is visited
        exactly once; a tensor consumed by several ops accumulates the sum of
        its downstream contributions.  Returns ``{tensor: gradient}`` for every
        gradient-requiring tensor reached by the walk (their ``.grad`` slots
        are set too).  ``params``, if given, guarantees an entry for each
        listed tensor, zero-filled when the loss does not depend on it.
        """
        if loss.size != 1:
            raise ValueError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        by_id: dict[int, Tensor] = {id(loss): loss}

        for out, inputs, vjps in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue  # not on the path from the loss
            for inp, vjp in zip(inputs, vjps):
                if vjp is None:
                    continue
                contribution = vjp(g)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution
                    by_id[key] = inp

        result = {}
        for key, tensor in by_id.items():
            if tensor.requires_grad:
                tensor.grad = grads[key]
                result[tensor] = grads[key]
        if params is not None:
            for p in params:
                if p not in result:
                    g = np.zeros_like(p.data)
                    p.grad = g
                    result[p] = g
        return result


def backward(loss: Tensor, params=None) -> dict:
    """Run ``backward`` on the innermost active tape."""
    if not _TAPE_STACK:
        raise RuntimeError("no active Tape; wrap the forward pass in `with Tape()`")
    return _TAPE_STACK[-1].backward(loss, params=params)


def _emit(name: str, out_data: np.ndarray, inputs, vjps) -> Tensor:
    """Finish a primitive: finite check, grad flag, optional tape record."""
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{name}: produced non-finite values")
    out = Tensor(out_data)
    tensor_inputs = [t for t in inputs if isinstance(t, Tensor)]
    out.requires_grad = any(t.requires_grad for t in tensor_inputs)
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._records.append((out, tuple(inputs), tuple(vjps)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcasting over leading axes.  Both operands 2-D+."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ: {a.shape} @ {b.shape}"
        )
    out = a.data @ b.data

    def da(g):
        return _unbroadcast(g @ _swap_last(b.data), a.shape)

    def db(g):
        return _unbroadcast(_swap_last(a.data) @ g, b.shape)

    return _emit("matmul", out, (a, b), (da, db))


def _elementwise_pair(name, a, b, fwd, da_fn, db_fn):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None
    out = fwd(a.data, b.data)

    def da(g):
        return _unbroadcast(da_fn(g), a.shape)

    def db(g):
        return _unbroadcast(db_fn(g), b.shape)

    return _emit(name, out, (a, b), (da, db))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    return _elementwise_pair(
        "add", a, b, lambda x, y: x + y, lambda g: g, lambda g: g
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    return _elementwise_pair(
        "sub", a, b, lambda x, y: x - y, lambda g: g, lambda g: -g
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    return _elementwise_pair(
        "mul", a, b, lambda x, y: x * y, lambda g: g * b.data, lambda g: g * a.data
    )


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    if not math.isfinite(c):
        raise ValueError(f"scale: factor must be finite, got {c}")
    return _emit("scale", x.data * c, (x,), (lambda g: g * c,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), (lambda g: g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # stable logistic
    return _emit("sigmoid", out, (x,), (lambda g: g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with the max-shift for stability.

    Rows sum to one and entries are strictly positive for finite inputs.
    """
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def dx(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (g - dot) * out

    return _emit("softmax", out, (x,), (dx,))


def concat(tensors, axis: int = -1) -> Tensor:
    """Concatenate along the last axis (the only axis supported)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    if axis not in (-1, tensors[0].ndim - 1):
        raise ValueError(f"concat: only the last axis is supported, got {axis}")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(
                "concat: leading shapes differ: "
                f"{[t.shape for t in tensors]}"
            )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    offsets = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def make_vjp(index):
        def vjp(g):
            return np.split(g, offsets, axis=-1)[index]

        return vjp

    return _emit(
        "concat", out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors)))
    )


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit(
        "reshape",
        x.data.reshape(shape).copy(),
        (x,),
        (lambda g: g.reshape(old),),
    )


def slice_(x: Tensor, key) -> Tensor:
    """Basic numpy indexing (ints and slices).  Gradient scatters back as zeros-plus-write."""
    out = np.array(x.data[key], dtype=np.float64)  # always a copy: value semantics
    full_shape = x.shape

    def dx(g):
        z = np.zeros(full_shape)
        z[key] = g
        return z

    return _emit("slice", out, (x,), (dx,))


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ValueError(f"transpose_last: need at least 2-D, got {x.shape}")
    return _emit(
        "transpose_last",
        np.array(_swap_last(x.data), dtype=np.float64),  # copy: value semantics
        (x,),
        (lambda g: _swap_last(g),),
    )


def reduce_mean(x: Tensor) -> Tensor:
    """Mean over all elements, returned as a 0-D tensor."""
    n = x.size
    if n == 0:
        raise ValueError("reduce_mean: empty tensor")
    shape = x.shape
    return _emit(
        "reduce_mean",
        np.asarray(x.data.mean()),
        (x,),
        (lambda g: np.full(shape, float(g) / n),),
    )


def dropout_apply(x: Tensor, mask) -> Tensor:
    """Multiply by a precomputed dropout mask (already inverted-scaled).

    Mask generation lives with the layers; this primitive only applies it, so
    the backward rule is exact: the same mask gates the gradient.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ValueError(
            f"dropout_apply: mask shape {mask.shape} != input shape {x.shape}"
        )
    return _emit("dropout_apply", x.data * mask, (x,), (lambda g: g * mask,))


def mse_loss(pred: Tensor, actual: Tensor) -> Tensor:
    """Mean squared error over 1-D vectors; gradient is 2*(pred-actual)/N."""
    if pred.ndim != 1 or actual.ndim != 1:
        raise ValueError(
            f"mse_loss: expects 1-D vectors, got {pred.shape} and {actual.shape}"
        )
    if pred.shape != actual.shape:
        raise ValueError(
            f"mse_loss: length mismatch {pred.shape} vs {actual.shape}"
        )
    if pred.size == 0:
        raise ValueError("mse_loss: empty vectors")
    diff = pred.data - actual.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def dpred(g):
        return float(g) * 2.0 * diff / n

    def dactual(g):
        return float(g) * (-2.0) * diff / n

    return _emit("mse_loss", out, (pred, actual), (dpred, dactual))


def grad_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps one Tensor to a scalar Tensor.  Returns the maximum over
    coordinates of |analytic - numeric| / max(1, |analytic|).  The numeric
    probes run without a tape, so they cost forward passes only.
    """
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check: f must return a scalar Tensor")
    grads = tape.backward(out, params=[probe])
    analytic = grads[probe]

    numeric = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = base.copy()
        bumped[idx] = base[idx] + eps
        f_plus = f(Tensor(bumped)).item()
        bumped[idx] = base[idx] - eps
        f_minus = f(Tensor(bumped)).item()
        numeric[idx] = (f_plus - f_minus) / (2.0 * eps)
        it.iternext()

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
