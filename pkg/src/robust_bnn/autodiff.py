"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  While a :class:`GradTape` is
active on the current thread, every operation with at least one input that
requires a gradient is appended to the tape; :func:`backward` then walks the
tape once in reverse.

Besides ordinary gradients of a scalar, the tape supports a *per-example*
mode: given a vector of per-example losses over a batch, it returns one
gradient per example for every parameter.  Tensors whose leading axis is the
batch axis are marked ``batched=True``; in per-example mode the gradient of a
non-batched tensor gains a leading batch axis instead of being summed over it.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor", "GradTape", "OuterGrad", "backward", "as_tensor",
    "matmul", "transpose", "reshape", "add", "sub", "mul", "div", "neg",
    "exp", "log", "abs", "relu", "softplus", "sigmoid", "square", "maximum",
    "where", "sum", "mean", "softmax", "log_softmax", "logsumexp", "stack",
    "concat", "pick",
]

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional array of 64-bit reals.

    ``requires_grad`` marks a differentiation leaf.  ``batched`` declares that
    axis 0 indexes independent examples (only relevant for per-example
    gradients).
    """

    __slots__ = ("data", "requires_grad", "batched", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad=False, batched=False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data must be finite")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.batched = bool(batched)

    @classmethod
    def _wrap(cls, arr, requires_grad, batched):
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.batched = batched
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

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __float__(self):
        return self.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flags = "".join([", requires_grad" if self.requires_grad else "",
                         ", batched" if self.batched else ""])
        return f"Tensor({self.data!r}{flags})"

    def detach(self):
        return Tensor._wrap(self.data, False, self.batched)

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

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class OuterGrad:
    """Per-example matrix gradients kept in factored form.

    Example i's gradient is sum_p mult_p * outer(left_p[i], right_p[i]); a
    missing ``mult`` means 1.  Products of this form come from matmuls with
    a batched left operand, and are only densified when an op needs it.
    """

    __slots__ = ("terms",)

    def __init__(self, terms):
        self.terms = list(terms)

    @property
    def shape(self):
        left, right, _ = self.terms[0]
        return (left.shape[0], left.shape[1], right.shape[1])

    def transposed(self):
        return OuterGrad([(r, l, None if m is None else m.T) for l, r, m in self.terms])

    def scaled(self, mult):
        return OuterGrad([(l, r, mult if m is None else m * mult) for l, r, m in self.terms])

    def dense(self):
        out = None
        for left, right, mult in self.terms:
            part = left[:, :, None] * right[:, None, :]
            if mult is not None:
                part *= mult
            out = part if out is None else out + part
        return out

    def moments(self):
        """(sum over examples, sum over examples of the elementwise square)."""
        total = sq = 0.0
        for p, (lp, rp, mp) in enumerate(self.terms):
            part = lp.T @ rp
            total = total + (part if mp is None else part * mp)
            for q in range(p, len(self.terms)):
                lq, rq, mq = self.terms[q]
                cross = (lp * lq).T @ (rp * rq)
                for m in (mp, mq):
                    if m is not None:
                        cross = cross * m
                sq = sq + (cross if p == q else 2.0 * cross)
        return total, sq


def _dense(g):
    return g.dense() if isinstance(g, OuterGrad) else g


def _accumulate(a, b):
    if isinstance(a, OuterGrad) and isinstance(b, OuterGrad):
        return OuterGrad(a.terms + b.terms)
    return _dense(a) + _dense(b)


class _Node:
    __slots__ = ("out", "inputs", "backward", "factored")

    def __init__(self, out, inputs, backward, factored=False):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.factored = factored


class _Context:
    __slots__ = ("per_example", "batch")

    def __init__(self, per_example, batch):
        self.per_example = per_example
        self.batch = batch


class GradTape:
    """Records differentiable operations executed inside its ``with`` block.

    A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes = []
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("GradTape exited out of order")
        stack.pop()
        return False

    def _record(self, out, inputs, fn, factored=False):
        self.nodes.append(_Node(out, inputs, fn, factored))
        self._produced.add(id(out))

    def gradient(self, output, sources, per_example=False):
        """Gradients of ``output`` with respect to each tensor in ``sources``.

        Unreached sources get zeros.
        """
        grads = backward(self, output, per_example=per_example)
        out = []
        for s in sources:
            g = grads.get(s)
            if g is None:
                shape = s.shape
                if per_example and not s.batched:
                    shape = (output.shape[0],) + shape
                g = np.zeros(shape)
            out.append(g)
        return out


def backward(tape, output, per_example=False, factored=False):
    """Propagate from ``output`` back to the leaves recorded on ``tape``.

    Returns a dict mapping each reached leaf tensor to its gradient.  In the
    default mode ``output`` must hold a single value.  With
    ``per_example=True`` it must be a batched vector of per-example losses and
    each gradient carries a leading batch axis; with ``factored=True``
    per-example weight-matrix gradients may be returned as :class:`OuterGrad`.
    """
    if not isinstance(output, Tensor):
        raise UsageError("output must be a Tensor")
    if id(output) not in tape._produced:
        raise UsageError("output was not produced by an operation on this tape")
    if per_example:
        if not (output.batched and output.ndim == 1):
            raise UsageError("per-example backward needs a batched 1-D loss vector")
        ctx = _Context(True, output.shape[0])
        seed = np.ones(output.shape)
    else:
        if output.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
        ctx = _Context(False, None)
        seed = np.ones(output.shape)

    grads = {id(output): seed}
    tensors = {id(output): output}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if not node.factored:
            g = _dense(g)
        input_grads = node.backward(g, ctx)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if not isinstance(gi, OuterGrad):
                gi = _unbroadcast(gi, _grad_shape(t, ctx))
            key = id(t)
            if key in grads:
                grads[key] = _accumulate(grads[key], gi)
            else:
                grads[key] = gi
                tensors[key] = t
    out = {tensors[k]: v for k, v in grads.items() if k not in tape._produced}
    if not factored:
        out = {k: _dense(v) for k, v in out.items()}
    return out


def _grad_shape(t, ctx):
    if ctx.per_example and not t.batched:
        return (ctx.batch,) + t.shape
    return t.shape


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    if g.shape != tuple(shape):
        g = np.broadcast_to(g, shape).copy()
    return g


def _check_finite(arr, name):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite result in {name}")


def _make(arr, inputs, fn, name, factored=False):
    arr = np.asarray(arr, dtype=np.float64)
    _check_finite(arr, name)
    batched = any(t.batched for t in inputs)
    tape = _active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, tracked, batched)
    if tracked:
        tape._record(out, inputs, fn, factored)
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for {ndim}-d tensor")
        norm.append(a - ndim if a >= 0 else a)
    return tuple(norm)


def _no_batch_reduction(x, axes, ctx, name):
    if ctx.per_example and x.batched and (axes is None or -x.ndim in axes):
        raise UsageError(f"{name} over the batch axis is not allowed in per-example mode")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product; stacked operands follow numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def fn(g, ctx):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif ctx.per_example and (a.batched or b.batched):
            if b.batched:
                raise UsageError("per-example gradients need the batch on the left operand")
            if A.ndim != 2:
                raise UsageError("per-example matmul supports a 2-d batched operand only")
            gb = OuterGrad([(A, g, None)]) if B.ndim == 2 else A[:, :, None] * g[:, None, :]
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make(A @ B, (a, b), fn, "matmul")


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("transpose needs at least 2 dimensions")
    def fn(g, ctx):
        if isinstance(g, OuterGrad):
            return (g.transposed(),)
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(x.data, -1, -2), (x,), fn, "transpose", factored=True)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def fn(g, ctx):
        lead = g.shape[: g.ndim - out.ndim]
        return (g.reshape(lead + x.shape),)

    return _make(out, (x,), fn, "reshape")


def _getitem(x, index):
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (int, np.integer, slice)) and i is not Ellipsis:
            raise UsageError("only basic (int/slice) indexing is supported")
    out = x.data[index]

    def fn(g, ctx):
        lead = g.ndim - out.ndim
        full = np.zeros(g.shape[:lead] + x.shape)
        full[(slice(None),) * lead + index] = g
        return (full,)

    return _make(out.copy(), (x,), fn, "getitem")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g, ctx: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g, ctx: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g, ctx: (g * B, g * A), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NumericError("division by zero")
    out = A / B
    return _make(out, (a, b), lambda g, ctx: (g / B, -g * out / B), "div")


def neg(x):
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g, ctx: (-g,), "neg")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g, ctx: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    X = x.data
    if np.any(X <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(X), (x,), lambda g, ctx: (g / X,), "log")


def abs(x):
    """Absolute value; the derivative at exactly zero is taken as 0."""
    x = as_tensor(x)
    X = x.data

    def fn(g, ctx):
        if isinstance(g, OuterGrad):
            return (g.scaled(np.sign(X)),)
        return (g * np.sign(X),)

    return _make(np.abs(X), (x,), fn, "abs", factored=True)


def relu(x):
    x = as_tensor(x)
    X = x.data
    return _make(np.maximum(X, 0.0), (x,), lambda g, ctx: (g * (X > 0),), "relu")


def _sigmoid(X):
    e = np.exp(-np.abs(X))
    return np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g, ctx: (g * out * (1.0 - out),), "sigmoid")


def softplus(x):
    x = as_tensor(x)
    X = x.data
    out = np.log1p(np.exp(-np.abs(X))) + np.maximum(X, 0.0)
    return _make(out, (x,), lambda g, ctx: (g * _sigmoid(X),), "softplus")


def square(x):
    x = as_tensor(x)
    X = x.data
    return _make(X * X, (x,), lambda g, ctx: (2.0 * g * X,), "square")


def maximum(a, b):
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    take_a = A >= B
    return _make(np.where(take_a, A, B), (a, b),
                 lambda g, ctx: (g * take_a, g * ~take_a), "maximum")


def where(mask, a, b):
    """``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g, ctx: (g * mask, g * ~mask), "where")


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g, ctx):
        _no_batch_reduction(x, axes, ctx, "sum")
        lead = g.ndim - np.ndim(out)
        if not keepdims:
            g = np.expand_dims(g, axes if axes is not None else tuple(range(-x.ndim, 0)))
        return (np.broadcast_to(g, g.shape[:lead] + x.shape),)

    return _make(out, (x,), fn, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def logsumexp(x, axis=-1, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    X = x.data
    m = X.max(axis=axes, keepdims=True)
    z = np.exp(X - m)
    s = z.sum(axis=axes, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)
    p = z / s

    def fn(g, ctx):
        _no_batch_reduction(x, axes, ctx, "logsumexp")
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * p,)

    return _make(out, (x,), fn, "logsumexp")


def softmax(x, axis=-1):
    """Softmax along ``axis`` with max subtraction."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    X = x.data
    z = np.exp(X - X.max(axis=axes, keepdims=True))
    out = z / z.sum(axis=axes, keepdims=True)
    return _make(out, (x,),
                 lambda g, ctx: (out * (g - (g * out).sum(axis=axes, keepdims=True)),),
                 "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    X = x.data
    z = X - X.max(axis=axes, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axes, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g, ctx: (g - p * g.sum(axis=axes, keepdims=True),),
                 "log_softmax")


# ---------------------------------------------------------------- assembly


def stack(tensors, axis=-1):
    """Stack equally-shaped tensors along a new trailing axis."""
    if axis != -1:
        raise UsageError("stack supports axis=-1 only")
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise UsageError("stack needs at least one tensor")
    out = np.stack(np.broadcast_arrays(*[t.data for t in ts]), axis=-1)

    def fn(g, ctx):
        return tuple(g[..., i] for i in range(len(ts)))

    return _make(out, ts, fn, "stack")


def concat(tensors, axis=-1):
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise UsageError("concat needs at least one tensor")
    ax = _norm_axis(axis, ts[0].ndim)[0]
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def fn(g, ctx):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, ts, fn, "concat")


def pick(x, index):
    """Select ``x[..., index[...]]`` along the last axis (one entry per row)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[-1]
    if np.any(index < 0) or np.any(index >= n):
        raise UsageError(f"class index out of range [0, {n})")
    onehot = np.broadcast_to(index[..., None], x.shape[:-1] + (1,)) == np.arange(n)
    out = np.where(onehot, x.data, 0.0).sum(axis=-1)
    return _make(out, (x,), lambda g, ctx: (g[..., None] * onehot,), "pick")
