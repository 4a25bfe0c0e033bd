"""Reverse-mode automatic differentiation on numpy arrays.

The graph is built define-by-run: every operation on a :class:`Tensor` that
requires gradients records its parents and a vector-Jacobian product (VJP).
VJPs are themselves written with differentiable tensor operations, so calling
:func:`grad` with ``create_graph=True`` yields gradients that are graph nodes
and can be differentiated again. That is what makes the meta-gradient through
an unrolled inner SGD step possible.

Example:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> (gx,) = grad((x * x).sum(), [x])
    >>> gx.data.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GradientError(RuntimeError):
    """Misuse of the gradient API (non-scalar loss, missing gradients...)."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where a finite value is required."""

    def __init__(self, message: str, details: Mapping | None = None):
        self.details = dict(details or {})
        super().__init__(message)


# ---------------------------------------------------------------------------
# global state: grad mode, precision, node ids

_local = threading.local()
_ids = itertools.count()
# ops whose VJP output is negated; mutation-testing hook for the oracle suite
_SIGN_FLIPS: set[str] = set()
PRIMITIVES = ("add", "sub", "mul", "div", "neg", "affine", "identity", "exp", "log", "sqrt", "pow",
              "relu", "reshape", "transpose", "broadcast", "sum_to", "sum", "slice", "scatter",
              "concat", "matmul", "unfold", "fold")


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _local.grad_enabled = bool(mode)
    try:
        yield
    finally:
        _local.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors.

    ``precision("float64")`` is the verification mode: inputs and parameters
    built inside the block are 64-bit, and numpy keeps every op at 64 bits.
    """
    prev = get_default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


@contextmanager
def inject_sign_error(*ops: str):
    """Negate the backward pass of the named ops (mutation-test fixture)."""
    unknown = sorted(set(ops) - set(PRIMITIVES))
    if unknown:
        raise ValueError(f"unknown primitive(s) {unknown}; choose from {PRIMITIVES}")
    added = [op for op in ops if op not in _SIGN_FLIPS]
    _SIGN_FLIPS.update(added)
    try:
        yield
    finally:
        _SIGN_FLIPS.difference_update(added)


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """An n-dimensional array that may take part in a computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op", "id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.op = "leaf"
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _node(cls, data, parents, vjp, op) -> "Tensor":
        t = object.__new__(cls)
        if isinstance(data, np.ndarray):
            data = data.view()
            data.flags.writeable = False
        t.data = data
        t.id = next(_ids)
        t.name = None
        t.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._vjp = vjp
        else:
            t.requires_grad = False
            t._parents = ()
            t._vjp = None
        return t

    # -- array-like surface
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        t = object.__new__(Tensor)
        t.data, t.requires_grad, t._parents, t._vjp = self.data, False, (), None
        t.op, t.id, t.name = "leaf", next(_ids), self.name
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, threshold=8)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    t = object.__new__(Tensor)
    t.data = np.asarray(x, dtype=dtype)
    t.requires_grad, t._parents, t._vjp = False, (), None
    t.op, t.id, t.name = "const", next(_ids), None
    return t


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _wrap(b, a.data)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _wrap(a, b.data), b
    return as_tensor(a), as_tensor(b)


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("add", a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return Tensor._node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("sub", a, b)

    def vjp(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return Tensor._node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("mul", a, b)

    def vjp(g, needs):
        return (sum_to(g * b, a.shape) if needs[0] else None,
                sum_to(g * a, b.shape) if needs[1] else None)

    return Tensor._node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bshape("div", a, b)

    def vjp(g, needs):
        ga = sum_to(g / b, a.shape) if needs[0] else None
        gb = sum_to(neg(g * a) / (b * b), b.shape) if needs[1] else None
        return ga, gb

    return Tensor._node(a.data / b.data, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def affine(a, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """Elementwise ``a * scale + shift`` with scalar constants."""
    a = as_tensor(a)
    scale = float(scale)
    out = a.data * a.data.dtype.type(scale) + a.data.dtype.type(shift)
    return Tensor._node(out, (a,), lambda g, needs: (affine(g, scale),), "affine")


def identity(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(a.data, (a,), lambda g, needs: (g,), "identity")


def exp(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (g * out,)

    out = Tensor._node(np.exp(a.data), (a,), vjp, "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(np.log(a.data), (a,), lambda g, needs: (g / a,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (g / affine(out, 2.0),)

    out = Tensor._node(np.sqrt(a.data), (a,), vjp, "sqrt")
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def vjp(g, needs):
        return (g * affine(power(a, p - 1.0), p),)

    return Tensor._node(a.data ** a.data.dtype.type(p), (a,), vjp, "pow")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def vjp(g, needs):
        return (g * _wrap(mask, g.data),)

    return Tensor._node(np.where(mask, a.data, 0).astype(a.dtype), (a,), vjp, "relu")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return Tensor._node(out, (a,), lambda g, needs: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._node(a.data.transpose(axes), (a,),
                        lambda g, needs: (transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return Tensor._node(out, (a,), lambda g, needs: (sum_to(g, a.shape),), "broadcast")


def _sum_to_data(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", x.shape, shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    if x.shape != shape:
        raise ShapeError("sum_to", x.shape, shape)
    return x


def sum_to(a, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _sum_to_data(a.data, shape)
    return Tensor._node(out, (a,), lambda g, needs: (broadcast_to(g, a.shape),), "sum_to")


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._node(np.asarray(out), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return affine(reduce_sum(a, axes, keepdims), 1.0 / n)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g, needs):
        return (scatter(g, idx, a.shape),)

    return Tensor._node(np.array(out, copy=True), (a,), vjp, "slice")


def scatter(a, idx, shape) -> Tensor:
    """Place ``a`` at ``idx`` of a zero array of ``shape`` (adjoint of slicing)."""
    a = as_tensor(a)
    out = np.zeros(shape, dtype=a.dtype)
    np.add.at(out, idx, a.data)
    return Tensor._node(out, (a,), lambda g, needs: (getitem(g, idx),), "scatter")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * nd
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._node(data, tuple(tensors), vjp, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g, needs):
        ga = sum_to(matmul(g, swapaxes(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(swapaxes(a), g), b.shape) if needs[1] else None
        return ga, gb

    return Tensor._node(a.data @ b.data, (a, b), vjp, "matmul")


def swapaxes(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def unfold(x, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """im2col: (N, C, H, W) -> (N, C*k*k, Ho*Wo), rows ordered (c, i, j)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("unfold", x.shape, ("N", "C", "H", "W"))
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError("unfold", x.shape, (kernel, kernel))
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

    def vjp(g, needs):
        return (fold(g, x.shape, kernel, stride, padding),)

    return Tensor._node(cols.reshape(n, c * kernel * kernel, ho * wo), (x,), vjp, "unfold")


def fold(cols, shape, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """col2im, the adjoint of :func:`unfold` (overlapping entries are summed)."""
    cols = as_tensor(cols)
    n, c, h, w = shape
    ho, wo = _conv_out(h, kernel, stride, padding), _conv_out(w, kernel, stride, padding)
    if cols.shape != (n, c * kernel * kernel, ho * wo):
        raise ShapeError("fold", cols.shape, (n, c * kernel * kernel, ho * wo))
    c6 = cols.data.reshape(n, c, kernel, kernel, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += c6[:, :, i, j]
    if padding:
        out = np.ascontiguousarray(out[:, :, padding:padding + h, padding:padding + w])

    def vjp(g, needs):
        return (unfold(g, kernel, stride, padding),)

    return Tensor._node(out, (cols,), vjp, "fold")


def conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an (O, C, k, k) kernel, no bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, _, h, w = x.shape
    o, c, k, _ = weight.shape
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    cols = unfold(x, k, stride, padding)
    out = matmul(reshape(weight, (o, c * k * k)), cols)
    return reshape(out, (n, o, ho, wo))


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide ``kernel``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError("avg_pool", x.shape, (kernel, kernel))
    r = reshape(x, (n, c, h // kernel, kernel, w // kernel, kernel))
    return reduce_mean(r, axis=(3, 5))


def global_avg_pool(x) -> Tensor:
    return reduce_mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# composite ops


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    sq = reduce_sum(x * x, axis=axis, keepdims=True)
    if np.any(sq.data == 0):
        raise ValueError("l2_normalize: zero-norm vector has no direction")
    return x / sqrt(sq)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    # the shift is a constant: log-softmax does not depend on it
    shift = _wrap(x.data.max(axis=axis, keepdims=True), x.data)
    xs = x - shift
    return xs - log(reduce_sum(exp(xs), axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


# ---------------------------------------------------------------------------
# backward


def _collect(output: Tensor, inputs: Sequence[Tensor]) -> list[Tensor]:
    """Nodes on some path from an input to ``output``, in ascending id order."""
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(t._parents)
    wanted = {t.id for t in inputs}
    useful: set[int] = set()
    nodes = sorted(seen.values(), key=lambda t: t.id)
    for t in nodes:
        if t.id in wanted or any(p.id in useful for p in t._parents):
            useful.add(t.id)
    return [t for t in nodes if t.id in useful]


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False, check_finite: bool = True) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    Inputs not reachable from ``output`` get a zero gradient of their shape.
    With ``create_graph`` the backward pass is itself recorded, so the returned
    gradients can be differentiated again.
    """
    if grad_output is None:
        if output.size != 1:
            raise GradientError(f"grad: loss must be scalar, got shape {output.shape}")
        grad_output = np.ones_like(output.data)
    inputs = list(inputs)
    nodes = _collect(output, inputs)
    useful = {t.id for t in nodes}
    grads: dict[int, Tensor] = {}
    with set_grad_enabled(create_graph):
        if output.id in useful:
            grads[output.id] = as_tensor(grad_output) if create_graph else _wrap(grad_output, output.data)
        keep = {t.id for t in inputs}
        for node in reversed(nodes):
            g = grads.get(node.id) if node.id in keep else grads.pop(node.id, None)
            if g is None or node._vjp is None:
                continue
            needs = tuple(p.id in useful for p in node._parents)
            pgrads = node._vjp(g, needs)
            flip = node.op in _SIGN_FLIPS
            for p, pg, need in zip(node._parents, pgrads, needs):
                if not need or pg is None:
                    continue
                if flip:
                    pg = neg(pg)
                prev = grads.get(p.id)
                grads[p.id] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(t.id)
        if g is None:
            g = _wrap(np.zeros_like(t.data))
        out.append(g)
    if check_finite:
        bad = [i for i, g in enumerate(out) if not np.all(np.isfinite(g.data))]
        if bad:
            names = [inputs[i].name or f"input[{i}]" for i in bad]
            raise NumericError(f"non-finite gradient for {', '.join(names)}",
                               {"inputs": names})
    return out


def grad_map(output: Tensor, params: Mapping[str, Tensor], names: Iterable[str] | None = None,
             create_graph: bool = False) -> dict[str, Tensor]:
    """Like :func:`grad` but keyed by parameter name."""
    names = list(params if names is None else names)
    gs = grad(output, [params[n] for n in names], create_graph=create_graph, check_finite=False)
    bad = [n for n, g in zip(names, gs) if not np.all(np.isfinite(g.data))]
    if bad:
        raise NumericError(f"non-finite gradient for {', '.join(bad)}", {"params": bad})
    return dict(zip(names, gs))


def global_norm(grads: Mapping[str, Tensor]) -> Tensor:
    total = None
    for g in grads.values():
        s = reduce_sum(g * g)
        total = s if total is None else total + s
    if total is None:
        return _wrap(0.0)
    return sqrt(total)


def clip_by_global_norm(grads: Mapping[str, Tensor], max_norm: float
                        ) -> tuple[dict[str, Tensor], float, float]:
    """Rescale ``grads`` so their joint l2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before, norm_after)``. The rescaling factor is a
    graph node, so clipping stays differentiable when the gradients are.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    value = float(norm.data)
    if value <= max_norm:
        return dict(grads), value, value
    scale = affine(power(norm, -1.0), max_norm)
    return {k: g * scale for k, g in grads.items()}, value, float(max_norm)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], lr: float,
             names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Differentiable ``phi' = phi - lr * grad`` over ``names`` (default: all).

    Parameters outside ``names`` are passed through unchanged. The result is
    a new mapping of graph nodes; nothing is mutated.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    names = list(params if names is None else names)
    missing = [n for n in names if n not in grads]
    if missing:
        raise GradientError(f"sgd_step: no gradient for {', '.join(missing)}")
    out = dict(params)
    for n in names:
        out[n] = params[n] - affine(grads[n], lr)
    return out


__all__ = [
    "Tensor", "ShapeError", "GradientError", "NumericError",
    "add", "sub", "mul", "div", "neg", "affine", "identity", "exp", "log", "sqrt",
    "power", "relu", "reshape", "transpose", "broadcast_to", "sum_to", "reduce_sum",
    "reduce_mean", "getitem", "scatter", "concat", "matmul", "unfold", "fold",
    "conv2d", "avg_pool2d", "global_avg_pool", "l2_normalize", "log_softmax",
    "softmax", "grad", "grad_map", "global_norm", "clip_by_global_norm", "sgd_step",
    "no_grad", "set_grad_enabled", "is_grad_enabled", "precision",
    "get_default_dtype", "inject_sign_error", "as_tensor",
]
