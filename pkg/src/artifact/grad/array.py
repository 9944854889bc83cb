"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive records a backward rule written with the same primitives,
so gradients are themselves differentiable when ``create_graph=True``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

try:  # numeric kernels for 3-D convolution; the graph logic stays here
    import torch as _torch

    _torch.set_num_threads(1)
except ImportError:  # pragma: no cover
    _torch = None

_GRAD_ENABLED = True
USE_TORCH_KERNELS = _torch is not None


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Array:
    """A node in the computation graph wrapping an ``np.ndarray``."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Array):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Array, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Array:
        return Array(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Array(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_array(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_array(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_array(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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


def as_array(x, dtype=None) -> Array:
    if isinstance(x, Array):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or np.float32)
    return Array(arr)


def _make(data: np.ndarray, parents: Sequence[Array], backward: Callable) -> Array:
    out = Array(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting helpers -------------------------------------------------------


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = g.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(x: Array, shape: tuple[int, ...]) -> Array:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make(_sum_to_shape(x.data, shape), (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Array, shape: tuple[int, ...]) -> Array:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _make(data, (x,), lambda g: (sum_to(g, src),))


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Array:
    a = as_array(a)
    b = as_array(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def neg(a: Array) -> Array:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Array:
    a = as_array(a)
    b = as_array(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(mul(g, b), sa) if a.requires_grad else None
        gb = sum_to(mul(g, a), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Array:
    a = as_array(a)
    b = as_array(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


def power(a: Array, exponent: float) -> Array:
    def backward(g):
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    return _make(a.data**exponent, (a,), backward)


def exp(a: Array) -> Array:
    out_holder: list[Array] = []

    def backward(g):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.data), (a,), backward)
    out_holder.append(out if out.requires_grad else Array(out.data))
    return out


def log(a: Array) -> Array:
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),))


def sigmoid(a: Array) -> Array:
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    holder: list[Array] = []

    def backward(g):
        s_ = holder[0]
        return (mul(g, mul(s_, add(neg(s_), 1.0))),)

    out = _make(s, (a,), backward)
    holder.append(out)
    return out


def relu(a: Array) -> Array:
    mask = Array((a.data > 0).astype(a.dtype))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),))


def abs_(a: Array) -> Array:
    sign = Array(np.sign(a.data).astype(a.dtype))
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def sqrt(a: Array) -> Array:
    return power(a, 0.5)


# -- reductions and shape ---------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Array, axis=None, keepdims: bool = False) -> Array:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    data = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(data, dtype=a.dtype), (a,), backward)


def mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Array, shape) -> Array:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def transpose(a: Array, axes=None) -> Array:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def getitem(a: Array, index) -> Array:
    src = a.shape
    return _make(a.data[index], (a,), lambda g: (scatter(g, src, index),))


def scatter(g: Array, shape: tuple[int, ...], index) -> Array:
    """Place ``g`` into a zero array of ``shape`` at a basic-slicing ``index``."""
    out = np.zeros(shape, dtype=g.dtype)
    out[index] = g.data
    return _make(out, (g,), lambda gg: (getitem(gg, index),))


def take(a: Array, indices: np.ndarray, axis: int) -> Array:
    axis = axis % a.ndim
    src = a.shape
    idx = np.asarray(indices, dtype=np.int64)
    return _make(np.take(a.data, idx, axis=axis), (a,), lambda g: (put_add(g, src, idx, axis),))


def put_add(g: Array, shape: tuple[int, ...], indices: np.ndarray, axis: int) -> Array:
    """Adjoint of :func:`take`: accumulate slices of ``g`` into ``shape``."""
    out = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, indices, np.moveaxis(g.data, axis, 0))
    return _make(out, (g,), lambda gg: (take(gg, indices, axis),))


def concat(arrays: Sequence[Array], axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    axis = axis % arrays[0].ndim
    sizes = [x.shape[axis] for x in arrays]
    bounds = np.cumsum([0] + sizes)
    ndim = arrays[0].ndim

    def backward(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _make(np.concatenate([x.data for x in arrays], axis=axis), arrays, backward)


def matmul(a: Array, b: Array) -> Array:
    a = as_array(a)
    b = as_array(b, a.dtype)

    def backward(g):
        ga = matmul(g, transpose(b, None)) if a.requires_grad else None
        gb = matmul(transpose(a, None), g) if b.requires_grad else None
        return ga, gb

    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), backward)


# -- 3-D convolution -------------------------------------------------------------
# Layout: input (N, C, X, Y, Z); weight (O, C, kx, ky, kz).
# conv, conv_input_grad and conv_weight_grad are mutually adjoint, which keeps
# the family closed under differentiation.


def _conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _offsets(kshape):
    return [(i, j, k) for i in range(kshape[0]) for j in range(kshape[1]) for k in range(kshape[2])]


def _window(off, out_ext, stride):
    return tuple(slice(o, o + s * (e - 1) + 1, s) for o, e, s in zip(off, out_ext, stride))


def _conv_fwd(x, w, stride, pad):
    n, c = x.shape[:2]
    kshape = w.shape[2:]
    out_ext = tuple(_conv_out_extent(x.shape[2 + i], kshape[i], stride[i], pad[i]) for i in range(3))
    if min(out_ext) < 1:
        raise ValueError(f"convolution output extent {out_ext} is empty for input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else x
    acc = np.zeros((w.shape[0], n) + out_ext, dtype=x.dtype)
    for off in _offsets(kshape):
        win = xp[(slice(None), slice(None)) + _window(off, out_ext, stride)]
        acc += np.tensordot(w[(slice(None), slice(None)) + off], win, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))


def _conv_bwd_input(g, w, in_shape, stride, pad):
    kshape = w.shape[2:]
    out_ext = g.shape[2:]
    padded = tuple(in_shape[2 + i] + 2 * pad[i] for i in range(3))
    acc = np.zeros((in_shape[1], in_shape[0]) + padded, dtype=g.dtype)
    for off in _offsets(kshape):
        contrib = np.tensordot(w[(slice(None), slice(None)) + off], g, axes=([0], [1]))
        acc[(slice(None), slice(None)) + _window(off, out_ext, stride)] += contrib
    crop = tuple(slice(p, p + n) for p, n in zip(pad, in_shape[2:]))
    return np.ascontiguousarray(acc[(slice(None), slice(None)) + crop].transpose(1, 0, 2, 3, 4))


def _conv_bwd_weight(x, g, kshape, stride, pad):
    out_ext = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else x
    gw = np.zeros((g.shape[1], x.shape[1]) + tuple(kshape), dtype=x.dtype)
    for off in _offsets(kshape):
        win = xp[(slice(None), slice(None)) + _window(off, out_ext, stride)]
        gw[(slice(None), slice(None)) + off] = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return gw


def _kernel_fwd(x, w, stride, pad):
    if USE_TORCH_KERNELS:
        out = _torch.nn.functional.conv3d(_torch.from_numpy(x), _torch.from_numpy(w), stride=stride, padding=pad)
        return out.numpy()
    return _conv_fwd(x, w, stride, pad)


def _kernel_bwd_input(g, w, in_shape, stride, pad):
    if USE_TORCH_KERNELS:
        out = _torch.nn.grad.conv3d_input(in_shape, _torch.from_numpy(w), _torch.from_numpy(np.ascontiguousarray(g)),
                                          stride=stride, padding=pad)
        return out.numpy()
    return _conv_bwd_input(g, w, in_shape, stride, pad)


def _kernel_bwd_weight(x, g, kshape, stride, pad):
    if USE_TORCH_KERNELS:
        wshape = (g.shape[1], x.shape[1]) + tuple(kshape)
        out = _torch.nn.grad.conv3d_weight(_torch.from_numpy(x), wshape, _torch.from_numpy(np.ascontiguousarray(g)),
                                           stride=stride, padding=pad)
        return out.numpy()
    return _conv_bwd_weight(x, g, kshape, stride, pad)


def conv3d(x: Array, w: Array, stride=(1, 1, 1), pad=(0, 0, 0)) -> Array:
    stride, pad = tuple(stride), tuple(pad)
    in_shape, kshape = x.shape, w.shape[2:]
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d shape mismatch: input {x.shape}, weight {w.shape}")

    def backward(g):
        gx = conv3d_input_grad(g, w, in_shape, stride, pad) if x.requires_grad else None
        gw = conv3d_weight_grad(x, g, kshape, stride, pad) if w.requires_grad else None
        return gx, gw

    return _make(_kernel_fwd(x.data, w.data, stride, pad), (x, w), backward)


def conv3d_input_grad(g: Array, w: Array, in_shape, stride, pad) -> Array:
    kshape = w.shape[2:]

    def backward(h):
        gg = conv3d(h, w, stride, pad) if g.requires_grad else None
        gw = conv3d_weight_grad(h, g, kshape, stride, pad) if w.requires_grad else None
        return gg, gw

    return _make(_kernel_bwd_input(g.data, w.data, in_shape, stride, pad), (g, w), backward)


def conv3d_weight_grad(x: Array, g: Array, kshape, stride, pad) -> Array:
    in_shape = x.shape

    def backward(h):
        gx = conv3d_input_grad(g, h, in_shape, stride, pad) if x.requires_grad else None
        gg = conv3d(x, h, stride, pad) if g.requires_grad else None
        return gx, gg

    return _make(_kernel_bwd_weight(x.data, g.data, kshape, stride, pad), (x, g), backward)


# -- graph traversal -----------------------------------------------------------------


def _toposort(root: Array) -> list[Array]:
    order: list[Array] = []
    seen: set[int] = set()
    stack: list[tuple[Array, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(
    output: Array,
    inputs: Iterable[Array],
    grad_output: Array | None = None,
    create_graph: bool = False,
) -> list[Array]:
    """Gradients of ``output`` with respect to ``inputs``.

    Unreachable inputs get zero gradients. With ``create_graph`` the returned
    gradients carry their own graph and can be differentiated again.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad of a non-scalar output needs grad_output")
        grad_output = Array(np.ones_like(output.data))
    keep = {id(x) for x in inputs}
    grads: dict[int, Array] = {id(output): grad_output}
    if output.requires_grad:
        with enable_grad(create_graph):
            for node in reversed(_toposort(output)):
                g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
                if g is None or node._backward is None:
                    continue
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        result.append(g if g is not None else Array(np.zeros_like(x.data)))
    return result
