"""Reverse-mode automatic differentiation on numpy arrays.

A small tape engine whose backward passes are themselves built from
differentiable ops, so second-order quantities (Hessian-vector products,
mixed parameter blocks) come out of repeated differentiation instead of
explicit matrix construction.
"""
from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Array node in the computation graph.

    ``data`` is always a float64 ndarray. Non-leaf nodes keep their parents
    and a vjp closure mapping the output cotangent to parent cotangents.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        if isinstance(data, np.ndarray) and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def leaf(x) -> Tensor:
    """Differentiable leaf (a copy, so callers keep ownership of ``x``)."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _make(data, parents, vjp) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp)
    return Tensor(data)


def _sum_to_shape(g: Tensor, shape) -> Tensor:
    """Reduce a broadcasted cotangent back to ``shape``."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ts) in enumerate(zip(g.data.shape, shape)) if ts == 1 and gs != 1
    )
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(cot):
        return (_sum_to_shape(cot, a.data.shape), _sum_to_shape(cot, b.data.shape))

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(cot):
        return (_sum_to_shape(cot, a.data.shape), _sum_to_shape(neg(cot), b.data.shape))

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(cot):
        return (_sum_to_shape(mul(cot, b), a.data.shape), _sum_to_shape(mul(cot, a), b.data.shape))

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(cot):
        ga = div(cot, b)
        gb = neg(div(mul(cot, a), mul(b, b)))
        return (_sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape))

    return _make(a.data / b.data, (a, b), vjp)


def neg(a):
    a = as_tensor(a)

    def vjp(cot):
        return (neg(cot),)

    return _make(-a.data, (a,), vjp)


def power(a, p):
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    p = float(p)

    def vjp(cot):
        return (mul(cot, mul(p, power(a, p - 1.0))),)

    return _make(a.data ** p, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(cot):
        return (mul(cot, out),)

    out = _make(out_data, (a,), vjp)
    return out


def log(a):
    a = as_tensor(a)

    def vjp(cot):
        return (div(cot, a),)

    return _make(np.log(a.data), (a,), vjp)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(cot):
        return (mul(cot, sub(1.0, mul(out, out))),)

    out = _make(out_data, (a,), vjp)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(cot):
        return (mul(cot, mul(out, sub(1.0, out))),)

    out = _make(out_data, (a,), vjp)
    return out


def relu(a):
    """max(x, 0); the subgradient at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def vjp(cot):
        return (mul(cot, mask),)

    return _make(np.maximum(a.data, 0.0), (a,), vjp)


def clip_min(a, floor):
    """max(x, floor); gradient is zero where the floor binds."""
    a = as_tensor(a)
    floor = float(floor)
    mask = Tensor((a.data > floor).astype(np.float64))

    def vjp(cot):
        return (mul(cot, mask),)

    return _make(np.maximum(a.data, floor), (a,), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")

    def vjp(cot):
        return (matmul(cot, transpose(b)), matmul(transpose(a), cot))

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a):
    a = as_tensor(a)

    def vjp(cot):
        return (transpose(cot),)

    return _make(a.data.T, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old_shape = a.data.shape

    def vjp(cot):
        return (reshape(cot, old_shape),)

    return _make(a.data.reshape(shape), (a,), vjp)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    in_shape = a.data.shape
    axes = _normalize_axes(axis, a.data.ndim)

    def vjp(cot):
        g = cot
        if not keepdims and in_shape:
            kd = list(in_shape)
            for ax in axes:
                kd[ax] = 1
            g = reshape(g, tuple(kd))
        return (broadcast_to(g, in_shape),)

    return _make(a.data.sum(axis=axes if axis is not None else None, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape):
    a = as_tensor(a)
    in_shape = a.data.shape

    def vjp(cot):
        return (_sum_to_shape(cot, in_shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def take(a, key):
    """Basic (slice/int) indexing; integer-array gathers are not supported."""
    a = as_tensor(a)
    in_shape = a.data.shape

    def vjp(cot):
        return (scatter(cot, key, in_shape),)

    return _make(a.data[key], (a,), vjp)


def scatter(a, key, shape):
    """Place ``a`` in a zero array of ``shape`` at basic index ``key``."""
    a = as_tensor(a)
    data = np.zeros(shape, dtype=np.float64)
    data[key] = a.data

    def vjp(cot):
        return (take(cot, key),)

    return _make(data, (a,), vjp)


def softmax(a, axis=-1):
    """Row-stable softmax; the max shift is a constant, which is exact."""
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def vdot(a, b):
    """Scalar inner product of same-shaped arrays."""
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt, create_graph=False):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are themselves
    differentiable, enabling Hessian-vector and mixed second-order products.
    """
    if output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    order = _topo(output)
    cot = {id(output): constant(np.ones_like(output.data))}
    ctx = no_grad() if not create_graph else _NullCtx()
    with ctx:
        for node in reversed(order):
            g = cot.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = cot.get(id(parent))
                cot[id(parent)] = pg if acc is None else add(acc, pg)
    out = []
    for w in wrt:
        g = cot.get(id(w))
        out.append(g if g is not None else constant(np.zeros_like(w.data)))
    return out


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# numpy-facing derivative helpers
# ---------------------------------------------------------------------------


def value_and_grad(fn, x: np.ndarray):
    """``fn`` maps a Tensor to a scalar Tensor; returns (value, gradient)."""
    p = leaf(x)
    out = fn(p)
    (g,) = grad(out, [p])
    return float(out.data), g.data


def gradient(fn, x: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar-valued ``fn`` at ``x``."""
    return value_and_grad(fn, x)[1]


def hvp_operator(fn, x: np.ndarray):
    """Hessian-vector product operator for ``fn`` at ``x``.

    The gradient graph is built once; each call differentiates the inner
    product ``<grad, v>`` again, so no Hessian is ever materialized.
    """
    p = leaf(x)
    out = fn(p)
    (g,) = grad(out, [p], create_graph=True)

    def apply(v: np.ndarray) -> np.ndarray:
        s = vdot(g, constant(v))
        (hv,) = grad(s, [p])
        return hv.data

    return apply


def hessian_vector_product(fn, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return hvp_operator(fn, x)(v)


def mixed_vjp_operator(fn, phi: np.ndarray, theta: np.ndarray):
    """Second-order cross-block operator for ``fn(phi, theta)``.

    Returns a callable mapping a vector ``v`` over theta to the phi-gradient
    of ``<v, grad_theta fn>``, i.e. ``v^T d^2 fn / (d phi d theta)``.
    """
    p = leaf(phi)
    t = leaf(theta)
    out = fn(p, t)
    (gt,) = grad(out, [t], create_graph=True)

    def apply(v: np.ndarray) -> np.ndarray:
        s = vdot(gt, constant(v))
        (gp,) = grad(s, [p])
        return gp.data

    return apply


def mixed_vjp(fn, phi: np.ndarray, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    return mixed_vjp_operator(fn, phi, theta)(v)
