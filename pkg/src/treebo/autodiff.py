"""Reverse-mode automatic differentiation on numpy arrays.

A small tape engine: ops build a graph of ``Tensor`` nodes, ``backward``
replays it in reverse topological order. Everything is float64. Besides the
usual arithmetic this carries three fused primitives the surrogate needs:
row-wise softmax, layer normalization, and a Gaussian log-marginal-likelihood
node with an analytic kernel-matrix gradient (so Cholesky internals never
need differentiating).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

_SQRT5 = np.sqrt(5.0)


class CholeskyError(np.linalg.LinAlgError):
    """Cholesky failed even after maximum jitter escalation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = backward is not None and any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # -- graph traversal ----------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of this (scalar) node into every leaf."""
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return self

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def item(self):
        return float(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(data):
    """A trainable leaf tensor (gradients accumulate here)."""
    t = Tensor(data)
    t.requires_grad = True
    return t


def constant(data):
    return Tensor(data)


def _accum(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return Tensor(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return Tensor(np.log(a.data), (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return Tensor(out_data, (a,), backward)


def power(a, p: float):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return Tensor(a.data ** p, (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return Tensor(a.data * mask, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return Tensor(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)

    def backward(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return Tensor(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def getitem(a, key):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return Tensor(a.data[key], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gather(table, indices):
    """Embedding lookup: rows of ``table`` selected by an integer array."""
    table = as_tensor(table)
    indices = np.asarray(indices)

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, indices, g)

    return Tensor(table.data[indices], (table,), backward)


# ---------------------------------------------------------------------------
# fused primitives

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accum(a, p * (g - inner))

    return Tensor(p, (a,), backward)


def layernorm(a, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=reduce_axes))
        _accum(bias, g.sum(axis=reduce_axes))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gx - m1 - xhat * m2))

    return Tensor(out_data, (a, gain, bias), backward)


def matern52_from_sqdist(sqdist, lengthscale, outputscale2):
    """Matérn-5/2 kernel evaluated on squared distances.

    Formulated in squared distances so the gradient stays finite on the
    diagonal (d k / d D is bounded at D = 0, unlike d k / d r).
    """
    sqdist, lengthscale, outputscale2 = (
        as_tensor(sqdist), as_tensor(lengthscale), as_tensor(outputscale2))
    D = np.maximum(sqdist.data, 0.0)
    ell = float(lengthscale.data)
    s2 = float(outputscale2.data)
    a_coef = _SQRT5 / ell
    r = np.sqrt(D)
    ar = a_coef * r
    decay = np.exp(-ar)
    poly = 1.0 + ar + (a_coef * a_coef / 3.0) * D
    k = s2 * poly * decay

    def backward(g):
        _accum(sqdist, g * (-(s2 * a_coef * a_coef / 6.0) * (1.0 + ar) * decay))
        if lengthscale.requires_grad:
            dk_dell = (s2 * a_coef * a_coef / (3.0 * ell)) * D * (1.0 + ar) * decay
            _accum(lengthscale, np.array((g * dk_dell).sum()))
        if outputscale2.requires_grad:
            _accum(outputscale2, np.array((g * poly * decay).sum()))

    return Tensor(k, (sqdist, lengthscale, outputscale2), backward)


def pairwise_sqdist(z):
    """All-pairs squared Euclidean distances of the rows of ``z`` (N x d)."""
    z = as_tensor(z)
    sq = sum_(mul(z, z), axis=1, keepdims=True)            # (N, 1)
    cross = matmul(z, swapaxes(z, 0, 1))                    # (N, N)
    d = add(add(sq, swapaxes(sq, 0, 1)), mul(cross, -2.0))
    return d


def cross_sqdist(za, zb):
    """Squared distances between rows of ``za`` (A x d) and ``zb`` (B x d)."""
    za, zb = as_tensor(za), as_tensor(zb)
    sa = sum_(mul(za, za), axis=1, keepdims=True)           # (A, 1)
    sb = sum_(mul(zb, zb), axis=1, keepdims=True)           # (B, 1)
    cross = matmul(za, swapaxes(zb, 0, 1))                  # (A, B)
    return add(add(sa, swapaxes(sb, 0, 1)), mul(cross, -2.0))


def cholesky_with_jitter(K):
    """Cholesky of a symmetric matrix, escalating relative jitter on failure.

    Returns (L, jitter). Raises CholeskyError once the jitter ladder
    (1e-6 .. 1e-2 of the mean diagonal) is exhausted.
    """
    K = np.asarray(K, dtype=np.float64)
    try:
        return np.linalg.cholesky(K), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(K)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jitter = 1e-6 * scale
    while jitter <= 1e-2 * scale:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0])), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyError(
        f"matrix not positive definite after jitter escalation to {jitter / scale:.0e} x mean diag"
    )


def gaussian_nll(K, y):
    """Full negative log marginal likelihood 0.5 (yᵀK⁻¹y + log|K| + N log 2π).

    ``K`` is the (tape-tracked) covariance including observation noise; ``y``
    is a constant vector. The backward pass uses the analytic gradient
    0.5 (K⁻¹ − ααᵀ) with α = K⁻¹y.
    """
    K = as_tensor(K)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.size
    L, _ = cholesky_with_jitter(K.data)
    half = solve_triangular(L, y, lower=True, check_finite=False)
    alpha = solve_triangular(L.T, half, lower=False, check_finite=False)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    value = 0.5 * (y @ alpha + logdet + n * np.log(2.0 * np.pi))

    def backward(g):
        eye = np.eye(n)
        half_inv = solve_triangular(L, eye, lower=True, check_finite=False)
        K_inv = solve_triangular(L.T, half_inv, lower=False, check_finite=False)
        _accum(K, float(g) * 0.5 * (K_inv - np.outer(alpha, alpha)))

    return Tensor(value, (K,), backward)
