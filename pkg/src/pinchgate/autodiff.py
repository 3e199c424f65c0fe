"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds its output eagerly and, if any input requires a gradient,
records a closure that maps the output gradient to input gradients.
``backward`` walks that tape once in reverse topological order.

Shapes must match exactly; the only broadcast allowed is adding a 1-D row
bias to a 2-D matrix.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward_fn):
    """Wrap ``data`` as the output of an op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    Custom ops outside this module use this to join the tape.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return make_node(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return make_node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def exp(a):
    y = np.exp(a.data)
    return make_node(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return make_node(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a):
    y = np.array(expit(a.data))
    return make_node(y, (a,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return make_node(y, (a,), bwd)


def ste_round(m):
    """Round soft mask values to {0, 1} (ties go up); gradient passes straight through."""
    v = m.data
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ValueError("ste_round: values must lie in [0, 1]")
    return make_node((v >= 0.5).astype(np.float64), (m,), lambda g: (g,))


# reductions ------------------------------------------------------------


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    shape, n = a.shape, a.data.size
    return make_node(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


# linear algebra --------------------------------------------------------


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a):
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,))


def linear(x, w, b=None):
    """``x @ w.T + b`` with ``w`` laid out (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not fit weight {w.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd.T
    if b is None:
        return make_node(y, (x, w), lambda g: (g @ wd, g.T @ xd))
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    y = y + b.data
    return make_node(y, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def cols(x, start, stop):
    """Column slice ``x[:, start:stop]``."""
    shape = x.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return make_node(x.data[:, start:stop].copy(), (x,), bwd)


def concat_cols(parts):
    widths = [p.shape[1] for p in parts]
    if len({p.shape[0] for p in parts}) != 1:
        raise ValueError("concat_cols: row counts differ")
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

    return make_node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


# row-wise normalizers --------------------------------------------------


def softmax_rows(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (x,), bwd)


def log_softmax_rows(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make_node(y, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-10):
    """Normalize each row to zero mean and unit variance, then apply ``gain``/``bias``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bwd(g):
        gx = g * gain.data
        n = xd.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(y, (x, gain, bias), bwd)
