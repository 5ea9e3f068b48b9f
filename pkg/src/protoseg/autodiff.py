"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records its parents and a closure that pushes the output
gradient back to them.  Calling :meth:`Tensor.backward` on a scalar root
walks the tape in reverse topological order.  Operations whose inputs do
not require gradients record nothing, so frozen-model evaluation is cheap.

Broadcasting is limited to tensor/scalar pairs; anything else goes through
an explicit ``reshape`` or ``transpose``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "relu",
    "clamp_min",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "matmul",
    "softmax",
    "l2_normalize",
    "conv2d",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when an operation receives operands of incompatible shape."""

    def __init__(self, op, expected, actual):
        super().__init__(f"{op}: expected shape {expected}, got {actual}")
        self.op = op
        self.expected = expected
        self.actual = actual


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- graph -------------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward seed", "scalar root or explicit seed", self.shape)
            seed = np.ones_like(self.data)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != self.shape:
            raise ShapeError("backward seed", self.shape, seed.shape)

        order = []
        seen = set()
        stack = [(self, False)]
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

        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.reshape(g.sum(), shape)


# -- elementwise ---------------------------------------------------------------
def add(a, b):
    a, b = _pair(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k):
    a = as_tensor(a)
    k = float(k)

    def backward(g):
        return (g * k * a.data ** (k - 1.0),)

    return _result(a.data**k, (a,), backward, "power")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a):
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp_min(a, lo):
    """max(a, lo); gradient flows only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    return _result(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


# -- reductions and reshaping --------------------------------------------------
def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), backward, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"{a.size} elements", shape) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a, indices, axis):
    """Select ``indices`` along ``axis`` (gather); gradient scatters back."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take", "1-d index list", idx.shape)
    out = np.take(a.data, idx, axis=axis)
    unique = len(np.unique(idx)) == len(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        if unique:
            moved[idx] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(out, (a,), backward, "take")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"(m,k)@(k,n) with k={a.shape[-1]}", f"{a.shape}@{b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- composite primitives ----------------------------------------------------------
def softmax(a, axis=0):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def l2_normalize(a, axis=0, eps=1e-12):
    """Scale each slice along ``axis`` to unit norm; slices with norm < eps pass through."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    small = norm < eps
    safe = np.where(small, 1.0, norm)
    out = a.data / safe

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gn = (g - out * dot) / safe
        return (np.where(small, g, gn),)

    return _result(out, (a,), backward, "l2_normalize")


def _im2col(x, k, p):
    """[B,C,H,W] -> [C*k*k, B*Ho*Wo] patch matrix for a stride-1 correlation."""
    nb, c = x.shape[:2]
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, -1)
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, -1)


def conv2d(x, w, b=None, padding=0):
    """Cross-correlation of ``x`` [C,H,W] or [B,C,H,W] with ``w`` [Co,C,k,k].

    ``b`` is an optional per-output-channel bias of shape [Co].
    """
    x, w = as_tensor(x), as_tensor(w)
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError("conv2d input", "[C,H,W] or [B,C,H,W]", x.shape)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d kernel", "[Co,Ci,k,k]", w.shape)
    xd = x.data if batched else x.data[None]
    nb, ci, h, wd = xd.shape
    co, wci, k, _ = w.shape
    if wci != ci:
        raise ShapeError("conv2d channels", f"input with {wci} channels", f"{ci} channels")
    p = int(padding)
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d spatial", f">= {k - 2 * p} per side", (h, wd))
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ShapeError("conv2d bias", (co,), b.shape)
        parents.append(b)

    wmat = w.data.reshape(co, -1)
    cols = _im2col(xd, k, p)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, nb, ho, wo).transpose(1, 0, 2, 3))
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g if batched else g[None]
        gm = g4.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if p > k - 1:
                raise ShapeError("conv2d backward", f"padding <= {k - 1}", p)
            # input gradient = correlation of the output gradient with the
            # spatially flipped, channel-transposed kernel
            wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, -1)
            gx = (wt @ _im2col(g4, k, k - 1 - p)).reshape(ci, nb, h, wd).transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx) if batched else np.ascontiguousarray(gx[0])
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=1))
        return grads

    return _result(out, parents, backward, "conv2d")


# -- graph wrapper and verification ------------------------------------------------
class Graph:
    """A differentiable expression built by calling ``fn`` on named tensors.

    ``evaluate`` binds inputs and runs the forward pass; ``backprop`` then
    returns gradients for every input listed in ``wrt``.
    """

    def __init__(self, fn, wrt=()):
        self.fn = fn
        self.wrt = tuple(wrt)
        self._leaves = None
        self._root = None

    def evaluate(self, inputs):
        leaves = {
            name: Tensor(value.data if isinstance(value, Tensor) else value,
                         requires_grad=name in self.wrt, name=name)
            for name, value in inputs.items()
        }
        missing = [n for n in self.wrt if n not in leaves]
        if missing:
            raise KeyError(f"unbound graph inputs: {missing}")
        self._leaves = leaves
        self._root = as_tensor(self.fn(**leaves))
        return self._root

    def backprop(self, seed=None):
        if self._root is None:
            raise RuntimeError("backprop called before evaluate")
        for leaf in self._leaves.values():
            leaf.zero_grad()
        self._root.backward(seed)
        return {
            n: (self._leaves[n].grad if self._leaves[n].grad is not None
                else np.zeros_like(self._leaves[n].data))
            for n in self.wrt
        }


def grad_check(f, x, h=1e-6):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a Tensor to a scalar Tensor.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    leaf = Tensor(x, requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x)).item()
        flat[i] = orig - h
        fm = f(Tensor(x)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
