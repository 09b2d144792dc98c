"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` produced by an operation remembers its parents and a
closure that pushes its gradient back to them. :meth:`Tensor.backward`
walks the graph in reverse topological order. All data is float64.
"""

from __future__ import annotations

import contextlib

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._released = False

    # -- bookkeeping -------------------------------------------------------

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self):
        """Propagate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        The graph is released afterwards; calling again raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._released:
            raise RuntimeError("backward() already called on this graph; rebuild it with a new forward pass")

        order, seen = [], set()
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node._accumulate(g)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            node._released = True
            node._backward = _released_backward
        self._released = True

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return _op(self.data + other.data, (self, other),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _op(x * y, (self, other),
                   lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _op(x / y, (self, other),
                   lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / y ** 2, y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, k: float):
        x = self.data
        return _op(x ** k, (self,), lambda g: (g * k * x ** (k - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return _op(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return _op(self.data[idx], (self,), back)

    # -- reductions and reshaping -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _op(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return _op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return _op(self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inv),))

    # -- elementwise nonlinearities -----------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _op(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return _op(np.log(x), (self,), lambda g: (g / x,))

    def relu(self):
        mask = self.data > 0
        return _op(self.data * mask, (self,), lambda g: (g * mask,))

    def clamp_min(self, floor: float):
        """max(x, floor); the gradient passes only where x > floor."""
        mask = self.data > floor
        return _op(np.where(mask, self.data, floor), (self,), lambda g: (g * mask,))


def _released_backward(g):
    raise RuntimeError("graph already released")


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _op(data, parents, backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# Fused network operations
# ---------------------------------------------------------------------------

def softmax(z: Tensor, axis: int = -1) -> Tensor:
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _op(s, (z,), back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation. x: (B, C, H, W), weight: (O, C, k, k)."""
    B, C, H, W = x.shape
    O, C2, k, k2 = weight.shape
    if C != C2 or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x.data
    Ho, Wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    # columns laid out (C*k*k, B*Ho*Wo): the copy then runs along W, not along the kernel
    sb, sc, sh, sw = xp.strides
    # strided (C, k, k, B, Ho, Wo) view of the freshly allocated padded buffer
    win = np.ndarray((C, k, k, B, Ho, Wo), xp.dtype, xp, 0, (sc, sh, sw, sb, sh, sw))
    cols = win.reshape(C * k * k, B * Ho * Wo)
    wmat = weight.data.reshape(O, C * k * k)
    out = (wmat @ cols + bias.data[:, None]).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)

    def back(g):
        gt = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (gt @ cols.T).reshape(weight.shape)
        gb = gt.sum(axis=1)
        gcols = (wmat.T @ gt).reshape(C, k, k, B, Ho, Wo)
        gxp = np.zeros((C, B) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + Ho, j:j + Wo] += gcols[:, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw, gb

    return _op(np.ascontiguousarray(out), (x, weight, bias), back)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.
    Ties route the gradient to the first maximal element."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ValueError(f"max_pool2d: input {x.shape} smaller than pool size {size}")
    crop = x.data[:, :, :Ho * size, :Wo * size]
    out = crop[:, :, ::size, ::size].copy()
    for i in range(size):
        for j in range(size):
            if i or j:
                np.maximum(out, crop[:, :, i::size, j::size], out=out)

    def back(g):
        # argmax is only needed here, so it is not paid for in graph-free passes
        blocks = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, -1)
        arg = blocks.argmax(axis=-1)
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        gx = np.zeros((B, C, H, W))
        gx[:, :, :Ho * size, :Wo * size] = gb
        return (gx,)

    return _op(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D input, got shape {x.shape}")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ValueError("global_avg_pool needs H, W >= 1")
    return _op(x.data.mean(axis=(2, 3)), (x,),
               lambda g: (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel normalization with batch statistics over (B, H, W).

    Returns the output tensor together with the batch mean and biased
    variance (as arrays) for running-statistics updates.
    """
    axes = (0, 2, 3)
    n = x.data.size / x.shape[1]
    mu = x.data.sum(axis=axes, keepdims=True) / n
    centered = x.data - mu
    var = (centered * centered).sum(axis=axes, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, -1, 1, 1)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * g4
        gx = inv / n * (n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _op(out, (x, gamma, beta), back), mu.reshape(-1), var.reshape(-1)


def affine_channels(x: Tensor, scale: np.ndarray, shift: np.ndarray, gamma: Tensor, beta: Tensor) -> Tensor:
    """Eval-mode batchnorm: gamma * (x * scale + shift) + beta with fixed per-channel scale/shift."""
    s4 = scale.reshape(1, -1, 1, 1)
    xn = x.data * s4 + shift.reshape(1, -1, 1, 1)
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = g4 * xn + beta.data.reshape(1, -1, 1, 1)
    axes = (0, 2, 3)
    return _op(out, (x, gamma, beta),
               lambda g: (g * g4 * s4, (g * xn).sum(axis=axes), g.sum(axis=axes)))
