"""Dense float64 tensors with reverse-mode gradient tracking.

Small on purpose: only the ops the sequence encoders need. Every op
records a backward closure on a tape (the implicit graph of `_children`
links); `Tensor.backward()` walks it once in reverse topological order.
"""

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


def _check(cond, op, *shapes):
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


def _unbroadcast(g, shape):
    # sum gradient back down to the broadcast source shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward")

    def __init__(self, data, requires_grad=False, _children=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(c.requires_grad for c in _children)
        self.grad = None
        self._children = _children
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    # -- graph walk --------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for c in node._children:
                if id(c) not in seen:
                    stack.append((c, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if not self.requires_grad and self._backward is None:
            return
        if self.grad is None:
            if np.shape(g) == self.data.shape:
                self.grad = np.array(g, dtype=np.float64)
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_broadcastable(a, b, op):
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} {b.data.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_broadcastable(a, b, "add")
    out = Tensor(a.data + b.data, _children=(a, b))

    def back(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    out._backward = back
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_broadcastable(a, b, "mul")
    out = Tensor(a.data * b.data, _children=(a, b))

    def back(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    out._backward = back
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.ndim >= 2 and b.ndim >= 2 and a.data.shape[-1] == b.data.shape[-2],
           "matmul", a.data.shape, b.data.shape)
    out = Tensor(np.matmul(a.data, b.data), _children=(a, b))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accum(_unbroadcast(ga, a.data.shape))
        b._accum(_unbroadcast(gb, b.data.shape))

    out._backward = back
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), _children=(a,))
    out._backward = lambda g: a._accum(g.reshape(a.data.shape))
    return out


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, ax1, ax2), _children=(a,))
    out._backward = lambda g: a._accum(np.swapaxes(g, ax1, ax2))
    return out


def _is_basic_index(key):
    if not isinstance(key, tuple):
        key = (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis
               for k in key)


def tslice(a, key):
    a = as_tensor(a)
    out = Tensor(a.data[key], _children=(a,))
    basic = _is_basic_index(key)

    def back(g):
        if not a.requires_grad and a._backward is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if basic:
            # basic slices never alias within one key: in-place add is exact
            a.grad[key] += g
        else:
            np.add.at(a.grad, key, g)

    out._backward = back
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _children=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accum(g[tuple(idx)])

    out._backward = back
    return out


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 _children=tuple(tensors))

    def back(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    out._backward = back
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _children=(a,))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape))

    out._backward = back
    return out


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def _unary(a, value, dvalue):
    a = as_tensor(a)
    out = Tensor(value, _children=(a,))
    out._backward = lambda g: a._accum(g * dvalue)
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = expit(a.data)
    return _unary(a, y, y * (1.0 - y))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _unary(a, y, 1.0 - y * y)


def relu(a):
    a = as_tensor(a)
    return _unary(a, np.maximum(a.data, 0.0), (a.data > 0).astype(np.float64))


def sin(a):
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), np.cos(a.data))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _unary(a, y, y)


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.data), 1.0 / a.data)


def sqrt(a, eps=0.0):
    a = as_tensor(a)
    y = np.sqrt(a.data + eps)
    return _unary(a, y, 0.5 / np.maximum(y, 1e-300))


def square(a):
    a = as_tensor(a)
    return _unary(a, a.data ** 2, 2.0 * a.data)


def softmax(a, axis=-1, mask=None):
    """Softmax along `axis`; positions where `mask`==0 get zero weight.

    `mask` is a plain array broadcastable to a's shape, not differentiated.
    """
    a = as_tensor(a)
    z = a.data
    if mask is not None:
        z = np.where(np.broadcast_to(mask, z.shape) > 0, z, -1e30)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _children=(a,))

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accum(y * (g - dot))

    out._backward = back
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer `labels` under softmax of `logits` (N, K)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    _check(logits.ndim == 2 and labels.shape == (logits.data.shape[0],),
           "softmax_cross_entropy", logits.data.shape, labels.shape)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = logits.data.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(loss, _children=(logits,))

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accum(g * p / n)

    out._backward = back
    return out


def binary_cross_entropy_with_logits(logits, targets):
    """Mean over all elements of the stable elementwise BCE."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    _check(t.shape == logits.data.shape, "binary_cross_entropy",
           logits.data.shape, t.shape)
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    out = Tensor(loss, _children=(logits,))

    def back(g):
        logits._accum(g * (expit(z) - t) / z.size)

    out._backward = back
    return out


def mse(pred, target):
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    _check(t.shape == pred.data.shape, "mse", pred.data.shape, t.shape)
    diff = pred.data - t
    out = Tensor((diff ** 2).mean(), _children=(pred,))
    out._backward = lambda g: pred._accum(g * 2.0 * diff / diff.size)
    return out


def embedding(weight, idx):
    """Row lookup into `weight` (V, D) by an integer index array."""
    weight = as_tensor(weight)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.data.shape[0]):
        raise ShapeError(
            f"embedding: index out of range for table of size {weight.data.shape[0]}")
    out = Tensor(weight.data[idx], _children=(weight,))

    def back(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx, g)
        weight._accum(full)

    out._backward = back
    return out


def dropout(a, rate, rng, training):
    """Inverted dropout: scales kept activations by 1/(1-rate) at train time."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


class BatchNormState:
    """Running statistics frozen for eval mode."""

    def __init__(self, n_features, momentum=0.1, eps=1e-8):
        self.mean = np.zeros(n_features)
        self.var = np.ones(n_features)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x, gamma, beta, state, training, weights=None):
    """Normalize (N, F) per feature; train mode uses (optionally weighted)
    batch statistics and updates `state`, eval mode uses the running ones.

    `weights` is a {0,1} array (N,) marking rows that count toward the
    statistics (padding rows are excluded)."""
    x = as_tensor(x)
    _check(x.ndim == 2, "batchnorm", x.data.shape)
    if training:
        if weights is None:
            w = np.ones(x.data.shape[0])
        else:
            w = np.asarray(weights, dtype=np.float64)
        n = w.sum()
        wcol = Tensor(w[:, None])
        mean = tsum(mul(x, wcol), axis=0, keepdims=True) * (1.0 / n)
        centered = x - mean
        var = tsum(mul(square(centered), wcol), axis=0, keepdims=True) * (1.0 / n)
        m = state.momentum
        state.mean = (1 - m) * state.mean + m * mean.data.ravel()
        state.var = (1 - m) * state.var + m * var.data.ravel()
        inv = _unary(var, (var.data + state.eps) ** -0.5,
                     -0.5 * (var.data + state.eps) ** -1.5)
        xhat = mul(centered, inv)
    else:
        xhat = (x - Tensor(state.mean)) * Tensor((state.var + state.eps) ** -0.5)
    return xhat * gamma + beta


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over a name->Tensor dict, grads read from .grad."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[:] = beta1 * m + (1 - beta1) * g
        v[:] = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0
