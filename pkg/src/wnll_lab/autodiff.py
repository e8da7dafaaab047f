"""Small reverse-mode autodiff over float64 numpy arrays.

Only the handful of layers the desk-scale classifiers need are provided.
Shapes must match exactly for elementwise arithmetic; the single exception is
the bias add inside ``dense`` and ``conv2d``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array node in the gradient graph.

    Leaves created with ``requires_grad=True`` collect gradients in ``grad``.
    Interior nodes keep a reference to their parents and a closure that maps
    the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every leaf upstream of this scalar."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not attached to any tensor requiring grad")

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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b):
    if _is_scalar(b):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if _is_scalar(b):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if _is_scalar(b):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(a):
    return _result(np.sum(a.data), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a):
    n = a.data.size
    return _result(np.mean(a.data), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def l2sq(a):
    """Sum of squares of all entries."""
    return _result(np.sum(a.data * a.data), (a,), lambda g: (2.0 * float(g) * a.data,))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a):
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def dense(x, w, b):
    """``x @ w + b`` with ``x`` (n, d_in), ``w`` (d_in, d_out), ``b`` (d_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape} incompatible")
    out = x.data @ w.data + b.data

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(out, (x, w, b), backward)


def _im2col(xp, h, w):
    # xp: (N, C, H+2, W+2) -> (N*H*W, C*9), columns ordered (C, 3, 3)
    n, c = xp.shape[:2]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = np.lib.stride_tricks.sliding_window_view(xh, (3, 3), axis=(1, 2))
    return win.reshape(n * h * w, c * 9)


def conv2d(x, w, b):
    """3x3 convolution, stride 1, zero padding 1.

    ``x`` is (N, C, H, W), ``w`` is (O, C, 3, 3), ``b`` is (O,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3) or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape} incompatible")
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, wd)
    wmat = w.data.reshape(o, c * 9)
    out = (cols @ wmat.T + b.data).reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, h, wd, c, 3, 3)
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), backward)


def avgpool2(x):
    """2x2 average pooling with stride 2 on (N, C, H, W), H and W even."""
    n, c, h, w = x.shape
    if x.data.ndim != 4 or h % 2 or w % 2:
        raise ShapeError(f"avgpool2: needs (N, C, even H, even W), got {x.shape}")
    d = x.data
    out = ((d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2]) + (d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2])) * 0.25

    def backward(g):
        gx = np.empty_like(d)
        q = g * 0.25
        gx[:, :, 0::2, 0::2] = q
        gx[:, :, 1::2, 0::2] = q
        gx[:, :, 0::2, 1::2] = q
        gx[:, :, 1::2, 1::2] = q
        return (gx,)

    return _result(out, (x,), backward)


def _softmax_np(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(z):
    """Row-wise softmax of a (n, m) tensor."""
    if z.data.ndim != 2:
        raise ShapeError(f"softmax: expected (n, m), got {z.shape}")
    p = _softmax_np(z.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (z,), backward)


def cross_entropy(p, y):
    """Mean of ``-sum(y * log p)`` over rows; ``p`` probabilities, ``y`` one-hot."""
    p, y = as_tensor(p), as_tensor(y)
    _same_shape("cross_entropy", p, y)
    n = p.shape[0]
    val = -np.sum(y.data * np.log(p.data)) / n

    def backward(g):
        return -float(g) * y.data / (p.data * n), None

    return _result(val, (p, y), backward)


def softmax_cross_entropy(logits, labels, scale=None):
    """Fused softmax + mean cross-entropy against integer ``labels``.

    ``scale`` optionally multiplies each example's logit gradient; the forward
    value is unaffected.
    """
    z = logits.data
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {np.shape(labels)}")
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(n)
    val = np.mean(lse - zs[rows, labels])
    p = _softmax_np(z)

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        if scale is not None:
            d *= np.asarray(scale, dtype=np.float64)[:, None]
        return (d * (float(g) / n),)

    return _result(val, (logits,), backward)


def cw_margin(logits, targets, kappa=0.0):
    """Per-example ``max(-kappa, max_{i != t} Z_i - Z_t)``."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or len(targets) != z.shape[0]:
        raise ShapeError(f"cw_margin: logits {logits.shape}, targets {targets.shape}")
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, targets] = -np.inf
    other = np.argmax(masked, axis=1)
    diff = z[rows, other] - z[rows, targets]
    active = diff > -kappa
    out = np.where(active, diff, -kappa)

    def backward(g):
        d = np.zeros_like(z)
        ga = g * active
        d[rows, other] += ga
        d[rows, targets] -= ga
        return (d,)

    return _result(out, (logits,), backward)


# optimizers -------------------------------------------------------------

class ParamStore:
    """Named parameters plus optimizer state."""

    def __init__(self, params=None):
        self.params = {}
        self.step = 0
        self.m = {}
        self.v = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def reset_state(self):
        self.step = 0
        self.m.clear()
        self.v.clear()

    def copy(self):
        new = ParamStore({k: p.data.copy() for k, p in self.params.items()})
        new.step = self.step
        new.m = {k: a.copy() for k, a in self.m.items()}
        new.v = {k: a.copy() for k, a in self.v.items()}
        return new


def _require_grads(store):
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")


def sgd_step(store, lr, momentum=0.0):
    """``p <- p - lr * grad(p)`` for every parameter, then clear grads.

    With ``momentum > 0`` the step uses the heavy-ball velocity
    ``v <- momentum * v + grad`` kept in ``store.m``.
    """
    _require_grads(store)
    for name, p in store.params.items():
        g = p.grad
        if momentum:
            v = store.m.get(name)
            g = g.copy() if v is None else momentum * v + g
            store.m[name] = g
        p.data -= lr * g
        p.grad = None


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, then clear grads."""
    _require_grads(store)
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
