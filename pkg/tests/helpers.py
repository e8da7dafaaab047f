"""Independent oracles shared by the test modules."""

import numpy as np

from wnll_lab import autodiff as ad
from wnll_lab.autodiff import Tensor, no_grad


def numeric_grad(loss_fn, t, h=1e-5):
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn().item()
            flat[i] = old - h
            fm = loss_fn().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grad(loss_fn, t, h=1e-5):
    """Relative error between backprop and central differences for ``t``."""
    t.requires_grad = True
    t.grad = None
    loss_fn().backward()
    ga = t.grad.copy()
    t.grad = None
    gn = numeric_grad(loss_fn, t, h)
    scale = max(np.linalg.norm(gn), np.linalg.norm(ga), 1e-8)
    return float(np.linalg.norm(ga - gn) / scale)


def conv2d_loops(x, w, b):
    n, c, hh, ww = x.shape
    o = w.shape[0]
    out = np.zeros((n, o, hh, ww))
    for a in range(n):
        for f in range(o):
            for i in range(hh):
                for j in range(ww):
                    s = b[f]
                    for ch in range(c):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < hh and 0 <= jj < ww:
                                    s += w[f, ch, di, dj] * x[a, ch, ii, jj]
                    out[a, f, i, j] = s
    return out


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def op_case(op, rng):
    """(loss closure, tensors to check) for one op kind on random inputs."""
    if op in ("relu", "tanh"):
        x = Tensor(rng.normal(size=(3, 4)))
        w = _weights(rng, (3, 4))
        f = getattr(ad, op)
        return (lambda: ad.tensor_sum(ad.mul(f(x), w))), [x]
    if op == "softmax":
        x = Tensor(rng.normal(size=(3, 4)))
        w = _weights(rng, (3, 4))
        return (lambda: ad.tensor_sum(ad.mul(ad.softmax(x), w))), [x]
    if op == "avgpool":
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))
        w = _weights(rng, (2, 2, 2, 2))
        return (lambda: ad.tensor_sum(ad.mul(ad.avgpool2(x), w))), [x]
    if op == "flatten":
        x = Tensor(rng.normal(size=(2, 2, 2, 2)))
        w = _weights(rng, (2, 8))
        return (lambda: ad.tensor_sum(ad.mul(ad.flatten(x), w))), [x]
    if op == "conv":
        x = Tensor(rng.normal(size=(2, 2, 4, 4)))
        k = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        w = _weights(rng, (2, 3, 4, 4))
        return (lambda: ad.tensor_sum(ad.mul(ad.conv2d(x, k, b), w))), [x, k, b]
    if op == "dense":
        x = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(rng.normal(size=(4, 2)))
        b = Tensor(rng.normal(size=2))
        w = _weights(rng, (3, 2))
        return (lambda: ad.tensor_sum(ad.mul(ad.dense(x, k, b), w))), [x, k, b]
    if op in ("add", "sub", "mul"):
        a = Tensor(rng.normal(size=(3, 3)))
        b = Tensor(rng.normal(size=(3, 3)))
        w = _weights(rng, (3, 3))
        f = getattr(ad, op)
        return (lambda: ad.tensor_sum(ad.mul(f(a, b), w))), [a, b]
    if op == "l2sq":
        a = Tensor(rng.normal(size=(2, 5)))
        return (lambda: ad.l2sq(a)), [a]
    if op == "mean":
        a = Tensor(rng.normal(size=(2, 5)))
        w = _weights(rng, (2, 5))
        return (lambda: ad.mean(ad.mul(a, w))), [a]
    if op == "cross_entropy":
        z = Tensor(rng.normal(size=(4, 3)))
        y = rng.integers(0, 3, size=4)
        z2 = Tensor(rng.normal(size=(4, 3)))
        onehot = Tensor(np.eye(3)[y])
        return (lambda: ad.add(ad.softmax_cross_entropy(z, y),
                               ad.cross_entropy(ad.softmax(z2), onehot))), [z, z2]
    if op == "cw_margin":
        z = Tensor(rng.normal(size=(5, 4)) * 3)
        t = rng.integers(0, 4, size=5)
        return (lambda: ad.tensor_sum(ad.cw_margin(z, t, kappa=0.5))), [z]
    raise KeyError(op)


def dense_wnll_oracle(points_graph, template, boost):
    """Assemble the interpolation system literally with loops and solve densely."""
    n = points_graph.n
    w = np.zeros((n, n))
    for i in range(n):
        for j, wij in zip(points_graph.neighbors[i], points_graph.weights[i]):
            w[i, j] = wij
    te = set(template.indices.tolist())
    unl = [i for i in range(n) if i not in te]
    pos = {v: r for r, v in enumerate(unl)}
    m = template.labels.shape[1]
    g = np.zeros((n, m))
    g[template.indices] = template.labels
    a = np.zeros((len(unl), len(unl)))
    rhs = np.zeros((len(unl), m))
    for x in unl:
        r = pos[x]
        for y in range(n):
            coef = w[x, y] + w[y, x]
            if y in te:
                coef += boost * w[y, x]
            if coef == 0:
                continue
            a[r, r] += coef
            if y in te:
                rhs[r] += coef * g[y]
            else:
                a[r, pos[y]] -= coef
    u = g.copy()
    if unl:
        u[unl] = np.linalg.solve(a, rhs)
    return u
