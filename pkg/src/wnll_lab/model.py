"""Two-branch classifier: DNN block -> buffer block -> {linear head, WNLL head}."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, no_grad
from .data import Dataset
from .graph import (
    TemplateSet,
    build_knn_graph,
    warn_if_small_template,
    wnll_interpolate,
)

DEFAULT_K = 15


@dataclass(frozen=True)
class NetworkSpec:
    """Layer layout of the DNN block plus the head widths.

    ``dnn_layers`` holds tuples ``("conv", out_channels)``, ``("dense", width)``,
    ``("relu",)``, ``("tanh",)``, ``("avgpool",)`` or ``("flatten",)``.
    """

    name: str
    input_shape: tuple
    dnn_layers: tuple
    feature_dim: int
    n_classes: int

    def layer_shapes(self):
        """Output shape after each DNN layer; raises if the chain is broken."""
        shape = tuple(self.input_shape)
        shapes = []
        for layer in self.dnn_layers:
            kind = layer[0]
            if kind == "conv":
                if len(shape) != 3:
                    raise ValueError(f"{self.name}: conv after non-image shape {shape}")
                shape = (layer[1], shape[1], shape[2])
            elif kind == "avgpool":
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ValueError(f"{self.name}: avgpool on shape {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"{self.name}: dense on unflattened shape {shape}")
                shape = (layer[1],)
            elif kind not in ("relu", "tanh"):
                raise ValueError(f"unknown layer kind {kind!r}")
            shapes.append(shape)
        if len(shape) != 1:
            raise ValueError(f"{self.name}: DNN block must end flat, ends at {shape}")
        return shapes

    @property
    def dnn_out_dim(self):
        return self.layer_shapes()[-1][0]


_BASE_SPECS = {
    "tiny_cnn": ((3, 32, 32), (
        ("conv", 8), ("relu",), ("avgpool",),
        ("conv", 16), ("relu",), ("avgpool",),
        ("flatten",), ("dense", 64),
    ), 64),
    "mlp2d": ((2,), (("dense", 32), ("relu",), ("dense", 32)), 32),
}


def get_spec(name, n_classes=None):
    """Look up a named spec. ``"tiny_cnn-c2"`` fixes two classes."""
    m = re.fullmatch(r"(\w+?)(?:-c(\d+))?", name)
    if m is None or m.group(1) not in _BASE_SPECS:
        raise KeyError(f"unknown network spec {name!r}")
    base = m.group(1)
    if m.group(2) is not None:
        n_classes = int(m.group(2))
    if n_classes is None:
        raise ValueError(f"spec {name!r} needs a class count")
    input_shape, layers, feat = _BASE_SPECS[base]
    return NetworkSpec(f"{base}-c{n_classes}", input_shape, layers, feat, n_classes)


class TwoBranchModel:
    """Parameters ``theta`` (DNN block), ``w_buffer`` and ``w_linear``."""

    def __init__(self, spec, seed=0, rng=None):
        self.spec = spec
        rng = np.random.default_rng([int(seed), 2]) if rng is None else rng
        self.theta = ParamStore()
        shape = tuple(spec.input_shape)
        for i, (layer, out_shape) in enumerate(zip(spec.dnn_layers, spec.layer_shapes())):
            if layer[0] == "conv":
                cin = shape[0]
                self.theta.add(f"dnn.{i}.w", ad.he_normal(rng, (layer[1], cin, 3, 3), cin * 9))
                self.theta.add(f"dnn.{i}.b", np.zeros(layer[1]))
            elif layer[0] == "dense":
                self.theta.add(f"dnn.{i}.w", ad.he_normal(rng, (shape[0], layer[1]), shape[0]))
                self.theta.add(f"dnn.{i}.b", np.zeros(layer[1]))
            shape = out_shape
        d_in = spec.dnn_out_dim
        self.w_buffer = ParamStore({
            "buffer.w": ad.he_normal(rng, (d_in, spec.feature_dim), d_in),
            "buffer.b": np.zeros(spec.feature_dim),
        })
        self.w_linear = ParamStore({
            "linear.w": rng.normal(0.0, 1.0 / np.sqrt(spec.feature_dim), (spec.feature_dim, spec.n_classes)),
            "linear.b": np.zeros(spec.n_classes),
        })

    @property
    def stores(self):
        return {"theta": self.theta, "w_buffer": self.w_buffer, "w_linear": self.w_linear}

    def named_parameters(self):
        for store in self.stores.values():
            yield from store.items()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise KeyError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for name, value in state.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != params[name].shape:
                raise ValueError(f"{name}: shape {value.shape} != {params[name].shape}")
            params[name].data = value.copy()

    def copy(self):
        new = TwoBranchModel.__new__(TwoBranchModel)
        new.spec = self.spec
        new.theta = self.theta.copy()
        new.w_buffer = self.w_buffer.copy()
        new.w_linear = self.w_linear.copy()
        return new

    def zero_grad(self):
        for store in self.stores.values():
            store.zero_grad()

    def checksum(self, store="all"):
        """SHA-256 over parameter bytes of one store (or all of them)."""
        h = hashlib.sha256()
        stores = self.stores.values() if store == "all" else [self.stores[store]]
        for st in stores:
            for name, p in st.items():
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _params(store, trainable):
    if trainable:
        return store.params
    return {k: Tensor(p.data) for k, p in store.items()}


def dnn_block(model, x, trainable=True):
    theta = _params(model.theta, trainable)
    h = x
    for i, layer in enumerate(model.spec.dnn_layers):
        kind = layer[0]
        if kind == "conv":
            h = ad.conv2d(h, theta[f"dnn.{i}.w"], theta[f"dnn.{i}.b"])
        elif kind == "dense":
            h = ad.dense(h, theta[f"dnn.{i}.w"], theta[f"dnn.{i}.b"])
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "tanh":
            h = ad.tanh(h)
        elif kind == "avgpool":
            h = ad.avgpool2(h)
        elif kind == "flatten":
            h = ad.flatten(h)
    return h


def buffer_block(model, x_tilde, trainable=True):
    wb = _params(model.w_buffer, trainable)
    return ad.relu(ad.dense(x_tilde, wb["buffer.w"], wb["buffer.b"]))


def linear_head(model, x_hat, trainable=True):
    wl = _params(model.w_linear, trainable)
    return ad.dense(x_hat, wl["linear.w"], wl["linear.b"])


@dataclass
class ForwardTrace:
    x_tilde: Tensor
    x_hat: Tensor
    logits: Tensor
    y_tilde: Tensor
    y_hat: np.ndarray | None = None


def _as_input(model, x):
    if isinstance(x, Tensor):
        data = x.data
    else:
        data = np.asarray(x, dtype=np.float64)
        x = Tensor(data)
    if data.shape[1:] != tuple(model.spec.input_shape):
        raise ad.ShapeError(
            f"input batch {data.shape} does not match spec input {tuple(model.spec.input_shape)}"
        )
    return x


def forward_linear(model, x, trainable=("theta", "w_buffer", "w_linear")):
    """Softmax branch. ``trainable`` names the stores that join the graph."""
    x = _as_input(model, x)
    x_tilde = dnn_block(model, x, "theta" in trainable)
    x_hat = buffer_block(model, x_tilde, "w_buffer" in trainable)
    logits = linear_head(model, x_hat, "w_linear" in trainable)
    return ForwardTrace(x_tilde, x_hat, logits, ad.softmax(logits))


def features(model, x):
    """Buffer-block output for a batch, no graph."""
    with no_grad():
        return forward_linear(model, x, trainable=()).x_hat.data


def template_set(n_query, template_y, n_classes):
    idx = n_query + np.arange(len(template_y))
    return TemplateSet.from_classes(idx, template_y, n_classes)


def wnll_from_features(query_feats, template_feats, template_y, n_classes, k=DEFAULT_K, k_sigma=None):
    """WNLL rows for the query points given precomputed features."""
    cloud = np.concatenate([query_feats, template_feats])
    graph = build_knn_graph(cloud, k=k, k_sigma=k_sigma)
    u = wnll_interpolate(graph, template_set(len(query_feats), template_y, n_classes))
    return u[: len(query_feats)]


def forward_wnll(model, x, template, k=DEFAULT_K, k_sigma=None, trainable=(), template_features=None):
    """Both branches for ``x``; ``y_hat`` interpolated from ``template`` labels.

    Template features are recomputed from the current parameters unless
    ``template_features`` is given; pass it only while the model is frozen.
    """
    if len(template) == 0:
        raise ValueError("template is empty")
    counts = np.bincount(template.y, minlength=model.spec.n_classes)
    if np.any(counts == 0):
        raise ValueError(f"template misses classes {np.flatnonzero(counts == 0).tolist()}")
    trace = forward_linear(model, x, trainable=trainable)
    te_feats = features(model, template.x) if template_features is None else template_features
    trace.y_hat = wnll_from_features(trace.x_hat.data, te_feats, template.y, model.spec.n_classes, k, k_sigma)
    return trace


def wnll_loss(y_hat, y):
    """Cross-entropy of clamped, row-renormalised interpolation values."""
    u = np.clip(np.asarray(y_hat, dtype=np.float64), 1e-12, 1.0)
    u = u / u.sum(axis=1, keepdims=True)
    y = np.asarray(y, dtype=np.int64)
    return float(-np.mean(np.log(u[np.arange(len(y)), y])))


def substituted_loss(logits, y, y_hat):
    """Linear-branch loss node carrying the WNLL loss value.

    The forward value is ``wnll_loss(y_hat, y)``. Backward follows the linear
    head's softmax cross-entropy graph with the softmax output replaced by the
    WNLL prediction, so the gradient at the logits is ``(y_hat - onehot) / n``.
    It reduces to the ordinary linear-branch gradient when ``y_hat`` equals
    the softmax output.
    """
    y = np.asarray(y, dtype=np.int64)
    u = np.asarray(y_hat, dtype=np.float64)
    if u.shape != logits.shape:
        raise ad.ShapeError(f"y_hat {u.shape} vs logits {logits.shape}")
    n = len(y)
    rows = np.arange(n)

    def backward(g):
        d = u.copy()
        d[rows, y] -= 1.0
        return (d * (float(g) / n),)

    return ad._result(np.array(wnll_loss(u, y)), (logits,), backward)


def straight_through_update(model, x, y, template, lr, k=DEFAULT_K, k_sigma=None, momentum=0.0):
    """One straight-through step on the buffer weights only.

    Returns the WNLL loss value of the batch before the update.
    """
    trace = forward_wnll(model, x, template, k, k_sigma, trainable=("w_buffer",))
    loss = substituted_loss(trace.logits, y, trace.y_hat)
    model.w_buffer.zero_grad()
    loss.backward()
    ad.sgd_step(model.w_buffer, lr, momentum)
    return loss.item()


def approx_wnll_gradient(model, x, y, template, k=DEFAULT_K, k_sigma=None, template_features=None):
    """Input gradient of the WNLL loss through the linear branch's graph."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    trace = forward_wnll(model, xt, template, k, k_sigma, template_features=template_features)
    loss = substituted_loss(trace.logits, y, trace.y_hat)
    loss.backward()
    return xt.grad


def linear_input_gradient(model, x, y):
    """Input gradient of the mean softmax cross-entropy."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    trace = forward_linear(model, xt, trainable=())
    ad.softmax_cross_entropy(trace.logits, y).backward()
    return xt.grad


def predict_linear(model, x, batch_size=256):
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(np.argmax(forward_linear(model, x[s:s + batch_size], trainable=()).logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict_wnll(model, x, template, batch_size=None, k=DEFAULT_K, k_sigma=None, template_features=None):
    """WNLL labels for ``x``; each batch is interpolated jointly with the template."""
    batch_size = len(x) if batch_size is None else batch_size
    te_feats = features(model, template.x) if template_features is None else template_features
    out = []
    for s in range(0, len(x), batch_size):
        q = features(model, x[s:s + batch_size])
        u = wnll_from_features(q, te_feats, template.y, model.spec.n_classes, k, k_sigma)
        out.append(np.argmax(u, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def reserve_template(data, size, rng):
    """Stratified template sample; returns ``(template, remainder)``.

    Per-class counts differ by at most one when every class has enough
    examples. Warns when ``size`` is below ``m ln m``.
    """
    m = data.n_classes
    counts = data.class_counts()
    if np.any(counts == 0):
        raise ValueError(f"dataset lacks classes {np.flatnonzero(counts == 0).tolist()}")
    if not 0 < size <= len(data):
        raise ValueError(f"template size {size} outside [1, {len(data)}]")
    warn_if_small_template(size, m)
    # water-fill: balanced quotas, capped by availability
    quota = np.zeros(m, dtype=np.int64)
    left = size
    while left:
        open_ = np.flatnonzero(quota < counts)
        share = max(left // len(open_), 1)
        for c in open_:
            add = min(share, counts[c] - quota[c], left)
            quota[c] += add
            left -= add
            if not left:
                break
    chosen = []
    for c in range(m):
        idx = np.flatnonzero(data.y == c)
        chosen.extend(rng.permutation(idx)[: quota[c]])
    chosen = np.sort(np.asarray(chosen, dtype=np.int64))
    rest = np.setdiff1d(np.arange(len(data)), chosen)
    return data.subset(chosen), data.subset(rest)
