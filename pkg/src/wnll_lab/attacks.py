"""FGSM, IFGSM and CW-L2 against the softmax head or the WNLL head.

The WNLL head has no usable input gradient, so attacks on it use
``approx_wnll_gradient``: the WNLL loss pushed back through the linear
branch's graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import ParamStore, Tensor, no_grad

BUDGET_TOL = 1e-12


class BudgetViolation(AssertionError):
    """An adversarial batch left its l-inf ball or the pixel box."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.02
    alpha: float | None = None  # IFGSM step; defaults to epsilon / 4
    iters: int = 10
    c: float = 10.0
    kappa: float = 0.0
    adam_lr: float = 0.01
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    target: int | None = None  # None = untargeted
    best_l2: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")

    @property
    def step(self):
        return self.epsilon / 4.0 if self.alpha is None else self.alpha


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    success: np.ndarray
    linf_distance: np.ndarray
    l2_distance: np.ndarray

    @property
    def accuracy(self):
        return float(np.mean(self.predictions == self.labels)) if len(self.labels) else float("nan")


class GradientOracle:
    """Loss gradient and label predictor for one head of a frozen model.

    ``head`` is ``"linear"`` (softmax) or ``"wnll"``; the WNLL head needs a
    template dataset.
    """

    def __init__(self, model, head="linear", template=None, k=mdl.DEFAULT_K, k_sigma=None):
        if head not in ("linear", "wnll"):
            raise ValueError(f"unknown head {head!r}")
        if head == "wnll" and template is None:
            raise ValueError("the WNLL head needs a template")
        self.model = model
        self.head = head
        self.template = template
        self.k = k
        self.k_sigma = k_sigma
        # the model is frozen while attacked, so template features are fixed
        self._te_feats = mdl.features(model, template.x) if head == "wnll" else None

    def __call__(self, x, y):
        if self.head == "linear":
            g = mdl.linear_input_gradient(self.model, x, y)
        else:
            g = mdl.approx_wnll_gradient(self.model, x, y, self.template, self.k, self.k_sigma,
                                         template_features=self._te_feats)
        if g.shape != np.shape(x):
            raise ad.ShapeError(f"oracle returned {g.shape} for input {np.shape(x)}")
        return g

    def predict(self, x):
        if self.head == "linear":
            return mdl.predict_linear(self.model, x)
        return mdl.predict_wnll(self.model, x, self.template, k=self.k, k_sigma=self.k_sigma,
                                template_features=self._te_feats)

    def logits(self, x):
        with no_grad():
            return mdl.forward_linear(self.model, x, trainable=()).logits.data


def _finish(x, x_adv, y, oracle, config, targets=None, budget=None):
    x_adv = np.asarray(x_adv)
    diff = (x_adv - x).reshape(len(x), -1)
    linf = np.max(np.abs(diff), axis=1) if diff.size else np.zeros(len(x))
    l2 = np.sqrt(np.sum(diff * diff, axis=1))
    if np.any(x_adv < config.clip_lo) or np.any(x_adv > config.clip_hi):
        raise BudgetViolation("perturbed pixels outside the clip box")
    if budget is not None and np.any(linf > budget + BUDGET_TOL):
        raise BudgetViolation(f"l-inf distance {linf.max():.3e} exceeds budget {budget:.3e}")
    pred = np.asarray(oracle.predict(x_adv)) if len(x) else np.zeros(0, dtype=np.int64)
    success = pred == targets if targets is not None else pred != y
    return AdversarialBatch(x, x_adv, np.asarray(y), pred, success, linf, l2)


def _predictor(oracle):
    if hasattr(oracle, "predict"):
        return oracle

    class _NoPredict:
        def predict(self, x):
            return np.full(len(x), -1)

    return _NoPredict()


def fgsm(oracle, x, y, config):
    """``clip(x + eps * sign(grad))``; ``sign(0) = 0``."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.clip(x + config.epsilon * np.sign(oracle(x, y)), config.clip_lo, config.clip_hi)
    return _finish(x, x_adv, y, _predictor(oracle), config, budget=config.epsilon)


def ifgsm(oracle, x, y, config):
    """Iterated FGSM projected onto the eps-ball around ``x`` and the box."""
    x = np.asarray(x, dtype=np.float64)
    lo = np.maximum(x - config.epsilon, config.clip_lo)
    hi = np.minimum(x + config.epsilon, config.clip_hi)
    x_adv = x.copy()
    alpha = config.step
    for _ in range(config.iters):
        step = x_adv + alpha * np.sign(oracle(x_adv, y))
        x_adv = np.clip(np.clip(step, x - config.epsilon, x + config.epsilon), config.clip_lo, config.clip_hi)
    assert np.all((x_adv >= lo) & (x_adv <= hi))
    return _finish(x, x_adv, y, _predictor(oracle), config, budget=config.epsilon)


def runner_up(logits, y):
    """Highest-scoring class other than ``y`` per row."""
    z = np.array(logits, dtype=np.float64)
    z[np.arange(len(y)), y] = -np.inf
    return np.argmax(z, axis=1)


def cw_surrogate(logits, targets, kappa=0.0):
    """``max(-kappa, max_{i != t} Z_i - Z_t)`` per row (numpy)."""
    return ad.cw_margin(Tensor(logits), targets, kappa).data


def _to_box(w, lo, hi):
    return lo + (hi - lo) * 0.5 * (np.tanh(w) + 1.0)


def cw_l2(oracle, x, y, config, targets=None):
    """Carlini-Wagner L2 attack with the tanh box reparameterisation.

    The margin term uses the linear-head logits of the query images. For the
    WNLL head this is the same surrogate route as ``approx_wnll_gradient``;
    success is always judged by ``oracle.predict``. With ``targets=None``
    the runner-up class of the clean logits is targeted and success means
    misclassification; otherwise success means hitting the target.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    lo, hi = config.clip_lo, config.clip_hi
    untargeted = targets is None and config.target is None
    if targets is None:
        if config.target is not None:
            targets = np.full(len(y), config.target)
        else:
            targets = runner_up(oracle.logits(x), y)
    targets = np.asarray(targets, dtype=np.int64)
    if not untargeted and np.any(targets == y):
        raise ValueError("targeted CW needs targets different from the true labels")

    margin = 1e-7
    unit = np.clip((x - lo) / (hi - lo), margin, 1.0 - margin)
    store = ParamStore({"w": np.arctanh(2.0 * unit - 1.0)})
    w = store["w"]
    model = oracle.model
    best = None
    for _ in range(config.iters):
        x_new = ad.add(ad.mul(ad.add(ad.tanh(w), 1.0), 0.5 * (hi - lo)), lo)
        logits = mdl.forward_linear(model, x_new, trainable=()).logits
        dist = ad.l2sq(ad.sub(x_new, Tensor(x)))
        obj = ad.add(dist, ad.mul(ad.tensor_sum(ad.cw_margin(logits, targets, config.kappa)), config.c))
        if not np.isfinite(obj.item()):
            raise FloatingPointError("CW objective is not finite")
        if config.best_l2:
            best = _track_best(best, x, x_new.data, logits.data, targets)
        obj.backward()
        ad.adam_step(store, config.adam_lr)
    x_adv = _to_box(w.data, lo, hi)
    if config.best_l2 and best is not None:
        x_adv = np.where(best[1][:, None], best[0].reshape(len(x), -1), x_adv.reshape(len(x), -1)).reshape(x.shape)
    # tanh saturates to +-1 in floating point for large |w|
    x_adv = np.clip(x_adv, np.nextafter(lo, hi), np.nextafter(hi, lo))
    batch = _finish(x, x_adv, y, oracle, config, None if untargeted else targets)
    if np.any(batch.perturbed <= lo) or np.any(batch.perturbed >= hi):
        raise BudgetViolation("CW output touches the box boundary")
    return batch


def _track_best(best, x, x_new, logits, targets):
    hit = np.argmax(logits, axis=1) == targets
    d = np.sum((x_new - x).reshape(len(x), -1) ** 2, axis=1)
    if best is None:
        best = (x_new.reshape(len(x), -1).copy(), np.zeros(len(x), dtype=bool), np.full(len(x), np.inf))
    flat, found, dist = best
    better = hit & (d < dist)
    flat[better] = x_new.reshape(len(x), -1)[better]
    dist[better] = d[better]
    found |= better
    return flat, found, dist


def run_attack(name, oracle, x, y, config, batch_size=None):
    """Dispatch ``fgsm`` / ``ifgsm`` / ``cw`` over mini-batches in input order."""
    fn = {"fgsm": fgsm, "ifgsm": ifgsm, "cw": cw_l2}[name]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    bs = len(x) if batch_size is None else batch_size
    parts = [fn(oracle, x[s:s + bs], y[s:s + bs], config) for s in range(0, len(x), bs)]
    cat = lambda attr: np.concatenate([getattr(p, attr) for p in parts])  # noqa: E731
    return AdversarialBatch(x, cat("perturbed"), y, cat("predictions"), cat("success"),
                            cat("linf_distance"), cat("l2_distance"))
