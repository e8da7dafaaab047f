"""Standard training, TVM data augmentation and PGD adversarial training."""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .data import Dataset, substream
from .tvm import TvmConfig, apply_tvm_batch

AUGMENTATIONS = ("original", "tvm", "original_plus_tvm")


class TrainingAborted(RuntimeError):
    """Training stopped early; ``log`` holds everything recorded up to the abort."""

    def __init__(self, msg, log):
        super().__init__(msg)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    """Schedule for standard, alternating and PGD adversarial training.

    ``epochs_linear`` and ``epochs_wnll`` are the per-alternation epoch counts
    of the linear and WNLL phases. ``ifgsm_iters`` inner steps of size
    ``epsilon`` (box clip only) perturb each batch; with ``strict_ifgsm`` the
    step is ``alpha`` and iterates are projected onto the eps-ball as well.
    """

    alternations: int = 1
    epochs_linear: int = 10
    epochs_wnll: int = 0
    ifgsm_iters: int = 0
    epsilon: float = 0.0
    alpha: float | None = None
    strict_ifgsm: bool = False
    lr: float = 0.05
    momentum: float = 0.0
    lr_milestones: tuple = (0.5, 0.75)
    lr_decay: float = 0.1
    batch_size: int = 50
    template_size: int = 100
    k: int = mdl.DEFAULT_K
    augmentation: str = "original"
    seed: int = 0

    def __post_init__(self):
        for name in ("alternations", "epochs_linear", "epochs_wnll", "ifgsm_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")

    def lr_at(self, epoch, total):
        """Step decay at the configured fractions of a phase's epoch budget."""
        drops = sum(epoch >= math.ceil(f * total) for f in self.lr_milestones)
        return self.lr * self.lr_decay ** drops


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    checksums: list = field(default_factory=list)

    def record_boundary(self, model, tag):
        self.checksums.append({
            "tag": tag,
            **{name: model.checksum(name) for name in ("theta", "w_buffer", "w_linear")},
        })

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=1)


@contextmanager
def _abort_guard(model, log):
    try:
        yield
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        if isinstance(exc, TrainingAborted):
            raise
        log.record_boundary(model, "abort")
        raise TrainingAborted(f"training aborted: {exc}", log) from exc


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


def _perturb(grad_fn, x, y, config):
    """Inner maximisation: ``ifgsm_iters`` signed-gradient steps."""
    x0 = x
    step = config.epsilon if not config.strict_ifgsm else (
        config.epsilon / 4.0 if config.alpha is None else config.alpha)
    for _ in range(config.ifgsm_iters):
        x = x + step * np.sign(grad_fn(x, y))
        if config.strict_ifgsm:
            x = np.clip(x, x0 - config.epsilon, x0 + config.epsilon)
        x = np.clip(x, 0.0, 1.0)
    return x


def _reset_optimizer(model):
    for store in model.stores.values():
        store.reset_state()


def _linear_step(model, xb, yb, lr, momentum=0.0):
    trace = mdl.forward_linear(model, xb)
    loss = ad.softmax_cross_entropy(trace.logits, yb)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("training loss is not finite")
    model.zero_grad()
    loss.backward()
    for store in model.stores.values():
        ad.sgd_step(store, lr, momentum)
    acc = float(np.mean(np.argmax(trace.logits.data, axis=1) == yb))
    return loss.item(), acc


def _linear_epochs(model, data, config, log, n_epochs, shuffle_rng, adversarial, tag):
    _reset_optimizer(model)
    perturb = adversarial and config.ifgsm_iters > 0
    for e in range(n_epochs):
        lr = config.lr_at(e, n_epochs)
        stats = {"loss": [], "acc": [], "clean_loss": [], "clean_acc": []}
        sizes = []
        for idx in _batches(len(data), config.batch_size, shuffle_rng):
            xb, yb = data.x[idx], data.y[idx]
            if perturb:
                with ad.no_grad():
                    logits = mdl.forward_linear(model, xb, trainable=()).logits
                    stats["clean_loss"].append(ad.softmax_cross_entropy(logits, yb).item())
                stats["clean_acc"].append(float(np.mean(np.argmax(logits.data, axis=1) == yb)))
                xb = _perturb(lambda a, b: mdl.linear_input_gradient(model, a, b), xb, yb, config)
            loss, acc = _linear_step(model, xb, yb, lr, config.momentum)
            stats["loss"].append(loss)
            stats["acc"].append(acc)
            sizes.append(len(idx))
        entry = {"phase": "linear", "tag": tag, "epoch": e, "lr": lr, "adversarial": perturb}
        entry.update({k: float(np.average(v, weights=sizes)) for k, v in stats.items() if v})
        log.epochs.append(entry)


def _wnll_epochs(model, data, template, config, log, n_epochs, shuffle_rng, adversarial, tag):
    _reset_optimizer(model)
    for e in range(n_epochs):
        lr = config.lr_at(e, n_epochs)
        losses, sizes = [], []
        for idx in _batches(len(data), config.batch_size, shuffle_rng):
            xb, yb = data.x[idx], data.y[idx]
            if adversarial and config.ifgsm_iters:
                te_feats = mdl.features(model, template.x)
                grad = lambda a, b: mdl.approx_wnll_gradient(  # noqa: E731
                    model, a, b, template, config.k, template_features=te_feats)
                xb = _perturb(grad, xb, yb, config)
            losses.append(mdl.straight_through_update(model, xb, yb, template, lr, config.k,
                                                      momentum=config.momentum))
            sizes.append(len(idx))
        log.epochs.append({
            "phase": "wnll", "tag": tag, "epoch": e, "lr": lr,
            "adversarial": bool(adversarial and config.ifgsm_iters),
            "loss": float(np.average(losses, weights=sizes)),
        })


def standard_train(model, data, config):
    """Mini-batch SGD on the linear head for ``config.epochs_linear`` epochs."""
    if len(data) == 0:
        raise ValueError("empty training set")
    log = TrainingLog()
    log.record_boundary(model, "start")
    with _abort_guard(model, log):
        _linear_epochs(model, data, config, log, config.epochs_linear,
                       substream(config.seed, "shuffle"), False, "standard")
    log.record_boundary(model, "end")
    return log


def train_alternating(model, data, config, template=None):
    """Alternate linear-head epochs with straight-through WNLL epochs.

    A single template is reserved (or supplied) for the whole run; WNLL
    batches are drawn from the remaining examples.
    """
    log = TrainingLog()
    log.record_boundary(model, "start")
    if config.alternations == 0:
        return log
    rest = data
    if template is None and config.epochs_wnll:
        template, rest = mdl.reserve_template(data, config.template_size, substream(config.seed, "template"))
    shuffle = substream(config.seed, "shuffle")
    wnll_shuffle = np.random.default_rng([config.seed, 3, 1])
    with _abort_guard(model, log):
        for a in range(config.alternations):
            _linear_epochs(model, data, config, log, config.epochs_linear, shuffle, False, f"alt{a}")
            log.record_boundary(model, f"alt{a}:linear")
            if config.epochs_wnll:
                _wnll_epochs(model, rest, template, config, log, config.epochs_wnll, wnll_shuffle, False, f"alt{a}")
                log.record_boundary(model, f"alt{a}:wnll")
    return log


def augment_dataset(data, mode, tvm_config=None, seed=0):
    """``original``, ``tvm`` (TVM copies only) or ``original_plus_tvm``."""
    if mode not in AUGMENTATIONS:
        raise ValueError(f"unknown augmentation {mode!r}")
    if mode == "original":
        return data
    tvm_config = TvmConfig() if tvm_config is None else tvm_config
    tv = Dataset(apply_tvm_batch(data.x, tvm_config, seed), data.y.copy(), data.n_classes)
    return tv if mode == "tvm" else data.concat(tv)


def pgd_adv_train(model, data, config):
    """PGD adversarial training of both branches, alternating ``config.alternations`` times.

    Phase A trains DNN + buffer + linear head on IFGSM-perturbed batches
    crafted against the linear head. Phase B re-splits a stratified template
    off the data, perturbs the remaining batches with the approximate WNLL
    gradient and applies the straight-through update (buffer weights only).
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    log = TrainingLog()
    log.record_boundary(model, "start")
    shuffle = substream(config.seed, "shuffle")
    wnll_shuffle = np.random.default_rng([config.seed, 3, 1])
    template_rng = substream(config.seed, "template")
    with _abort_guard(model, log):
        for a in range(config.alternations):
            _linear_epochs(model, data, config, log, config.epochs_linear, shuffle, True, f"alt{a}")
            log.record_boundary(model, f"alt{a}:linear")
            if config.epochs_wnll:
                template, rest = mdl.reserve_template(data, config.template_size, template_rng)
                _wnll_epochs(model, rest, template, config, log, config.epochs_wnll, wnll_shuffle, True, f"alt{a}")
                log.record_boundary(model, f"alt{a}:wnll")
    return log


def evaluate_accuracy(model, data, head="linear", template=None, batch_size=100, k=mdl.DEFAULT_K):
    if head == "linear":
        pred = mdl.predict_linear(model, data.x)
    else:
        pred = mdl.predict_wnll(model, data.x, template, batch_size=batch_size, k=k)
    return float(np.mean(pred == data.y))
