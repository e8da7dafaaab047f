"""Fast invariant checks runnable from the command line."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .attacks import AttackConfig, GradientOracle, fgsm, ifgsm
from .checkpoint import decode_checkpoint, encode_checkpoint
from .data import gen_synthetic
from .graph import TemplateSet, build_knn_graph, harmonic_extend, wnll_boost, wnll_interpolate
from .tvm import TvmConfig, sample_mask, tvm_reconstruct


def _dense_solve(graph, template, boost):
    n = graph.n
    w = graph.to_sparse().toarray()
    ws = w + w.T
    lab = np.zeros(n, dtype=bool)
    lab[template.indices] = True
    unl = np.flatnonzero(~lab)
    coef = ws + boost * (lab[:, None] * w).T  # coef[x, y] gains boost * w(y, x) for labelled y
    a = np.diag(coef[unl].sum(axis=1)) - coef[np.ix_(unl, unl)]
    rhs = coef[np.ix_(unl, template.indices)] @ template.labels
    u = np.zeros((n, template.n_classes))
    u[template.indices] = template.labels
    u[unl] = np.linalg.solve(a, rhs)
    return u


def check_interpolation(n_instances=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(10, 40))
        m = int(rng.integers(2, 5))
        g = build_knn_graph(rng.normal(size=(n, 3)), k=int(rng.integers(3, 9)))
        n_te = int(rng.integers(m, n // 2))
        idx = rng.choice(n, n_te, replace=False)
        te = TemplateSet.from_classes(idx, np.concatenate([np.arange(m), rng.integers(0, m, n_te - m)]), m)
        for fn, boost in ((harmonic_extend, 0.0), (wnll_interpolate, wnll_boost(n, n_te))):
            u = fn(g, te)
            worst = max(worst, float(np.max(np.abs(u - _dense_solve(g, te, boost)))))
            if not np.array_equal(u[te.indices], te.labels):
                return False, "template rows changed"
            if np.max(np.abs(u.sum(axis=1) - 1)) > 1e-8 or u.min() < -1e-8 or u.max() > 1 + 1e-8:
                return False, "row sums or range violated"
    return worst <= 1e-8, f"max deviation from dense solve {worst:.2e}"


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    model = mdl.TwoBranchModel(mdl.get_spec("mlp2d", 3), seed=seed)
    x = rng.normal(size=(4, 2))
    y = rng.integers(0, 3, 4)

    def loss():
        return ad.softmax_cross_entropy(mdl.forward_linear(model, x).logits, y)

    model.zero_grad()
    loss().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        g = p.grad.copy()
        num = np.zeros_like(p.data)
        with ad.no_grad():
            for i in np.ndindex(p.data.shape):
                old = p.data[i]
                p.data[i] = old + 1e-6
                hi = loss().item()
                p.data[i] = old - 1e-6
                lo = loss().item()
                p.data[i] = old
                num[i] = (hi - lo) / 2e-6
        denom = max(np.linalg.norm(num), np.linalg.norm(g), 1e-12)
        worst = max(worst, float(np.linalg.norm(num - g) / denom))
    return worst <= 1e-5, f"max relative gradient error {worst:.2e}"


def check_attacks(seed=0):
    data = gen_synthetic("blobs", 40, 0.1, seed)
    model = mdl.TwoBranchModel(mdl.get_spec("mlp2d", 2), seed=seed)
    oracle = GradientOracle(model)
    eps = 0.3
    a = fgsm(oracle, data.x, data.y, AttackConfig(epsilon=eps, clip_lo=-10, clip_hi=10))
    b = ifgsm(oracle, data.x, data.y, AttackConfig(epsilon=eps, alpha=eps, iters=1, clip_lo=-10, clip_hi=10))
    if a.linf_distance.max() > eps + 1e-12 or b.linf_distance.max() > eps + 1e-12:
        return False, "l-inf budget exceeded"
    return bool(np.array_equal(a.perturbed, b.perturbed)), "IFGSM(1 step, alpha=eps) vs FGSM"


def check_tvm(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 16, 16))
    res = tvm_reconstruct(x, sample_mask(x.shape, 0.5, rng), TvmConfig(iters=30), return_result=True)
    ok = all(b <= a for a, b in zip(res.objective, res.objective[1:]))
    return ok, f"objective {res.objective[0]:.4f} -> {res.objective[-1]:.4f}"


def check_checkpoint(seed=0):
    model = mdl.TwoBranchModel(mdl.get_spec("mlp2d", 2), seed=seed)
    blob = encode_checkpoint(model, seed)
    back, _ = decode_checkpoint(blob)
    return encode_checkpoint(back, seed) == blob, "save -> load -> save"


CHECKS = {
    "interpolation": check_interpolation,
    "gradients": check_gradients,
    "attacks": check_attacks,
    "tvm": check_tvm,
    "checkpoint": check_checkpoint,
}


def run_all(seed=0):
    """``[(name, ok, detail)]`` for every check."""
    return [(name, *fn(seed=seed)) for name, fn in CHECKS.items()]
