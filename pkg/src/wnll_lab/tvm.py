"""Total variation minimisation of Bernoulli-subsampled images.

Solves ``min_z 1/2 |mask * (z - x)|^2 + lam * TV(z)`` by gradient descent with
step halving, where ``mask == 1`` marks kept pixels and TV is the smoothed
isotropic total variation with forward differences and replicate boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TvmConfig:
    keep_prob: float = 0.5
    lambda_tv: float = 0.03
    iters: int = 100
    step: float = 0.2
    eps_tv: float = 1e-6
    max_halvings: int = 20

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise ValueError("keep_prob must be in (0, 1]")
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be >= 0")
        if self.eps_tv <= 0:
            raise ValueError("eps_tv must be > 0")


@dataclass
class TvmResult:
    z: np.ndarray
    objective: list = field(default_factory=list)
    fidelity_l2: float = 0.0  # unsquared masked residual norm


def sample_mask(shape, keep_prob, rng):
    """I.i.d. Bernoulli(keep_prob) mask; 1 = kept pixel."""
    if not 0 < keep_prob <= 1:
        raise ValueError("keep_prob must be in (0, 1]")
    return (rng.random(shape) < keep_prob).astype(np.float64)


def _diffs(z):
    dh = np.zeros_like(z)
    dv = np.zeros_like(z)
    dh[..., :, :-1] = z[..., :, 1:] - z[..., :, :-1]
    dv[..., :-1, :] = z[..., 1:, :] - z[..., :-1, :]
    return dh, dv


def tv2(z, eps_tv=1e-6):
    """Smoothed isotropic TV summed over pixels (and leading channel axes)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2 or z.shape[-1] < 2 or z.shape[-2] < 2:
        raise ValueError(f"tv2 needs at least 2x2 images, got {z.shape}")
    dh, dv = _diffs(z)
    return float(np.sum(np.sqrt(dh * dh + dv * dv + eps_tv * eps_tv) - eps_tv))


def tv2_grad(z, eps_tv=1e-6):
    dh, dv = _diffs(z)
    mag = np.sqrt(dh * dh + dv * dv + eps_tv * eps_tv)
    ph = dh / mag
    pv = dv / mag
    g = np.zeros_like(z)
    # adjoint of the forward differences
    g[..., :, :-1] -= ph[..., :, :-1]
    g[..., :, 1:] += ph[..., :, :-1]
    g[..., :-1, :] -= pv[..., :-1, :]
    g[..., 1:, :] += pv[..., :-1, :]
    return g


def tvm_objective(z, x, mask, config):
    r = mask * (z - x)
    return 0.5 * float(np.sum(r * r)) + config.lambda_tv * tv2(z, config.eps_tv)


def tvm_reconstruct(x, mask, config, return_result=False):
    """Reconstruct a TV-simplified image from the kept pixels of ``x``.

    Starts from ``z = x``. Each iteration tries ``config.step`` and halves it
    (at most ``max_halvings`` times) until the objective does not increase;
    if no step helps the iteration is skipped. Output is clamped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ValueError(f"mask {mask.shape} does not match image {x.shape}")
    z = x.copy()
    f = tvm_objective(z, x, mask, config)
    history = [f]
    if not np.isfinite(f):
        raise FloatingPointError("TVM objective is not finite")
    for _ in range(config.iters):
        g = mask * mask * (z - x)
        if config.lambda_tv:
            g = g + config.lambda_tv * tv2_grad(z, config.eps_tv)
        step = config.step
        for _ in range(config.max_halvings + 1):
            cand = z - step * g
            fc = tvm_objective(cand, x, mask, config)
            if not np.isfinite(fc):
                raise FloatingPointError("TVM objective is not finite")
            if fc <= f:
                z, f = cand, fc
                break
            step *= 0.5
        history.append(f)
    z = np.clip(z, 0.0, 1.0)
    if return_result:
        r = mask * (z - x)
        return TvmResult(z, history, float(np.sqrt(np.sum(r * r))))
    return z


def image_seeds(seed, n):
    """Per-image seed sequences; serial and parallel runs see the same masks."""
    return np.random.SeedSequence([int(seed), 1]).spawn(n)


def apply_tvm_batch(images, config, seed=0):
    """TVM each image with its own mask stream; order preserved."""
    images = np.asarray(images, dtype=np.float64)
    out = np.empty_like(images)
    for i, ss in enumerate(image_seeds(seed, len(images))):
        rng = np.random.default_rng(ss)
        mask = sample_mask(images[i].shape, config.keep_prob, rng)
        out[i] = tvm_reconstruct(images[i], mask, config)
    return out
