"""FGSM and PGD attacks on the posterior-ensemble predictor (l-infinity ball)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .network import _batch_arrays, _sample_matrix, ensemble_logits, predict_ensemble

# points attacked per vectorized chunk
CHUNK = 250


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings.  ``step_size=None`` means 2.5 * eps / steps.

    ``clip`` is the valid input range, or None for unbounded inputs.
    Restart 0 starts at x; further restarts start uniformly inside the ball.
    """

    eps: float
    steps: int = 10
    step_size: float | None = None
    clip: tuple | None = (0.0, 1.0)
    restarts: int = 1

    def __post_init__(self):
        if not self.eps >= 0:
            raise UsageError("attack eps must be non-negative")
        if self.steps < 0:
            raise UsageError("attack steps must be non-negative")
        if self.step_size is not None and not self.step_size > 0:
            raise UsageError("attack step_size must be positive")
        if self.restarts < 1:
            raise UsageError("attack restarts must be at least 1")

    @property
    def step(self):
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / self.steps if self.steps else 0.0

    def with_eps(self, eps):
        return replace(self, eps=float(eps))


def ensemble_loss(arch, samples, x, y):
    """Per-point cross-entropy of the ensemble predictive: -log mean_n softmax_y."""
    logits = ensemble_logits(arch, samples, x)              # (N, B, C)
    logp = ad.pick(ad.log_softmax(logits), y[None, :])      # (N, B)
    n = logp.shape[0]
    return math.log(n) - ad.logsumexp(ad.transpose(logp), axis=-1)


def _loss_and_grad(arch, S, x, y):
    xt = ad.Tensor(x, requires_grad=True, batched=True)
    with ad.GradTape() as tape:
        loss = ensemble_loss(arch, S, xt, y)
        total = ad.sum(loss)
    grads = ad.backward(tape, total)
    return loss.data, grads.get(xt, np.zeros_like(x))


def _project(x_adv, x, eps, clip):
    out = np.clip(x_adv, x - eps, x + eps)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def _pgd_chunk(arch, S, x, y, cfg, rng):
    best, best_loss = x, None
    step = cfg.step
    for r in range(cfg.restarts):
        if r == 0:
            xa = _project(x, x, cfg.eps, cfg.clip)
        else:
            if rng is None:
                raise UsageError("random restarts need an rng")
            xa = _project(x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape), x, cfg.eps, cfg.clip)
        for _ in range(cfg.steps):
            _, g = _loss_and_grad(arch, S, xa, y)
            xa = _project(xa + step * np.sign(g), x, cfg.eps, cfg.clip)
        if cfg.restarts == 1:
            return xa
        loss, _ = _loss_and_grad(arch, S, xa, y)
        if best_loss is None:
            best, best_loss = xa, loss
        else:
            better = loss > best_loss
            best = np.where(better[:, None], xa, best)
            best_loss = np.where(better, loss, best_loss)
    return best


def pgd_attack(arch, weight_samples, x, y, cfg, rng=None):
    """Sign-gradient ascent on the ensemble cross-entropy, projected onto the
    (clipped) eps-ball after every step.  Returns x unchanged when eps or steps is 0.
    """
    S = _sample_matrix(arch, weight_samples)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    Y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(X),))
    if cfg.steps == 0 or cfg.eps == 0:
        return x.copy()
    out = np.concatenate([_pgd_chunk(arch, S, X[i:i + CHUNK], Y[i:i + CHUNK], cfg, rng)
                          for i in range(0, len(X), CHUNK)])
    return out[0] if single else out


def fgsm_attack(arch, weight_samples, x, y, eps, clip=(0.0, 1.0)):
    """A single full-size sign-gradient step."""
    cfg = AttackConfig(eps=eps, steps=1, step_size=eps if eps > 0 else None, clip=clip)
    return pgd_attack(arch, weight_samples, x, y, cfg)


def empirical_robust_accuracy(arch, weight_samples, testset, cfg, rng=None):
    """Fraction of points classified correctly both at x and at the PGD point.

    An optimistic (upper) estimate of the true robust accuracy.
    """
    x, y = _batch_arrays(testset)
    if len(y) == 0:
        raise UsageError("empty test set")
    clean = np.argmax(predict_ensemble(arch, weight_samples, x), axis=-1) == y
    x_adv = pgd_attack(arch, weight_samples, x, y, cfg, rng)
    adv = np.argmax(predict_ensemble(arch, weight_samples, x_adv), axis=-1) == y
    return float(np.mean(clean & adv))
