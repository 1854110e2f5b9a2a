"""Certification of posterior-ensemble predictions with IBP.

For a fixed set of weight samples w_1..w_N and label y, the worst-case
predictor has entry y equal to mean_i softmax_y of the worst-case logits of
w_i (lower bound at y, upper elsewhere) and, for every other class c, the
mean of the best-case softmax_c (upper bound at c, lower elsewhere).  If its
argmax is y, no input in the ball changes the ensemble's prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .interval import ensemble_ibp
from .network import _batch_arrays, _sample_matrix, predict_ensemble

DEFAULT_SAMPLES = {"gaussian": 100, "swag": 100, "samples": 25}
RADIUS_CAP = 1.0
CHUNK = 250


@dataclass(frozen=True)
class CertifiedPrediction:
    plain: np.ndarray
    worst_case: np.ndarray
    certified: bool
    label: int


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _worst_case_chunk(arch, S, x, y, eps, clip):
    L, U = ensemble_ibp(arch, S, x, eps, clip)           # (N, B, C)
    C = L.shape[-1]
    eye = np.eye(C, dtype=bool)
    onehot = y[:, None] == np.arange(C)                   # (B, C)
    # lower bound on softmax_y: L at y, U elsewhere
    worst_y = np.exp(_log_softmax(np.where(onehot, L, U)))
    lb_y = worst_y.mean(axis=0)[onehot]                   # (B,)
    # upper bound on softmax_c for every c: row c uses U at c and L elsewhere
    M = np.where(eye, U[..., None, :], L[..., None, :])   # (N, B, C, C)
    ub = np.exp(_log_softmax(M))[..., eye].mean(axis=0)   # (B, C)
    return np.where(onehot, lb_y[:, None], ub)


def worst_case_predictor(arch, samples, x, y, eps, clip=None):
    """Worst-case ensemble predictor for a batch: shape (B, C)."""
    S = _sample_matrix(arch, samples)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    e = np.broadcast_to(np.asarray(eps, dtype=np.float64), (len(x),))
    if np.any(e < 0):
        raise UsageError("epsilon must be non-negative")
    if np.any(y < 0) or np.any(y >= arch.class_count):
        raise UsageError("label out of range")
    return np.concatenate([_worst_case_chunk(arch, S, x[i:i + CHUNK], y[i:i + CHUNK],
                                             e[i:i + CHUNK], clip)
                           for i in range(0, len(x), CHUNK)])


def _is_certified(worst, y):
    return np.argmax(worst, axis=-1) == y


def certify_batch(arch, samples, x, y, eps, clip=None):
    """(plain predictive, worst-case predictor, certified flags) for a batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    worst = worst_case_predictor(arch, samples, x, y, eps, clip)
    plain = predict_ensemble(arch, samples, x)
    return plain, worst, _is_certified(worst, y)


def certify_point(arch, samples, x, y, eps, clip=None):
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    plain, worst, cert = certify_batch(arch, samples, x, [y], eps, clip)
    return CertifiedPrediction(plain[0], worst[0], bool(cert[0]), int(y))


def certified_robust_accuracy(arch, samples, testset, eps, clip=None):
    """Fraction of test points whose ensemble prediction is IBP-certified at eps."""
    x, y = _batch_arrays(testset)
    if len(y) == 0:
        raise UsageError("empty test set")
    worst = worst_case_predictor(arch, samples, x, y, eps, clip)
    return float(np.mean(_is_certified(worst, y)))


def max_certified_radius(arch, samples, x, y, tol=1e-3, clip=None, cap=RADIUS_CAP):
    """Largest certified eps (to within ``tol``) by doubling then bisection.

    Works on one point or a batch; misclassified points get 0 and points still
    certified at ``cap`` get ``cap``.
    """
    if not tol > 0:
        raise UsageError("tol must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    Y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(X),)).copy()
    S = _sample_matrix(arch, samples)

    def certified(eps, mask):
        ok = np.zeros(len(X), dtype=bool)
        idx = np.flatnonzero(mask)
        if len(idx):
            worst = worst_case_predictor(arch, S, X[idx], Y[idx], eps[idx], clip)
            ok[idx] = _is_certified(worst, Y[idx])
        return ok

    correct = certified(np.zeros(len(X)), np.ones(len(X), dtype=bool))
    lo = np.zeros(len(X))
    hi = np.full(len(X), min(tol, cap))
    growing = correct.copy()
    while growing.any():
        ok = certified(hi, growing)
        at_cap = ok & (hi >= cap)
        lo = np.where(ok, hi, lo)
        growing = ok & ~at_cap
        hi = np.where(growing, np.minimum(2 * hi, cap), hi)
    done = ~correct | (lo >= cap)
    while True:
        active = ~done & (hi - lo > tol)
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        ok = certified(mid, active)
        lo = np.where(active & ok, mid, lo)
        hi = np.where(active & ~ok, mid, hi)
    out = np.where(correct, lo, 0.0)
    return float(out[0]) if single else out


__all__ = ["CertifiedPrediction", "certify_point", "certify_batch", "certified_robust_accuracy",
           "max_certified_radius", "worst_case_predictor", "DEFAULT_SAMPLES"]
