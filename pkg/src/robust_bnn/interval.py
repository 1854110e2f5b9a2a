"""Interval bound propagation (IBP) over the l-infinity ball.

Boxes are carried as (lower, upper) tensor pairs.  Affine layers use the
centre/radius form: with centre m = (U+L)/2 and radius r = (U-L)/2 the image
box is [Wm + b - |W|r, Wm + b + |W|r].  Monotone activations map the two
bounds directly.  Everything is built from autodiff ops, so bounds are
differentiable with respect to the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, UsageError
from .network import _as_input, ensemble_params, layer_params

# Only activations known to be monotone non-decreasing may be propagated
# bound-to-bound.
MONOTONE_ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class IntervalTensor:
    lower: ad.Tensor
    upper: ad.Tensor

    def __post_init__(self):
        lo, up = ad.as_tensor(self.lower), ad.as_tensor(self.upper)
        if lo.shape != up.shape:
            raise DimensionError(f"bound shapes differ: {lo.shape} vs {up.shape}")
        if np.any(lo.data > up.data):
            raise UsageError("interval lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def shape(self):
        return self.lower.shape

    def contains(self, values, atol=0.0):
        v = np.asarray(values)
        return np.all((v >= self.lower.data - atol) & (v <= self.upper.data + atol), axis=-1)


@dataclass(frozen=True)
class WorstCaseLogits:
    """Lower logit bound at the target class, upper bounds at all other classes."""

    values: ad.Tensor
    target_class: object


def _eps_array(eps, batch):
    e = np.asarray(eps, dtype=np.float64)
    if np.any(e < 0) or not np.isfinite(e).all():
        raise UsageError("epsilon must be finite and non-negative")
    if e.ndim == 1:
        if batch is None or len(e) != batch:
            raise DimensionError("per-point epsilon must have one entry per input")
        e = e[:, None]
    elif e.ndim > 1:
        raise DimensionError("epsilon must be a scalar or a vector")
    return e


def _clip_range(clip):
    if clip is None or clip is False:
        return None
    if clip is True:
        return (0.0, 1.0)
    lo, hi = clip
    return float(lo), float(hi)


def input_ball(x, eps, clip=None):
    """The box [x - eps, x + eps], intersected with ``clip`` (e.g. (0, 1)) if given.

    ``eps`` may be a scalar or, for a batch, one radius per row.
    """
    arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
    e = _eps_array(eps, arr.shape[0] if arr.ndim == 2 else None)
    lo, up = arr - e, arr + e
    rng = _clip_range(clip)
    if rng is not None:
        lo = np.clip(lo, *rng)
        up = np.clip(up, *rng)
    batched = arr.ndim == 2
    return IntervalTensor(ad.Tensor(lo, batched=batched), ad.Tensor(up, batched=batched))


def propagate_affine(W, b, box):
    """Image of ``box`` under x -> W x + b (rows of a batched box are independent)."""
    W, b = ad.as_tensor(W), ad.as_tensor(b)
    lo, up = box.lower, box.upper
    if W.shape[-1] != lo.shape[-1]:
        raise DimensionError(f"weight {W.shape} does not match box width {lo.shape[-1]}")
    single = lo.ndim == 1
    if single:
        lo, up = ad.reshape(lo, (1, -1)), ad.reshape(up, (1, -1))
    centre = (up + lo) * 0.5
    radius = (up - lo) * 0.5
    mu = ad.matmul(centre, ad.transpose(W)) + b
    r = ad.matmul(radius, ad.transpose(ad.abs(W)))
    lower, upper = mu - r, mu + r
    if single:
        lower, upper = ad.reshape(lower, (-1,)), ad.reshape(upper, (-1,))
    return IntervalTensor(lower, upper)


def propagate_monotone_activation(h, box):
    """[h(L), h(U)] for a registered monotone activation name."""
    fn = MONOTONE_ACTIVATIONS.get(h) if isinstance(h, str) else None
    if fn is None:
        raise UsageError(f"activation {h!r} is not registered as monotone non-decreasing")
    return IntervalTensor(fn(box.lower), fn(box.upper))


def ibp_forward(arch, w, x, eps, clip=None):
    """Logit bounds valid for every input in the (clipped) eps-ball around x."""
    h, single = _as_input(arch, x)
    box = ibp_apply(arch, layer_params(arch, w), input_ball(h, eps, clip))
    if single:
        return IntervalTensor(ad.reshape(box.lower, (-1,)), ad.reshape(box.upper, (-1,)))
    return box


def ibp_apply(arch, params, box):
    """Propagate an input box through the layers given per-layer (W, b).

    Stacked parameters (leading sample axis) give stacked output boxes.
    """
    params = iter(params)
    for layer in arch.layers:
        if layer.kind == "dense":
            W, b = next(params)
            box = propagate_affine(W, b, box)
        else:
            box = propagate_monotone_activation(layer.kind, box)
    return box


def ensemble_ibp(arch, samples, x, eps, clip=None):
    """Logit bounds of every weight sample for a batch x: lower, upper of shape (N, B, C)."""
    h, _ = _as_input(arch, x)
    box = ibp_apply(arch, ensemble_params(arch, samples), input_ball(h, eps, clip))
    return box.lower.data, box.upper.data


def _class_mask(box, cls):
    C = box.shape[-1]
    c = np.asarray(cls, dtype=np.int64)
    if np.any(c < 0) or np.any(c >= C):
        raise UsageError(f"class index out of range [0, {C})")
    if box.lower.ndim == 2 and c.ndim == 0:
        c = np.full(box.shape[0], c)
    return c[..., None] == np.arange(C)


def worst_case_logits(box, y):
    """Lower bound at class y, upper bound at every other class."""
    mask = _class_mask(box, y)
    return WorstCaseLogits(ad.where(mask, box.lower, box.upper), y)


def best_case_logits(box, c):
    """Upper bound at class c, lower bound at every other class."""
    return ad.where(_class_mask(box, c), box.upper, box.lower)


def ibp_log_softmax_lower(arch, w, x, y, eps, clip=None):
    """log of the IBP lower bound on the class-y softmax (per row for batches)."""
    box = ibp_forward(arch, w, x, eps, clip)
    worst = worst_case_logits(box, y).values
    return ad.pick(ad.log_softmax(worst), y)


def ibp_softmax_lower(arch, w, x, y, eps, clip=None):
    """Lower bound on min over the eps-ball of softmax_y(f^w(x'))."""
    return ad.exp(ibp_log_softmax_lower(arch, w, x, y, eps, clip))
