"""Robust categorical likelihood: the class probability is replaced by its
worst case over an l-infinity ball whose radius is itself random.

    nll_i = -log E_{eps ~ p_eps}[ min_{|x'-x_i| <= eps} softmax_{y_i}(f^w(x')) ]

The inner minimum is lower-bounded with IBP (giving an upper bound on the NLL)
or approximated with PGD.  All mixtures are evaluated in log space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .interval import ibp_forward, ibp_log_softmax_lower
from .network import _batch_arrays, forward, pack

KINDS = ("dirac", "discrete", "rayleigh", "exponential")

# probabilities below this are reported as underflow events
UNDERFLOW_PROB = 1e-30


@dataclass(frozen=True)
class EpsilonDistribution:
    """Law of the perturbation radius.

    dirac: eps = 0.  discrete: eps = 0 with probability lam, else eta.
    rayleigh: scale eta.  exponential: mean eta.  Continuous laws are averaged
    by Monte Carlo with ``mc_samples`` draws shared across a batch.
    """

    kind: str = "dirac"
    lam: float = 1.0
    eta: float = 0.0
    mc_samples: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown epsilon distribution {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError("lambda must lie in [0, 1]")
        if self.kind != "dirac" and not self.eta > 0:
            raise UsageError("eta must be positive")
        if self.mc_samples < 1:
            raise UsageError("mc_samples must be at least 1")

    @classmethod
    def dirac(cls):
        return cls("dirac")

    @classmethod
    def discrete(cls, lam, eta):
        return cls("discrete", float(lam), float(eta))

    @classmethod
    def rayleigh(cls, eta, mc_samples=10):
        return cls("rayleigh", 1.0, float(eta), int(mc_samples))

    @classmethod
    def exponential(cls, eta, mc_samples=10):
        return cls("exponential", 1.0, float(eta), int(mc_samples))

    @property
    def is_dirac(self):
        return self.kind == "dirac" or (self.kind == "discrete" and self.lam == 1.0)

    @property
    def is_continuous(self):
        return self.kind in ("rayleigh", "exponential")

    def with_eta(self, eta):
        if self.kind == "dirac":
            return self
        return replace(self, eta=float(eta))


def sample_epsilon(p_eps, rng, size=None):
    """Draw radii from ``p_eps`` (a scalar when size is None)."""
    n = 1 if size is None else size
    if p_eps.kind == "dirac":
        out = np.zeros(n)
    elif p_eps.kind == "discrete":
        out = np.where(rng.random(n) < p_eps.lam, 0.0, p_eps.eta)
    else:
        u = 1.0 - rng.random(n)  # in (0, 1]
        if p_eps.kind == "rayleigh":
            out = p_eps.eta * np.sqrt(-2.0 * np.log(u))
        else:
            out = -p_eps.eta * np.log(u)
    return float(out[0]) if size is None else out


@dataclass(frozen=True)
class RampSchedule:
    """Linear warm-up of eta to ``target_eta * (1 + overshoot)``."""

    target_eta: float
    warmup_epochs: float
    overshoot: float = 0.10

    def __post_init__(self):
        if self.target_eta < 0 or self.warmup_epochs < 0 or self.overshoot < 0:
            raise UsageError("ramp parameters must be non-negative")

    def eta(self, t):
        """eta at (fractional) epoch ``t``."""
        frac = 1.0 if self.warmup_epochs == 0 else min(1.0, max(t, 0.0) / self.warmup_epochs)
        return self.target_eta * (1.0 + self.overshoot) * frac


class UnderflowCounter:
    """Counts examples whose robust probability fell below ``UNDERFLOW_PROB``."""

    def __init__(self):
        self.count = 0

    def observe(self, nll):
        bad = int(np.sum(nll.data > -math.log(UNDERFLOW_PROB)))
        if bad:
            if self.count == 0:
                warnings.warn(f"robust probability below {UNDERFLOW_PROB:g} for {bad} example(s)",
                              RuntimeWarning, stacklevel=3)
            self.count += bad


def _mix(log_terms, log_weights):
    """-log sum_j exp(log_weights[j] + log_terms[j]) over the stacked last axis."""
    parts = [t + lw for t, lw in zip(log_terms, log_weights)]
    return -ad.logsumexp(ad.stack(parts), axis=-1)


def _clean_logprob(arch, w, x, y):
    return ad.pick(ad.log_softmax(forward(arch, w, x)), y)


def _robust_terms(arch, w, batch, p_eps, worst_logprob, rng):
    x, y = _batch_arrays(batch)
    if len(y) == 0:
        raise UsageError("empty batch")
    if p_eps.is_dirac:
        return -_clean_logprob(arch, w, x, y)
    if p_eps.kind == "discrete":
        if p_eps.lam == 0.0:
            return -worst_logprob(x, y, p_eps.eta)
        return _mix([_clean_logprob(arch, w, x, y), worst_logprob(x, y, p_eps.eta)],
                    [math.log(p_eps.lam), math.log1p(-p_eps.lam)])
    if rng is None:
        raise UsageError("continuous epsilon laws need an rng")
    radii = sample_epsilon(p_eps, rng, size=p_eps.mc_samples)
    terms = [worst_logprob(x, y, e) for e in radii]
    return _mix(terms, [-math.log(len(terms))] * len(terms))


def robust_nll_ibp_terms(arch, w, batch, p_eps, rng=None, clip=None, counter=None):
    """Per-example IBP robust NLL (a batched vector Tensor)."""
    def worst(x, y, e):
        return ibp_log_softmax_lower(arch, w, x, y, e, clip)

    out = _robust_terms(arch, w, batch, p_eps, worst, rng)
    if counter is not None:
        counter.observe(out)
    return out


def robust_nll_ibp(arch, w, batch, p_eps, rng=None, clip=None, counter=None):
    """Summed robust NLL with the worst case bounded by IBP.

    An upper bound on the exact robust NLL; equals :func:`standard_nll` for
    the Dirac law.
    """
    return ad.sum(robust_nll_ibp_terms(arch, w, batch, p_eps, rng, clip, counter))


def numeric_weights(arch, w):
    """Plain weight vector from an array, a flat Tensor or a leaf list."""
    if isinstance(w, (list, tuple)):
        return pack(arch, [(w[2 * i].data, w[2 * i + 1].data) for i in range(len(w) // 2)])
    if isinstance(w, ad.Tensor):
        return w.data
    return np.asarray(w, dtype=np.float64)


def robust_nll_pgd_terms(arch, w, batch, p_eps, attack_config, rng=None, counter=None):
    """Per-example robust NLL with the worst case approximated by PGD.

    The attack targets the single network w; the adversarial inputs are
    treated as constants when differentiating.  Not a bound.
    """
    from .attacks import pgd_attack

    w_num = numeric_weights(arch, w)

    def worst(x, y, e):
        cfg = attack_config.with_eps(e)
        x_adv = pgd_attack(arch, w_num[None, :], x, y, cfg)
        return _clean_logprob(arch, w, x_adv, y)

    out = _robust_terms(arch, w, batch, p_eps, worst, rng)
    if counter is not None:
        counter.observe(out)
    return out


def robust_nll_pgd(arch, w, batch, p_eps, attack_config, rng=None, counter=None):
    return ad.sum(robust_nll_pgd_terms(arch, w, batch, p_eps, attack_config, rng, counter))


def robust_gaussian_nll_regression(arch, w, x, y, p_eps, variance, rng=None, clip=None):
    """Gaussian NLL of a single-output regressor using the worse of the
    expected upper and expected lower output bounds.

        0.5 log(2 pi S) + max((E[f_max] - y)^2, (E[f_min] - y)^2) / (2 S)

    f_max / f_min are the IBP upper / lower output bounds; summed over a batch.
    """
    if arch.class_count != 1:
        raise UsageError("regression likelihood needs a single-output network")
    if not variance > 0:
        raise UsageError("variance must be positive")
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(1, -1) if x.ndim == 1 else x
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)

    def bounds(e):
        box = ibp_forward(arch, w, x, e, clip)
        return box.upper, box.lower

    if p_eps.is_dirac:
        up = lo = forward(arch, w, x)
    elif p_eps.kind == "discrete":
        clean = forward(arch, w, x)
        u, l = bounds(p_eps.eta)
        up = clean * p_eps.lam + u * (1.0 - p_eps.lam)
        lo = clean * p_eps.lam + l * (1.0 - p_eps.lam)
    else:
        if rng is None:
            raise UsageError("continuous epsilon laws need an rng")
        pairs = [bounds(e) for e in sample_epsilon(p_eps, rng, size=p_eps.mc_samples)]
        up = ad.mean(ad.stack([u for u, _ in pairs]), axis=-1)
        lo = ad.mean(ad.stack([l for _, l in pairs]), axis=-1)
    sq = ad.maximum(ad.square(up - y), ad.square(lo - y))
    const = 0.5 * math.log(2.0 * math.pi * variance)
    return ad.sum(sq * (0.5 / variance) + const)


# ------------------------------------------------------------ training objects


class StandardLikelihood:
    name = "standard"

    def terms(self, arch, w, batch, rng=None):
        x, y = _batch_arrays(batch)
        return -_clean_logprob(arch, w, x, y)

    def with_eta(self, eta):
        return self


class IBPLikelihood:
    name = "ibp"

    def __init__(self, p_eps, clip=None):
        self.p_eps = p_eps
        self.clip = clip
        self.counter = UnderflowCounter()

    def terms(self, arch, w, batch, rng=None):
        return robust_nll_ibp_terms(arch, w, batch, self.p_eps, rng, self.clip, self.counter)

    def with_eta(self, eta):
        other = IBPLikelihood(self.p_eps.with_eta(eta), self.clip)
        other.counter = self.counter
        return other


class PGDLikelihood:
    name = "pgd"

    def __init__(self, p_eps, attack_config):
        self.p_eps = p_eps
        self.attack_config = attack_config
        self.counter = UnderflowCounter()

    def terms(self, arch, w, batch, rng=None):
        return robust_nll_pgd_terms(arch, w, batch, self.p_eps, self.attack_config, rng,
                                    self.counter)

    def with_eta(self, eta):
        other = PGDLikelihood(self.p_eps.with_eta(eta), self.attack_config)
        other.counter = self.counter
        return other
