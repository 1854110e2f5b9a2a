"""Hamiltonian Monte Carlo with a leapfrog integrator and Metropolis correction.

The Hamiltonian is H(w, v) = U(w) + sum_i v_i^2 / (2 m_i).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, UsageError
from .posterior import SamplePosterior

log = logging.getLogger("robust_bnn.inference")


@dataclass(frozen=True)
class HMCConfig:
    step_size: float = 0.5
    leapfrog_steps: int = 3
    mass: object = 1.0
    burn_in: int = 100
    num_samples: int = 1000
    thin: int = 1
    max_energy_error: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.leapfrog_steps < 1:
            raise UsageError("leapfrog_steps must be at least 1")
        if not self.step_size > 0:
            raise UsageError("step_size must be positive")
        if np.any(np.asarray(self.mass) <= 0):
            raise UsageError("masses must be positive")
        if self.burn_in < 0 or self.num_samples < 1 or self.thin < 1:
            raise UsageError("burn_in >= 0, num_samples >= 1 and thin >= 1 required")


@dataclass
class HMCChain:
    samples: np.ndarray
    step_size: float
    leapfrog_steps: int
    mass: object
    burn_in: int
    proposed: int = 0
    accepted: int = 0
    divergent: int = 0
    energy_errors: list = field(default_factory=list)

    @property
    def acceptance_rate(self):
        return self.accepted / self.proposed if self.proposed else float("nan")

    def stats(self):
        return {"proposed": self.proposed, "accepted": self.accepted,
                "divergent": self.divergent, "acceptance_rate": self.acceptance_rate}

    def to_posterior(self):
        return SamplePosterior(self.samples, self.stats())


def kinetic(v, mass):
    return 0.5 * float(np.sum(v * v / mass))


def leapfrog(potential, w, v, grad, step_size, steps, mass):
    """Integrate (w, v) for ``steps`` leapfrog steps.  Returns (w, v, U, grad)."""
    v = v - 0.5 * step_size * grad
    for i in range(steps):
        w = w + step_size * v / mass
        u, grad = potential(w)
        if i < steps - 1:
            v = v - step_size * grad
    v = v - 0.5 * step_size * grad
    return w, v, u, grad


def hmc_run(potential, init, config, rng=None):
    """Sample from exp(-U) where ``potential(w)`` returns (U(w), grad U(w)).

    Trajectories whose energy error exceeds ``max_energy_error`` (or whose
    arithmetic fails) count as divergent and are rejected.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    w = np.array(init, dtype=np.float64)
    mass = np.broadcast_to(np.asarray(config.mass, dtype=np.float64), w.shape)
    u, grad = potential(w)
    total = config.burn_in + config.num_samples * config.thin
    kept = []
    chain = HMCChain(np.empty((0, w.size)), config.step_size, config.leapfrog_steps,
                     config.mass, config.burn_in)
    for it in range(total):
        v = rng.standard_normal(w.shape) * np.sqrt(mass)
        h0 = u + kinetic(v, mass)
        try:
            with np.errstate(over="raise", invalid="raise"):
                w1, v1, u1, g1 = leapfrog(potential, w, v, grad, config.step_size,
                                          config.leapfrog_steps, mass)
                h1 = u1 + kinetic(v1, mass)
            delta = h1 - h0
        except (NumericError, FloatingPointError):
            delta = math.inf
        chain.proposed += 1
        log_u = math.log(1.0 - rng.random())
        if not math.isfinite(delta) or abs(delta) > config.max_energy_error:
            chain.divergent += 1
        elif log_u < -delta:
            w, u, grad = w1, u1, g1
            chain.accepted += 1
        if math.isfinite(delta):
            chain.energy_errors.append(delta)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            kept.append(w.copy())
    chain.samples = np.array(kept)
    log.info("hmc: acceptance %.3f, %d divergent", chain.acceptance_rate, chain.divergent)
    return chain


def bnn_potential(objective, data, prior, chunk=1000):
    """Full-data potential U(w) = -log prior(w) + sum_i nll_i(w).

    Returns a function w -> (U, grad U).  The IBP or PGD likelihood is used if
    the objective carries one.
    """
    n = len(data)

    def potential(w):
        mu_p = prior.mean_vector(len(w))
        s_p = prior.precision_vector(len(w))
        d = w - mu_p
        u = 0.5 * float(np.sum(s_p * d * d))
        g = s_p * d
        for start in range(0, n, chunk):
            part = data.take(np.arange(start, min(n, start + chunk))) if hasattr(data, "take") \
                else data[start:start + chunk]
            mean_loss, mean_grad = objective.mean_loss_grad(w, part)
            m = objective.batch_size(part)
            u += mean_loss * m
            g = g + mean_grad * m
        return u, g

    return potential
