"""Variational inference: Bayes by Backprop and natural-gradient VI.

Both methods work with a diagonal Gaussian whose covariance is
1 / (n_data * s) and minimise the per-datum negative ELBO

    mean_i nll_i(w) + KL(q || prior) / n_data,   w ~ q.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..data import Dataset, batches
from ..errors import NonFiniteLossError, NumericError, UsageError
from .posterior import GaussianVariationalPosterior, kl_q_p

log = logging.getLogger("robust_bnn.inference")


def natgrad_update(mu, s, grad, hess, alpha):
    """One natural-gradient step: s <- (1-a) s + a h, then mu <- mu - a g / s."""
    s_new = (1.0 - alpha) * s + alpha * hess
    return mu - alpha * grad / s_new, s_new


def natgrad_vi_step(posterior, batch, prior, objective, alpha, rng, reduction="sum"):
    """Sample w ~ q, take per-example gradients of the loss at w, and apply
    :func:`natgrad_update`.  The curvature is the squared per-example
    gradient (Gauss-Newton style) plus the prior precision.

    ``reduction="mean"``: per-datum loss, prior weighted by 1/n_data, so the
    fixed point is the Bayesian posterior.  ``reduction="sum"``: the batch
    sum of losses plus the unscaled prior term.

    Returns (new posterior, loss).  Raises NonFiniteLossError without
    changing anything if the loss is not finite.
    """
    if not 0.0 < alpha <= 1.0:
        raise UsageError("natural-gradient step size must lie in (0, 1]")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    n = posterior.n_data
    w = posterior.sample(rng)
    losses, g_mean, g_sq = objective.grad_moments(w, batch, rng)
    mu_p = prior.mean_vector(len(w))
    s_p = prior.precision_vector(len(w))
    if reduction == "mean":
        data_weight, prior_weight = 1.0, 1.0 / n
    else:
        data_weight, prior_weight = float(len(losses)), 1.0
    loss = float(np.mean(losses)) * data_weight + kl_q_p(posterior, prior) * prior_weight
    if not (math.isfinite(loss) and np.isfinite(g_mean).all() and np.isfinite(g_sq).all()):
        raise NonFiniteLossError(f"loss {loss} is not finite")
    grad = g_mean * data_weight + s_p * (posterior.mu - mu_p) * prior_weight
    hess = g_sq * data_weight + s_p * prior_weight
    mu, s = natgrad_update(posterior.mu, posterior.s, grad, hess, alpha)
    return GaussianVariationalPosterior(mu, s, n), loss


def _softplus_inv(x):
    return np.where(x > 20, x, np.log(np.expm1(np.minimum(x, 20))))


def bbb_step(posterior, batch, prior, objective, alpha, rng):
    """One reparameterised SGD step on the negative ELBO.

    The standard deviation is parameterised as softplus(rho); the KL term is
    the closed form for diagonal Gaussians.  Returns (new posterior, loss).
    """
    if not alpha > 0:
        raise UsageError("learning rate must be positive")
    n = posterior.n_data
    n_w = len(posterior.mu)
    mu_p = prior.mean_vector(n_w)
    var_p = 1.0 / prior.precision_vector(n_w)
    z = rng.standard_normal(n_w)
    mu_t = ad.Tensor(posterior.mu, requires_grad=True)
    rho_t = ad.Tensor(_softplus_inv(posterior.std), requires_grad=True)
    try:
        with ad.GradTape() as tape:
            sigma = ad.softplus(rho_t)
            w = mu_t + sigma * z
            nll = ad.mean(objective.terms(w, batch, rng))
            var_q = ad.square(sigma)
            kl = ad.sum((np.log(var_p) - ad.log(var_q)
                         + (var_q + ad.square(mu_t - mu_p)) / var_p - 1.0) * 0.5)
            loss = nll + kl / n
        grads = ad.backward(tape, loss)
    except NumericError as exc:
        raise NonFiniteLossError(str(exc)) from exc
    mu = posterior.mu - alpha * grads.get(mu_t, 0.0)
    rho = rho_t.data - alpha * grads.get(rho_t, 0.0)
    sigma = np.log1p(np.exp(-np.abs(rho))) + np.maximum(rho, 0.0)
    if not (np.isfinite(mu).all() and np.all(sigma > 0)):
        raise NonFiniteLossError("parameters became non-finite")
    return GaussianVariationalPosterior(mu, 1.0 / (n * sigma**2), n), loss.item()


# ------------------------------------------------------------ training loops


@dataclass(frozen=True)
class VIConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 1.0       # multiplicative, applied after every epoch
    seed: int = 0


def iterate_batches(data, m, seed, epoch):
    if isinstance(data, Dataset):
        yield from batches(data, m, seed, epoch)
        return
    arr = np.asarray(data)
    order = np.random.default_rng([seed, epoch]).permutation(len(arr))
    for start in range(0, len(arr), m):
        yield arr[order[start:start + m]]


def _num_batches(data, m):
    return -(-len(data) // m)


def train_vi(step_fn, objective, data, prior, config, init_mu, init_s=None, ramp=None,
             epoch_callback=None):
    """Run ``step_fn`` (natgrad_vi_step or bbb_step) over epochs of mini-batches.

    ``ramp`` (a RampSchedule) sets eta at fractional epoch progress.  A step
    with a non-finite loss is skipped and the learning rate halved.
    Returns (posterior, history) where history holds per-epoch rows and
    per-step losses.
    """
    n = len(data)
    if init_s is None:
        init_s = prior.precision_vector(len(init_mu))
    post = GaussianVariationalPosterior(init_mu, init_s, n)
    rng = np.random.default_rng([config.seed, 1])
    lr = config.lr
    nb = _num_batches(data, config.batch_size)
    history = {"epochs": [], "step_losses": [], "events": []}
    for epoch in range(config.epochs):
        losses, eta = [], None
        for b, batch in enumerate(iterate_batches(data, config.batch_size, config.seed, epoch)):
            obj = objective
            if ramp is not None:
                eta = ramp.eta(epoch + (b + 1) / nb)
                obj = objective.with_eta(eta)
            try:
                post, loss = step_fn(post, batch, prior, obj, lr, rng)
            except NonFiniteLossError as exc:
                lr *= 0.5
                msg = f"epoch {epoch} step {b}: {exc}; learning rate halved to {lr:g}"
                log.warning(msg)
                history["events"].append(msg)
                continue
            losses.append(loss)
            history["step_losses"].append(loss)
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
               "eta": eta if eta is not None else float("nan"), "lr": lr}
        if epoch_callback is not None:
            row.update(epoch_callback(post))
        history["epochs"].append(row)
        log.info("epoch %d loss %.4f", epoch + 1, row["loss"])
        lr *= config.lr_decay
    return post, history
