"""SWAG (diagonal): moment-match a Gaussian to SGD iterates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteLossError, UsageError
from .posterior import SWAGMoments
from .vi import iterate_batches

log = logging.getLogger("robust_bnn.inference")


class RunningMoments:
    """Streaming first and second moments of a sequence of vectors."""

    def __init__(self, n_w):
        self.mean = np.zeros(n_w)
        self.sq_mean = np.zeros(n_w)
        self.count = 0

    def update(self, w):
        self.count += 1
        k = self.count
        self.mean = self.mean + (w - self.mean) / k
        self.sq_mean = self.sq_mean + (w * w - self.sq_mean) / k

    def finish(self):
        if self.count < 2:
            raise UsageError(f"SWAG needs at least 2 collected iterates, got {self.count}")
        return SWAGMoments(self.mean.copy(), self.sq_mean.copy(), self.count)


def swag_from_iterates(iterates):
    it = np.atleast_2d(np.asarray(iterates, dtype=np.float64))
    acc = RunningMoments(it.shape[1])
    for w in it:
        acc.update(w)
    return acc.finish()


@dataclass(frozen=True)
class SWAGConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.05
    warmup_epochs: int = 5
    collect_every: int = 50     # SGD steps between collections
    weight_decay: bool = True   # add the prior's gradient, scaled by 1/n_data
    seed: int = 0


def swag_collect(objective, data, init_w, config, prior=None, ramp=None, epoch_callback=None,
                 history=None):
    """Plain SGD on the mean loss; after warm-up, collect every ``collect_every`` steps.

    If ``history`` is a list, one row per epoch (epoch, loss, eta, lr) is
    appended; ``epoch_callback(w)`` may return extra columns for it.
    """
    n = len(data)
    w = np.array(init_w, dtype=np.float64)
    acc = RunningMoments(w.size)
    rng = np.random.default_rng([config.seed, 2])
    lr = config.lr
    step = 0
    nb = -(-n // config.batch_size)
    for epoch in range(config.epochs):
        losses, eta = [], None
        for b, batch in enumerate(iterate_batches(data, config.batch_size, config.seed, epoch)):
            obj = objective
            if ramp is not None:
                eta = ramp.eta(epoch + (b + 1) / nb)
                obj = objective.with_eta(eta)
            try:
                loss, g = obj.mean_loss_grad(w, batch, rng)
                if not np.isfinite(loss):
                    raise NonFiniteLossError(f"loss {loss}")
            except NonFiniteLossError as exc:
                lr *= 0.5
                log.warning("swag epoch %d step %d: %s; learning rate halved", epoch, b, exc)
                continue
            if prior is not None and config.weight_decay:
                g = g + prior.precision_vector(w.size) * (w - prior.mean_vector(w.size)) / n
            w = w - lr * g
            losses.append(loss)
            step += 1
            if epoch >= config.warmup_epochs and step % config.collect_every == 0:
                acc.update(w)
        if history is not None:
            row = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
                   "eta": eta if eta is not None else float("nan"), "lr": lr}
            if epoch_callback is not None:
                row.update(epoch_callback(w))
            history.append(row)
    return acc.finish()
