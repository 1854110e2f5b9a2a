"""Per-datum loss adapters used by the inference routines.

An objective maps a flat weight vector and a batch to a vector of per-example
negative log-likelihood terms, and supplies gradients of those terms.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..errors import NumericError, NonFiniteLossError
from ..network import _batch_arrays, flatten_grads, weight_leaves


def _guard(fn):
    try:
        return fn()
    except NumericError as exc:
        raise NonFiniteLossError(str(exc)) from exc


class Objective:
    """Base class.  Subclasses implement ``terms(w, batch, rng)`` for a flat
    weight vector or a flat weight Tensor."""

    n_w = None

    def terms(self, w, batch, rng=None):
        raise NotImplementedError

    def with_eta(self, eta):
        return self

    def mean_loss_grad(self, w, batch, rng=None):
        """(mean loss, gradient of the mean loss)."""
        def run():
            wt = ad.Tensor(w, requires_grad=True)
            with ad.GradTape() as tape:
                loss = ad.mean(self.terms(wt, batch, rng))
            g = ad.backward(tape, loss).get(wt)
            return loss.item(), np.zeros(len(w)) if g is None else g
        return _guard(run)

    def per_example_grads(self, w, batch, rng=None):
        """(loss vector, per-example gradient matrix of shape (B, n_w))."""
        def run():
            wt = ad.Tensor(w, requires_grad=True)
            with ad.GradTape() as tape:
                losses = self.terms(wt, batch, rng)
            g = ad.backward(tape, losses, per_example=True).get(wt)
            return losses.data, np.zeros((len(losses.data), len(w))) if g is None else g
        return _guard(run)

    def grad_moments(self, w, batch, rng=None):
        """(loss vector, mean per-example gradient, mean squared per-example gradient)."""
        losses, G = self.per_example_grads(w, batch, rng)
        return losses, G.mean(axis=0), np.square(G).mean(axis=0)

    def batch_size(self, batch):
        return len(_batch_arrays(batch)[1])


class NetworkObjective(Objective):
    """Categorical likelihood (standard, IBP or PGD) of a feed-forward network."""

    def __init__(self, arch, likelihood):
        self.arch = arch
        self.likelihood = likelihood
        self.n_w = arch.n_w

    def terms(self, w, batch, rng=None):
        return self.likelihood.terms(self.arch, w, batch, rng)

    def with_eta(self, eta):
        return NetworkObjective(self.arch, self.likelihood.with_eta(eta))

    def _leaf_grads(self, w, batch, rng, per_example):
        leaves = weight_leaves(self.arch, w)
        with ad.GradTape() as tape:
            losses = self.terms(leaves, batch, rng)
            out = losses if per_example else ad.mean(losses)
        grads = ad.backward(tape, out, per_example=per_example)
        lead = (len(losses.data),) if per_example else ()
        full = {leaf: grads.get(leaf, np.zeros(lead + leaf.shape)) for leaf in leaves}
        return losses.data, flatten_grads(leaves, full)

    def mean_loss_grad(self, w, batch, rng=None):
        losses, g = _guard(lambda: self._leaf_grads(w, batch, rng, False))
        return float(np.mean(losses)), g

    def per_example_grads(self, w, batch, rng=None):
        return _guard(lambda: self._leaf_grads(w, batch, rng, True))

    def grad_moments(self, w, batch, rng=None):
        # reduce leaf by leaf so the (B, n_w) matrix is never assembled
        def run():
            leaves = weight_leaves(self.arch, w)
            with ad.GradTape() as tape:
                losses = self.terms(leaves, batch, rng)
            grads = ad.backward(tape, losses, per_example=True, factored=True)
            n = len(losses.data)
            means, squares = [], []
            for leaf in leaves:
                g = grads.get(leaf)
                if g is None:
                    total, sq = np.zeros(leaf.shape), np.zeros(leaf.shape)
                elif isinstance(g, ad.OuterGrad):
                    total, sq = g.moments()
                else:
                    total, sq = g.sum(axis=0), np.einsum("b...,b...->...", g, g)
                means.append(np.reshape(total, -1) / n)
                squares.append(np.reshape(sq, -1) / n)
            return losses.data, np.concatenate(means), np.concatenate(squares)
        return _guard(run)


class GaussianMeanObjective(Objective):
    """Observations y_i ~ N(w[0], noise_var): the conjugate toy model."""

    n_w = 1

    def __init__(self, noise_var=1.0):
        self.noise_var = float(noise_var)

    def terms(self, w, batch, rng=None):
        y = ad.Tensor(np.asarray(batch, dtype=np.float64).reshape(-1), batched=True)
        w = ad.as_tensor(w)
        r = y - w[0]
        return ad.square(r) * (0.5 / self.noise_var) + 0.5 * math.log(2 * math.pi * self.noise_var)

    def batch_size(self, batch):
        return len(np.asarray(batch).reshape(-1))
