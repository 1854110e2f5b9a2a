"""Experiment orchestration shared by the command-line front end and tests.

Everything here is a deterministic function of a RunConfig (including its
seed) and the input files.
"""

from __future__ import annotations

import logging

import numpy as np

from .attacks import AttackConfig, empirical_robust_accuracy
from .certification import certified_robust_accuracy
from .data import load_idx_dataset, make_toy_dataset, subset
from .errors import UsageError
from .inference import (
    HMCConfig, NetworkObjective, PriorSpec, SamplePosterior, SWAGConfig, VIConfig, bbb_step,
    bnn_potential, hmc_run, natgrad_vi_step, sample_posterior, swag_collect, train_vi,
)
from .likelihood import (
    EpsilonDistribution, IBPLikelihood, PGDLikelihood, RampSchedule, StandardLikelihood,
)
from .network import NetworkArchitecture, init_weights, predict_class

log = logging.getLogger("robust_bnn.runner")

# independent random streams derived from the run seed
_INIT, _HMC, _SAMPLES, _ATTACK, _TOY_TEST = 3, 4, 5, 6, 7


def input_clip(cfg):
    if cfg.data.kind == "toy":
        return None
    return (cfg.data.clip_lower, cfg.data.clip_upper)


def load_train_test(cfg):
    d = cfg.data
    if d.kind == "toy":
        return (make_toy_dataset(d.toy_kind, d.toy_size, cfg.seed),
                make_toy_dataset(d.toy_kind, d.toy_size, cfg.seed + _TOY_TEST))
    train = load_idx_dataset(d.train_images, d.train_labels)
    if 0 < d.train_size < len(train):
        train = subset(train, d.train_size, cfg.seed)
    return train, load_test(cfg)


def load_test(cfg, images=None, labels=None):
    """Held-out set: the first ``test_size`` points of the test files."""
    d = cfg.data
    if images is None and d.kind == "toy":
        return make_toy_dataset(d.toy_kind, d.toy_size, cfg.seed + _TOY_TEST)
    test = load_idx_dataset(images or d.test_images, labels or d.test_labels)
    if 0 < d.test_size < len(test):
        test = test.take(np.arange(d.test_size))
    return test


def load_ood(cfg, images=None, labels=None):
    ood = load_idx_dataset(images or cfg.data.ood_images, labels or cfg.data.ood_labels)
    if 0 < cfg.data.test_size < len(ood):
        ood = ood.take(np.arange(cfg.data.test_size))
    return ood


def build_architecture(cfg, dataset):
    classes = 2 if cfg.data.kind == "toy" else 10
    return NetworkArchitecture.mlp(dataset.input_dim, list(cfg.model.hidden), classes)


def epsilon_distribution(cfg):
    p = cfg.p_eps
    if p.kind == "dirac":
        return EpsilonDistribution.dirac()
    if p.kind == "discrete":
        return EpsilonDistribution.discrete(p.lam, p.eta)
    if p.kind == "rayleigh":
        return EpsilonDistribution.rayleigh(p.eta, p.mc_samples)
    return EpsilonDistribution.exponential(p.eta, p.mc_samples)


def attack_config(cfg, eps=None, steps=None):
    a = cfg.attack
    return AttackConfig(eps=a.eps if eps is None else float(eps),
                        steps=a.steps if steps is None else int(steps),
                        step_size=a.step_size or None, clip=input_clip(cfg), restarts=a.restarts)


def build_likelihood(cfg):
    kind = cfg.train.likelihood
    if kind == "standard":
        return StandardLikelihood()
    if kind == "ibp":
        return IBPLikelihood(epsilon_distribution(cfg), clip=input_clip(cfg))
    return PGDLikelihood(epsilon_distribution(cfg), attack_config(cfg))


def build_ramp(cfg):
    if cfg.train.likelihood == "standard" or cfg.p_eps.kind == "dirac":
        return None
    return RampSchedule(cfg.p_eps.eta, cfg.ramp.warmup_epochs, cfg.ramp.overshoot)


def _accuracy(arch, w, test):
    if test is None:
        return float("nan")
    return float(np.mean(predict_class(arch, w, test.inputs) == test.labels))


def _sgd(objective, data, w, epochs, batch_size, lr, seed):
    """Plain minibatch SGD on the mean loss (HMC warm start)."""
    from .inference.vi import iterate_batches

    rng = np.random.default_rng([seed, _HMC, 1])
    for epoch in range(epochs):
        for batch in iterate_batches(data, batch_size, seed, epoch):
            _, g = objective.mean_loss_grad(w, batch, rng)
            w = w - lr * g
    return w


def train(cfg, train_set, test_set=None):
    """Fit the configured posterior.  Returns (arch, posterior, log rows, step losses)."""
    t = cfg.train
    arch = build_architecture(cfg, train_set)
    objective = NetworkObjective(arch, build_likelihood(cfg))
    prior = PriorSpec.from_scaling(arch, cfg.prior.scaling)
    ramp = build_ramp(cfg)
    init = init_weights(arch, np.random.default_rng([cfg.seed, _INIT]), cfg.model.init_scale)
    step_losses = []

    if t.method in ("natgrad", "bbb"):
        if t.method == "natgrad":
            def step(post, batch, prior_, obj, lr, rng):
                return natgrad_vi_step(post, batch, prior_, obj, lr, rng, reduction=t.reduction)
        else:
            step = bbb_step
        vi = VIConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, lr_decay=t.lr_decay,
                      seed=cfg.seed)
        # BBB starts from a narrow posterior around the init; natgrad from the prior precision
        init_s = None
        if t.method == "bbb":
            init_s = np.full(arch.n_w, 1.0 / (len(train_set) * 1e-6))
        post, hist = train_vi(step, objective, train_set, prior, vi, init, init_s=init_s, ramp=ramp,
                              epoch_callback=lambda p: {"accuracy": _accuracy(arch, p.mu,
                                                                              test_set)})
        rows = hist["epochs"]
        step_losses = hist["step_losses"]
    elif t.method == "swag":
        rows = []
        sw = SWAGConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                        warmup_epochs=cfg.swag.warmup_epochs, collect_every=cfg.swag.collect_every,
                        seed=cfg.seed)
        post = swag_collect(objective, train_set, init, sw, prior, ramp,
                            epoch_callback=lambda w: {"accuracy": _accuracy(arch, w, test_set)},
                            history=rows)
    elif t.method == "hmc":
        h = cfg.hmc
        if t.likelihood == "standard":
            start = init
        else:
            # robust HMC starts from an SGD iterate at the full target eta
            start = _sgd(objective.with_eta(cfg.p_eps.eta), train_set, init,
                         h.warm_start_epochs, t.batch_size, t.lr, cfg.seed)
        target = objective.with_eta(cfg.p_eps.eta) if ramp is not None else objective
        hc = HMCConfig(step_size=h.step_size, leapfrog_steps=h.leapfrog_steps,
                       burn_in=h.burn_in, num_samples=h.num_samples, thin=h.thin, seed=cfg.seed)
        chain = hmc_run(bnn_potential(target, train_set, prior), start, hc,
                        np.random.default_rng([cfg.seed, _HMC]))
        post = chain.to_posterior()
        rows = []
        for i in range(len(chain.samples)):
            part = chain.samples[:i + 1]
            loss = float(np.mean(target.terms(chain.samples[i], train_set).data))
            rows.append({"epoch": i + 1, "loss": loss, "eta": cfg.p_eps.eta if ramp else
                         float("nan"), "lr": h.step_size,
                         "accuracy": _accuracy(arch, part, test_set)})
    else:
        raise UsageError(f"unknown method {t.method!r}")
    return arch, post, rows, step_losses


def draw_samples(cfg, posterior, n=None):
    """The fixed weight-sample set used for every evaluation of a run."""
    n = cfg.certify.samples if n is None else int(n)
    if isinstance(posterior, SamplePosterior):
        return sample_posterior(posterior, n)
    rng = np.random.default_rng([cfg.seed, _SAMPLES, cfg.certify.sample_seed])
    return sample_posterior(posterior, n, rng)


def evaluate(cfg, arch, samples, test, eps):
    """Clean accuracy, PGD robust accuracy and IBP certified accuracy at eps."""
    if not eps >= 0:
        raise UsageError("epsilon must be non-negative")
    acc = _accuracy(arch, samples, test)
    pgd = empirical_robust_accuracy(arch, samples, test,
                                    attack_config(cfg, eps, cfg.attack.eval_steps),
                                    np.random.default_rng([cfg.seed, _ATTACK]))
    ibp = certified_robust_accuracy(arch, samples, test, eps, clip=input_clip(cfg))
    return {"accuracy": acc, "pgd_robust_accuracy": float(pgd),
            "ibp_certified_accuracy": float(ibp), "eps": float(eps), "N": int(len(samples)),
            "seed": int(cfg.seed)}
