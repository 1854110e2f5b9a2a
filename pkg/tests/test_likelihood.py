import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_bnn import autodiff as ad
from robust_bnn.attacks import AttackConfig, pgd_attack
from robust_bnn.errors import UsageError
from robust_bnn.interval import ibp_forward
from robust_bnn.likelihood import (
    EpsilonDistribution, IBPLikelihood, RampSchedule, UnderflowCounter,
    robust_gaussian_nll_regression, robust_nll_ibp, robust_nll_pgd, sample_epsilon,
)
from robust_bnn.network import LayerSpec, NetworkArchitecture, forward, pack, standard_nll

from conftest import central_fd, random_net


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def batch(rng, arch, n=5):
    return rng.uniform(size=(n, arch.input_dim)), rng.integers(0, arch.class_count, size=n)


def test_dirac_is_standard_nll_bit_for_bit(rng):
    arch, w = random_net(rng)
    b = batch(rng, arch)
    assert robust_nll_ibp(arch, w, b, EpsilonDistribution.dirac()).item() == \
        standard_nll(arch, w, b).item()
    assert robust_nll_ibp(arch, w, b, EpsilonDistribution.discrete(1.0, 0.3)).item() == \
        standard_nll(arch, w, b).item()


def test_discrete_matches_two_independent_evaluations(rng):
    for _ in range(10):
        arch, w = random_net(rng)
        x, y = rng.uniform(size=arch.input_dim), int(rng.integers(arch.class_count))
        clean = softmax(forward(arch, w, x).data)[y]
        box = ibp_forward(arch, w, x, 0.1)
        worst = np.where(np.arange(arch.class_count) == y, box.lower.data, box.upper.data)
        want = -math.log(0.25 * clean + 0.75 * softmax(worst)[y])
        got = robust_nll_ibp(arch, w, ([x], [y]), EpsilonDistribution.discrete(0.25, 0.1)).item()
        assert got == pytest.approx(want, rel=1e-12)


def test_non_decreasing_in_eta(rng):
    for _ in range(20):
        arch, w = random_net(rng)
        b = batch(rng, arch)
        vals = [robust_nll_ibp(arch, w, b, EpsilonDistribution.discrete(0.25, e)).item()
                for e in (0.01, 0.05, 0.1, 0.3)]
        assert all(a <= c + 1e-12 for a, c in zip(vals, vals[1:]))


def test_gradient_matches_finite_differences(rng):
    p = EpsilonDistribution.discrete(0.25, 0.1)
    arch, w = random_net(rng, n_in=4, depth=2, width=6, classes=3)
    b = batch(rng, arch)
    t = ad.Tensor(w, requires_grad=True)
    with ad.GradTape() as tape:
        out = robust_nll_ibp(arch, t, b, p)
    g = ad.backward(tape, out)[t]
    fd = central_fd(lambda v: robust_nll_ibp(arch, v, b, p).item(), w)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def test_continuous_laws_use_shared_draws(rng):
    arch, w = random_net(rng)
    b = batch(rng, arch)
    p = EpsilonDistribution.rayleigh(0.1, mc_samples=4)
    a = robust_nll_ibp(arch, w, b, p, np.random.default_rng(3)).item()
    radii = sample_epsilon(p, np.random.default_rng(3), size=4)
    x, y = b
    probs = []
    for e in radii:
        L, U = (t.data for t in (ibp_forward(arch, w, x, e).lower, ibp_forward(arch, w, x, e).upper))
        worst = np.where(np.arange(arch.class_count) == y[:, None], L, U)
        probs.append(softmax(worst)[np.arange(len(y)), y])
    assert a == pytest.approx(-np.sum(np.log(np.mean(probs, axis=0))), rel=1e-10)
    with pytest.raises(UsageError):
        robust_nll_ibp(arch, w, b, p)


def test_log_space_survives_tiny_probabilities():
    # the worst case probability underflows to 0 in float64; the mixture stays finite
    arch = NetworkArchitecture((LayerSpec("dense", 1, 2),), 1, 2)
    w = pack(arch, [(np.array([[1000.0], [-1000.0]]), np.array([0.0, 0.0]))])
    counter = UnderflowCounter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        v = robust_nll_ibp(arch, w, ([[0.5]], [0]), EpsilonDistribution.discrete(0.0, 1.0),
                           counter=counter).item()
    assert v == pytest.approx(1000.0, rel=1e-9)   # worst-case logits [-500, 500]
    assert counter.count == 1 and caught
    mixed = robust_nll_ibp(arch, w, ([[0.5]], [0]), EpsilonDistribution.discrete(0.25, 1.0)).item()
    assert mixed == pytest.approx(-math.log(0.25), rel=1e-9)


def test_sampler_moments():
    rng = np.random.default_rng(0)
    assert np.all(sample_epsilon(EpsilonDistribution.dirac(), rng, 100) == 0)
    d = sample_epsilon(EpsilonDistribution.discrete(0.25, 0.1), rng, 100_000)
    assert abs(np.mean(d == 0) - 0.25) < 0.01
    assert set(np.unique(d)) == {0.0, 0.1}
    r = sample_epsilon(EpsilonDistribution.rayleigh(0.1), rng, 100_000)
    assert abs(r.mean() / (0.1 * math.sqrt(math.pi / 2)) - 1) < 0.02
    e = sample_epsilon(EpsilonDistribution.exponential(0.1), rng, 100_000)
    assert abs(e.mean() / 0.1 - 1) < 0.02 and e.min() >= 0


def test_distribution_validation():
    for bad in (lambda: EpsilonDistribution.discrete(1.5, 0.1),
                lambda: EpsilonDistribution.discrete(0.5, 0.0),
                lambda: EpsilonDistribution("uniform", 0.5, 0.1)):
        with pytest.raises(UsageError):
            bad()


def test_ramp_schedule():
    r = RampSchedule(0.1, 5)
    assert r.eta(0) == 0.0
    assert r.eta(2.5) == pytest.approx(0.055)
    assert r.eta(5) == pytest.approx(0.11) and r.eta(50) == pytest.approx(0.11)
    ts = np.linspace(0, 8, 50)
    assert np.all(np.diff([r.eta(t) for t in ts]) >= 0)
    assert RampSchedule(0.1, 0).eta(0) == pytest.approx(0.11)


def test_pgd_likelihood(rng):
    arch, w = random_net(rng, n_in=3, depth=2, width=6, classes=3)
    b = batch(rng, arch)
    p = EpsilonDistribution.discrete(0.25, 0.1)
    std = standard_nll(arch, w, b).item()
    assert robust_nll_pgd(arch, w, b, EpsilonDistribution.dirac(), AttackConfig(0.1)).item() == std
    assert robust_nll_pgd(arch, w, b, p, AttackConfig(0.1, steps=0)).item() == pytest.approx(std)
    pgd = robust_nll_pgd(arch, w, b, p, AttackConfig(0.1, clip=None)).item()
    ibp = robust_nll_ibp(arch, w, b, p).item()
    assert std <= pgd + 1e-12 and pgd <= ibp + 1e-12


def test_pgd_likelihood_gradient_treats_attack_as_constant(rng):
    arch, w = random_net(rng, n_in=3, depth=2, width=4, classes=3)
    x, y = batch(rng, arch, 1)
    cfg = AttackConfig(0.1, clip=None)
    p = EpsilonDistribution.discrete(0.0, 0.1)
    t = ad.Tensor(w, requires_grad=True)
    with ad.GradTape() as tape:
        out = robust_nll_pgd(arch, t, (x, y), p, cfg)
    g = ad.backward(tape, out)[t]
    x_adv = pgd_attack(arch, w[None], x, y, cfg)
    fd = central_fd(lambda v: standard_nll(arch, v, (x_adv, y)).item(), w)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def linear_regressor(a, b):
    arch = NetworkArchitecture((LayerSpec("dense", len(a), 1),), len(a), 1)
    return arch, pack(arch, [(np.array([a], float), np.array([b], float))])


def test_regression_examples():
    arch, w = linear_regressor([2.0, -1.0], 0.5)
    x, y = np.array([0.3, 0.4]), 1.7
    f = 2 * 0.3 - 0.4 + 0.5
    const = 0.5 * math.log(2 * math.pi * 0.5)
    got = robust_gaussian_nll_regression(arch, w, x, [y], EpsilonDistribution.dirac(), 0.5).item()
    assert got == pytest.approx((f - y) ** 2 / (2 * 0.5) + const)
    # closed form: the affine range over the ball is f +- eps * |a|_1
    eps, lam = 0.1, 0.25
    up, lo = f + eps * 3.0, f - eps * 3.0
    e_up, e_lo = lam * f + (1 - lam) * up, lam * f + (1 - lam) * lo
    want = max((e_up - y) ** 2, (e_lo - y) ** 2) / (2 * 0.5) + const
    got = robust_gaussian_nll_regression(arch, w, x, [y], EpsilonDistribution.discrete(lam, eps),
                                         0.5).item()
    assert got == pytest.approx(want, rel=1e-12)
    # y between the bounds: the farther bound decides
    mid = f + 0.05
    got = robust_gaussian_nll_regression(arch, w, x, [mid], EpsilonDistribution.discrete(0.0, eps),
                                         1.0).item()
    assert got == pytest.approx((lo - mid) ** 2 / 2 + 0.5 * math.log(2 * math.pi))
    with pytest.raises(UsageError):
        robust_gaussian_nll_regression(arch, w, x, [y], EpsilonDistribution.dirac(), 0.0)


def test_ibp_likelihood_with_eta_keeps_counter(rng):
    lik = IBPLikelihood(EpsilonDistribution.discrete(0.25, 0.1))
    other = lik.with_eta(0.05)
    assert other.p_eps.eta == 0.05 and other.counter is lik.counter and lik.p_eps.eta == 0.1


@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_mixture_is_between_its_terms(seed, lam):
    rng = np.random.default_rng(seed)
    arch, w = random_net(rng)
    b = batch(rng, arch, 3)
    std = standard_nll(arch, w, b).item()
    worst = robust_nll_ibp(arch, w, b, EpsilonDistribution.discrete(0.0, 0.1)).item()
    mixed = robust_nll_ibp(arch, w, b, EpsilonDistribution.discrete(lam, 0.1)).item()
    assert std - 1e-9 <= mixed <= worst + 1e-9
