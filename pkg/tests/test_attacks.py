import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_bnn.attacks import (
    AttackConfig, empirical_robust_accuracy, ensemble_loss, fgsm_attack, pgd_attack,
)
from robust_bnn.certification import certified_robust_accuracy
from robust_bnn.data import Dataset
from robust_bnn.errors import UsageError
from robust_bnn.network import LayerSpec, NetworkArchitecture, pack, predict_class

from conftest import random_net


def test_config_defaults_and_validation():
    cfg = AttackConfig(0.1)
    assert cfg.steps == 10 and cfg.restarts == 1 and cfg.step == pytest.approx(0.025)
    assert AttackConfig(0.1, step_size=0.01).step == 0.01
    for bad in (dict(eps=-1), dict(eps=0.1, steps=-1), dict(eps=0.1, step_size=0.0),
                dict(eps=0.1, restarts=0)):
        with pytest.raises(UsageError):
            AttackConfig(**bad)


def test_zero_radius_or_steps_returns_x(rng):
    arch, w = random_net(rng)
    x = rng.uniform(size=(4, arch.input_dim))
    y = rng.integers(0, arch.class_count, 4)
    assert np.array_equal(pgd_attack(arch, w, x, y, AttackConfig(0.0)), x)
    assert np.array_equal(pgd_attack(arch, w, x, y, AttackConfig(0.3, steps=0)), x)


def test_fgsm_reaches_the_worst_corner_of_a_linear_model(rng):
    for _ in range(20):
        arch = NetworkArchitecture((LayerSpec("dense", 5, 2),), 5, 2)
        W, b = rng.normal(size=(2, 5)), rng.normal(size=2)
        w = pack(arch, [(W, b)])
        x, y, eps = rng.uniform(size=5), int(rng.integers(2)), 0.2
        margin_grad = W[y] - W[1 - y]
        want = x - eps * np.sign(margin_grad)
        np.testing.assert_allclose(fgsm_attack(arch, w, x, y, eps, clip=None), want, atol=1e-12)


@given(st.integers(0, 100_000), st.floats(0.0, 0.5), st.booleans())
def test_attack_stays_feasible(seed, eps, clip):
    rng = np.random.default_rng(seed)
    arch, _ = random_net(rng)
    S = rng.normal(size=(3, arch.n_w))
    x = rng.uniform(size=(5, arch.input_dim))
    y = rng.integers(0, arch.class_count, 5)
    cfg = AttackConfig(eps, steps=5, clip=(0.0, 1.0) if clip else None, restarts=2)
    adv = pgd_attack(arch, S, x, y, cfg, rng)
    assert np.all(np.abs(adv - x) <= eps + 1e-12)
    if clip:
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_pgd_does_not_decrease_the_ensemble_loss(rng):
    arch, _ = random_net(rng, n_in=6, depth=2, width=8, classes=3)
    S = rng.normal(size=(5, arch.n_w))
    x = rng.uniform(size=(20, 6))
    y = rng.integers(0, 3, 20)
    adv = pgd_attack(arch, S, x, y, AttackConfig(0.1, steps=20))
    assert np.all(ensemble_loss(arch, S, adv, y).data >= ensemble_loss(arch, S, x, y).data - 1e-12)


def test_ensemble_loss_is_cross_entropy_of_the_mean(rng):
    from robust_bnn.network import predict_ensemble
    arch, _ = random_net(rng)
    S = rng.normal(size=(4, arch.n_w))
    x = rng.uniform(size=(3, arch.input_dim))
    y = rng.integers(0, arch.class_count, 3)
    p = predict_ensemble(arch, S, x)[np.arange(3), y]
    np.testing.assert_allclose(ensemble_loss(arch, S, x, y).data, -np.log(p), rtol=1e-10)


def test_robust_accuracy_examples(rng):
    arch, _ = random_net(rng, n_in=4, depth=2, width=6, classes=3)
    S = rng.normal(size=(3, arch.n_w))
    x = rng.uniform(size=(40, 4))
    y = predict_class(arch, S, x)
    y[::3] = (y[::3] + 1) % 3
    data = Dataset(x, y)
    clean = np.mean(predict_class(arch, S, x) == y)
    assert empirical_robust_accuracy(arch, S, data, AttackConfig(0.1, steps=0)) == clean
    prev = clean
    for eps in (0.05, 0.1, 0.2, 0.4):
        r = empirical_robust_accuracy(arch, S, data, AttackConfig(eps))
        assert certified_robust_accuracy(arch, S, data, eps) <= r <= prev
        prev = r
    const = NetworkArchitecture((LayerSpec("dense", 4, 3),), 4, 3)
    wc = pack(const, [(np.zeros((3, 4)), np.array([0.0, 1.0, 0.0]))])
    assert empirical_robust_accuracy(const, wc, Dataset(x, np.ones(40, int)),
                                     AttackConfig(0.5)) == 1.0
