import numpy as np
import pytest
from hypothesis import given, strategies as st

from robust_bnn import autodiff as ad
from robust_bnn.errors import DimensionError, FormatError, UsageError
from robust_bnn.network import (
    LayerSpec, NetworkArchitecture, decode_samples, encode_samples, forward, init_weights, pack,
    predict_class, predict_ensemble, read_samples, standard_nll, unpack, write_samples,
)

from conftest import random_net


def test_identity_layer():
    arch = NetworkArchitecture((LayerSpec("dense", 3, 3),), 3, 3)
    w = pack(arch, [(np.eye(3), np.zeros(3))])
    np.testing.assert_array_equal(forward(arch, w, [0.5, -1.0, 2.0]).data, [0.5, -1.0, 2.0])


def test_one_by_one_affine():
    arch = NetworkArchitecture((LayerSpec("dense", 1, 1),), 1, 1)
    assert forward(arch, np.array([2.0, 1.0]), [3.0]).data.tolist() == [7.0]


def test_forward_matches_straight_line_evaluation(rng):
    arch = NetworkArchitecture.mlp(4, [6], 3)
    w = init_weights(arch, rng) + 0.1
    (W1, b1), (W2, b2) = unpack(arch, w)
    x = rng.uniform(size=(5, 4))
    ref = np.array([W2 @ np.maximum(W1 @ xi + b1, 0) + b2 for xi in x])
    np.testing.assert_allclose(forward(arch, w, x).data, ref, atol=1e-12)


def test_parameter_count_and_architecture_checks():
    arch = NetworkArchitecture.mlp(784, [128], 10)
    assert arch.n_w == 784 * 128 + 128 + 128 * 10 + 10
    assert arch.depth == 2
    with pytest.raises(UsageError):
        NetworkArchitecture((LayerSpec("dense", 3, 4), LayerSpec("dense", 5, 2)), 3, 2)
    with pytest.raises(UsageError):
        NetworkArchitecture((LayerSpec("dense", 3, 4), LayerSpec("relu", 4, 4)), 3, 4)
    with pytest.raises(UsageError):
        forward(arch, np.zeros(arch.n_w), np.zeros(5))
    with pytest.raises(DimensionError):
        forward(arch, np.zeros(3), np.zeros(784))


@given(st.integers(0, 10_000))
def test_pack_unpack_round_trip(seed):
    rng = np.random.default_rng(seed)
    arch, w = random_net(rng)
    params = unpack(arch, w)
    assert np.array_equal(pack(arch, params), w)
    again = unpack(arch, pack(arch, params))
    for (W, b), (W2, b2) in zip(params, again):
        assert np.array_equal(W, W2) and np.array_equal(b, b2)


def test_standard_nll_examples(rng):
    arch = NetworkArchitecture((LayerSpec("dense", 2, 10),), 2, 10)
    assert standard_nll(arch, np.zeros(arch.n_w), ([[0.3, 0.7]], [4])).item() == pytest.approx(
        np.log(10), abs=1e-12)
    W = np.zeros((10, 2))
    b = np.zeros(10)
    b[3] = 60.0
    assert 0 <= standard_nll(arch, pack(arch, [(W, b)]), ([[0.1, 0.2]], [3])).item() < 1e-12


def test_standard_nll_matches_per_sample_loop(rng):
    arch, w = random_net(rng, n_in=3, classes=4)
    x, y = rng.uniform(size=(9, 3)), rng.integers(0, 4, size=9)
    ref = 0.0
    for xi, yi in zip(x, y):
        z = forward(arch, w, xi).data
        ref += -(z[yi] - np.log(np.sum(np.exp(z))))
    assert standard_nll(arch, w, (x, y)).item() == pytest.approx(ref, rel=1e-12)


def test_predict_ensemble_examples(rng):
    arch, w = random_net(rng, n_in=3, classes=3)
    x = rng.uniform(size=3)
    single = ad.softmax(forward(arch, w, x)).data
    np.testing.assert_allclose(predict_ensemble(arch, w[None], x), single, atol=1e-15)
    assert predict_class(arch, w[None], x) == int(np.argmax(forward(arch, w, x).data))

    one = NetworkArchitecture((LayerSpec("dense", 1, 2),), 1, 2)
    s1 = pack(one, [(np.zeros((2, 1)), np.array([50.0, -50.0]))])
    s2 = pack(one, [(np.zeros((2, 1)), np.array([-50.0, 50.0]))])
    np.testing.assert_allclose(predict_ensemble(one, [s1, s2], [0.0]), [0.5, 0.5])
    with pytest.raises(UsageError):
        predict_ensemble(one, np.zeros((0, one.n_w)), [0.0])


def test_predict_ensemble_matches_mean_oracle(rng):
    arch, _ = random_net(rng, n_in=4, classes=5)
    S = rng.normal(size=(25, arch.n_w))
    x = rng.uniform(size=(6, 4))
    ref = np.mean([ad.softmax(forward(arch, s, x)).data for s in S], axis=0)
    out = predict_ensemble(arch, S, x)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-10)


def test_argmax_ties_break_low():
    arch = NetworkArchitecture((LayerSpec("dense", 1, 3),), 1, 3)
    assert predict_class(arch, np.zeros((1, arch.n_w)), [1.0]) == 0


def test_sample_container_round_trip(tmp_path, rng):
    S = rng.normal(size=(4, 11))
    path = tmp_path / "s.bin"
    write_samples(path, S)
    raw = path.read_bytes()
    assert raw[:8] == b"BNNWSMP1"
    assert len(raw) == 24 + 8 * S.size
    assert np.array_equal(read_samples(path), S)
    assert encode_samples(S) == raw


def test_sample_container_errors(rng):
    raw = encode_samples(rng.normal(size=(2, 3)))
    with pytest.raises(FormatError) as e:
        decode_samples(b"XXXXXXXX" + raw[8:])
    assert e.value.offset == 0
    with pytest.raises(FormatError):
        decode_samples(raw[:-1])
    with pytest.raises(FormatError):
        decode_samples(raw[:10])
