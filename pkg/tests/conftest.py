import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robust_bnn.network import NetworkArchitecture, init_weights

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_net(rng, n_in=None, depth=None, width=None, classes=None, scale=1.0):
    """Small random MLP and a weight vector (biases non-zero)."""
    n_in = n_in or int(rng.integers(1, 9))
    depth = depth or int(rng.integers(1, 4))
    classes = classes or int(rng.integers(2, 5))
    hidden = [width or int(rng.integers(1, 17)) for _ in range(depth - 1)]
    arch = NetworkArchitecture.mlp(n_in, hidden, classes)
    w = init_weights(arch, rng, scale) + rng.normal(scale=0.1, size=arch.n_w)
    return arch, w


def central_fd(f, w, h=1e-5):
    g = np.empty_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
