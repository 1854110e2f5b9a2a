"""Posterior representations, sampling, and the posterior file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, UsageError
from ..network import NetworkArchitecture, architecture_json, decode_samples, encode_samples

SWAG_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class PriorSpec:
    """Diagonal Gaussian prior N(mean, 1/precision)."""

    mean: object = 0.0
    precision: object = 1.0
    scaling: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.precision) <= 0):
            raise UsageError("prior precision must be positive")

    @classmethod
    def from_scaling(cls, arch, scaling=1.0):
        """Zero-mean prior whose stddev is ``scaling`` times the fan-in init stddev."""
        if not scaling > 0:
            raise UsageError("prior scaling must be positive")
        std = np.empty(arch.n_w)
        for ws, bs, (_, fan_in) in arch.dense_slices():
            std[ws] = std[bs] = scaling / np.sqrt(fan_in)
        return cls(0.0, 1.0 / std**2, float(scaling))

    def mean_vector(self, n_w):
        return np.broadcast_to(np.asarray(self.mean, dtype=np.float64), (n_w,)).copy()

    def precision_vector(self, n_w):
        return np.broadcast_to(np.asarray(self.precision, dtype=np.float64), (n_w,)).copy()


@dataclass(frozen=True)
class GaussianVariationalPosterior:
    """Diagonal Gaussian with mean ``mu`` and covariance 1 / (n_data * s)."""

    mu: np.ndarray
    s: np.ndarray
    n_data: int

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        s = np.array(self.s, dtype=np.float64)
        if mu.shape != s.shape or mu.ndim != 1:
            raise UsageError("mu and s must be vectors of equal length")
        if not (np.isfinite(mu).all() and np.isfinite(s).all()):
            raise UsageError("posterior parameters must be finite")
        if np.any(s <= 0):
            raise UsageError("precision s must be positive")
        if self.n_data < 1:
            raise UsageError("n_data must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "s", s)

    @property
    def std(self):
        return 1.0 / np.sqrt(self.n_data * self.s)

    def sample(self, rng, n=None):
        z = rng.standard_normal(self.mu.shape if n is None else (n,) + self.mu.shape)
        return self.mu + z * self.std


def kl_diag_gaussians(mu_q, var_q, mu_p, var_p):
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) summed over coordinates."""
    return float(0.5 * np.sum(np.log(var_p / var_q) + (var_q + (mu_q - mu_p) ** 2) / var_p - 1.0))


def kl_q_p(posterior, prior):
    n = posterior.mu.size
    return kl_diag_gaussians(posterior.mu, posterior.std**2, prior.mean_vector(n),
                             1.0 / prior.precision_vector(n))


@dataclass(frozen=True)
class SWAGMoments:
    mean: np.ndarray
    sq_mean: np.ndarray
    count: int

    @property
    def variance(self):
        return np.maximum(self.sq_mean - self.mean**2, SWAG_VARIANCE_FLOOR)

    def sample(self, rng, n):
        return self.mean + rng.standard_normal((n,) + self.mean.shape) * np.sqrt(self.variance)


@dataclass(frozen=True)
class SamplePosterior:
    """A stored set of weight samples (e.g. an HMC chain)."""

    samples: np.ndarray
    stats: dict | None = None

    def __post_init__(self):
        S = np.atleast_2d(np.array(self.samples, dtype=np.float64))
        if len(S) == 0:
            raise UsageError("sample posterior needs at least one sample")
        object.__setattr__(self, "samples", S)


def sample_posterior(posterior, n, rng=None):
    """N weight samples as an (N, n_w) array.

    Stored chains are thinned evenly, or cycled when N exceeds their length.
    """
    if n < 1:
        raise UsageError("need N >= 1 samples")
    if isinstance(posterior, SamplePosterior):
        m = len(posterior.samples)
        idx = np.arange(n) * m // n if n <= m else np.arange(n) % m
        return posterior.samples[idx].copy()
    if rng is None:
        raise UsageError("sampling a parametric posterior needs an rng")
    if isinstance(posterior, GaussianVariationalPosterior):
        return posterior.sample(rng, n)
    if isinstance(posterior, SWAGMoments):
        return posterior.sample(rng, n)
    raise UsageError(f"unsupported posterior type {type(posterior).__name__}")


# ------------------------------------------------------------ file format
#
# little-endian:
#   8 bytes  magic "BNNPOST1"
#   uint32   kind length, kind (ascii: gaussian | swag | samples)
#   uint64   aux (n_data for gaussian, collected count for swag, 0 otherwise)
#   uint32   architecture JSON length, architecture JSON (utf-8)
#   sample container (see network): gaussian rows (mu, s), swag rows (mean, sq_mean),
#   samples rows = the samples

POSTERIOR_MAGIC = b"BNNPOST1"


def encode_posterior(arch, posterior):
    if isinstance(posterior, GaussianVariationalPosterior):
        kind, aux, rows = "gaussian", posterior.n_data, np.stack([posterior.mu, posterior.s])
    elif isinstance(posterior, SWAGMoments):
        kind, aux, rows = "swag", posterior.count, np.stack([posterior.mean, posterior.sq_mean])
    elif isinstance(posterior, SamplePosterior):
        kind, aux, rows = "samples", 0, posterior.samples
    else:
        raise UsageError(f"cannot serialize {type(posterior).__name__}")
    if rows.shape[1] != arch.n_w:
        raise UsageError("posterior does not match the architecture")
    arch_raw = architecture_json(arch).encode()
    kind_raw = kind.encode()
    return b"".join([POSTERIOR_MAGIC, struct.pack("<I", len(kind_raw)), kind_raw,
                     struct.pack("<Q", aux), struct.pack("<I", len(arch_raw)), arch_raw,
                     encode_samples(rows)])


def decode_posterior(raw):
    if raw[:8] != POSTERIOR_MAGIC:
        raise FormatError("bad posterior magic", offset=0)
    try:
        pos = 8
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        kind = raw[pos:pos + klen].decode()
        pos += klen
        (aux,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        (alen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arch = NetworkArchitecture.from_dict(json.loads(raw[pos:pos + alen].decode()))
        pos += alen
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"corrupt posterior header: {exc}", offset=pos) from exc
    rows, end = decode_samples(raw, pos)
    if end != len(raw):
        raise FormatError("trailing bytes after posterior payload", offset=end)
    if rows.shape[1] != arch.n_w:
        raise FormatError("posterior width does not match its architecture", offset=pos)
    if kind == "gaussian":
        return arch, GaussianVariationalPosterior(rows[0], rows[1], int(aux))
    if kind == "swag":
        return arch, SWAGMoments(rows[0].copy(), rows[1].copy(), int(aux))
    if kind == "samples":
        return arch, SamplePosterior(rows)
    raise FormatError(f"unknown posterior kind {kind!r}", offset=8)


def save_posterior(path, arch, posterior):
    with open(path, "wb") as fh:
        fh.write(encode_posterior(arch, posterior))


def load_posterior(path):
    """Returns (architecture, posterior)."""
    with open(path, "rb") as fh:
        return decode_posterior(fh.read())
