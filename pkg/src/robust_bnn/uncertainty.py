"""Predictive entropy and confidence ratios for in/out-of-distribution data."""

from __future__ import annotations

import csv
import math

import numpy as np

from .errors import UsageError
from .network import _batch_arrays, sample_probs

CSV_COLUMNS = ("point_index", "mean_sample_entropy", "entropy_of_mean", "max_prob")


def _entropy(p):
    # 0 log 0 := 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def _inputs(data):
    if hasattr(data, "inputs"):
        return data.inputs
    return np.asarray(data, dtype=np.float64)


def uncertainty_table(arch, weight_samples, data, chunk=500):
    """Per-point mean per-sample entropy, entropy of the mean predictive, and max probability."""
    x = _inputs(data)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if len(X) == 0:
        raise UsageError("empty input set")
    parts = []
    for i in range(0, len(X), chunk):
        P = sample_probs(arch, weight_samples, X[i:i + chunk])   # (N, B, C)
        mean = P.mean(axis=0)
        parts.append(np.stack([_entropy(P).mean(axis=0), _entropy(mean), mean.max(axis=-1)], 1))
    table = np.concatenate(parts)
    return table[0] if single else table


def predictive_entropy(arch, weight_samples, x):
    """Average over weight samples of the softmax entropy (per point for a batch)."""
    t = uncertainty_table(arch, weight_samples, x)
    return float(t[0]) if t.ndim == 1 else t[:, 0]


def entropy_of_mean(arch, weight_samples, x):
    """Entropy of the averaged predictive distribution."""
    t = uncertainty_table(arch, weight_samples, x)
    return float(t[1]) if t.ndim == 1 else t[:, 1]


def likelihood_ratio(arch, weight_samples, in_set, out_set):
    """mean max-probability on out_set divided by mean max-probability on in_set."""
    if len(_inputs(in_set)) == 0 or len(_inputs(out_set)) == 0:
        raise UsageError("both sets must be non-empty")
    conf_in = np.atleast_2d(uncertainty_table(arch, weight_samples, in_set))[:, 2].mean()
    conf_out = np.atleast_2d(uncertainty_table(arch, weight_samples, out_set))[:, 2].mean()
    return float(conf_out / conf_in)


def entropy_histogram(arch, weight_samples, data, bins):
    """Counts of per-point mean-sample entropy over [0, ln C] in ``bins`` equal bins.

    Returns (edges, counts).
    """
    if bins < 2:
        raise UsageError("need at least 2 bins")
    ent = np.atleast_2d(uncertainty_table(arch, weight_samples, data))[:, 0]
    edges = np.linspace(0.0, math.log(arch.class_count), bins + 1)
    counts, _ = np.histogram(np.clip(ent, 0.0, edges[-1]), bins=edges)
    return edges, counts


def write_uncertainty_csv(path, table):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(CSV_COLUMNS)
        for i, row in enumerate(np.atleast_2d(table)):
            out.writerow([i] + [f"{v:.17g}" for v in row])


def write_histogram_csv(path, edges, counts):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["bin_lower", "bin_upper", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            out.writerow([f"{lo:.17g}", f"{hi:.17g}", int(c)])
