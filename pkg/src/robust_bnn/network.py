"""Feed-forward architectures, the flat weight layout, forward evaluation and
the categorical likelihood.

Weight layout: for each dense layer in order, the weight matrix W (shape
``out x in``, row-major) followed by the bias b (length ``out``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import DimensionError, FormatError, UsageError

__all__ = [
    "LayerSpec", "NetworkArchitecture", "Dataset", "unpack", "pack", "weight_leaves",
    "flatten_grads", "forward", "per_example_nll", "standard_nll", "predict_ensemble",
    "predict_class", "init_weights", "write_samples", "read_samples", "SAMPLE_MAGIC",
]

ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_width: int
    output_width: int

    def __post_init__(self):
        if self.kind not in ("dense",) + ACTIVATIONS:
            raise UsageError(f"unknown layer kind {self.kind!r}")
        if self.input_width < 1 or self.output_width < 1:
            raise UsageError("layer widths must be positive")
        if self.kind != "dense" and self.input_width != self.output_width:
            raise UsageError("activation layers preserve width")


@dataclass(frozen=True)
class NetworkArchitecture:
    layers: tuple
    input_dim: int
    class_count: int

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise UsageError("architecture needs at least one layer")
        width = self.input_dim
        for i, layer in enumerate(layers):
            if layer.input_width != width:
                raise UsageError(f"layer {i} expects width {layer.input_width}, gets {width}")
            width = layer.output_width
        last = layers[-1]
        if last.kind != "dense" or last.output_width != self.class_count:
            raise UsageError("final layer must be dense with class_count outputs")

    @classmethod
    def mlp(cls, input_dim, hidden, class_count, activation="relu"):
        layers, width = [], input_dim
        for h in hidden:
            layers += [LayerSpec("dense", width, h), LayerSpec(activation, h, h)]
            width = h
        layers.append(LayerSpec("dense", width, class_count))
        return cls(tuple(layers), input_dim, class_count)

    @property
    def depth(self):
        return sum(1 for layer in self.layers if layer.kind == "dense")

    @property
    def n_w(self):
        return sum(l.input_width * l.output_width + l.output_width
                   for l in self.layers if l.kind == "dense")

    def dense_slices(self):
        """(W slice, b slice, W shape) for every dense layer, in order."""
        out, pos = [], 0
        for layer in self.layers:
            if layer.kind != "dense":
                continue
            nw = layer.input_width * layer.output_width
            out.append((slice(pos, pos + nw), slice(pos + nw, pos + nw + layer.output_width),
                        (layer.output_width, layer.input_width)))
            pos += nw + layer.output_width
        return out

    def to_dict(self):
        return {"input_dim": self.input_dim, "class_count": self.class_count,
                "layers": [[l.kind, l.input_width, l.output_width] for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(LayerSpec(k, int(i), int(o)) for k, i, o in d["layers"]),
                   int(d["input_dim"]), int(d["class_count"]))


def _check_weights(arch, w):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (arch.n_w,):
        raise DimensionError(f"weight vector has shape {w.shape}, architecture needs ({arch.n_w},)")
    if not np.isfinite(w).all():
        raise UsageError("weight vector must be finite")
    return w


def unpack(arch, w):
    """Split a flat weight vector into [(W, b), ...] numpy arrays (copies)."""
    w = _check_weights(arch, w)
    return [(w[ws].reshape(shape).copy(), w[bs].copy()) for ws, bs, shape in arch.dense_slices()]


def pack(arch, params):
    """Inverse of :func:`unpack`."""
    parts = []
    for (W, b), (_, _, shape) in zip(params, arch.dense_slices(), strict=True):
        W, b = np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if W.shape != shape or b.shape != (shape[0],):
            raise DimensionError(f"layer parameters {W.shape}/{b.shape} do not match {shape}")
        parts += [W.reshape(-1), b]
    return np.concatenate(parts)


def weight_leaves(arch, w):
    """Differentiable leaf tensors [W1, b1, W2, b2, ...] for a flat weight vector."""
    leaves = []
    for W, b in unpack(arch, w):
        leaves += [ad.Tensor(W, requires_grad=True), ad.Tensor(b, requires_grad=True)]
    return leaves


def flatten_grads(leaves, grads):
    """Concatenate gradients of :func:`weight_leaves` back into the flat layout.

    Per-example gradients (leading batch axis) are flattened per example.
    """
    parts = []
    for leaf in leaves:
        g = grads[leaf] if isinstance(grads, dict) else grads[leaves.index(leaf)]
        lead = g.shape[: g.ndim - leaf.ndim]
        parts.append(g.reshape(lead + (-1,)))
    return np.concatenate(parts, axis=-1)


def layer_params(arch, w):
    """Per-layer (W, b) tensors from a flat vector, a flat Tensor, or a leaf list."""
    if isinstance(w, (list, tuple)):
        if len(w) != 2 * arch.depth:
            raise DimensionError("leaf list does not match the architecture")
        return [(w[2 * i], w[2 * i + 1]) for i in range(arch.depth)]
    if isinstance(w, ad.Tensor):
        if w.shape != (arch.n_w,):
            raise DimensionError(f"weight tensor has shape {w.shape}")
        return [(ad.reshape(w[ws], shape), w[bs]) for ws, bs, shape in arch.dense_slices()]
    return [(ad.Tensor(W), ad.Tensor(b)) for W, b in unpack(arch, w)]


def _as_input(arch, x):
    t = x if isinstance(x, ad.Tensor) else None
    arr = t.data if t is not None else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if arr.ndim not in (1, 2) or arr.shape[-1] != arch.input_dim:
        raise UsageError(f"input of shape {arr.shape} does not match input_dim {arch.input_dim}")
    if t is None:
        t = ad.Tensor(arr.reshape(1, -1) if single else arr, batched=True)
    elif single:
        t = ad.reshape(t, (1, -1))
    return t, single


def apply_layers(arch, params, h):
    """Run a batched tensor through the layers given per-layer parameters."""
    it = iter(params)
    for layer in arch.layers:
        if layer.kind == "dense":
            W, b = next(it)
            h = ad.matmul(h, ad.transpose(W)) + b
        else:
            h = ad.relu(h)
    return h


def forward(arch, w, x):
    """Logits f^w(x) for one input (shape (n,)) or a batch (shape (B, n))."""
    h, single = _as_input(arch, x)
    out = apply_layers(arch, layer_params(arch, w), h)
    return ad.reshape(out, (arch.class_count,)) if single else out


def _batch_arrays(batch):
    if isinstance(batch, Dataset):
        return batch.inputs, batch.labels
    inputs, labels = batch
    return np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def per_example_nll(arch, w, batch):
    """Vector of -log softmax_{y_i}(f^w(x_i))."""
    inputs, labels = _batch_arrays(batch)
    if len(labels) == 0:
        raise UsageError("empty batch")
    logits = forward(arch, w, inputs.reshape(len(labels), -1))
    return -ad.pick(ad.log_softmax(logits), labels)


def standard_nll(arch, w, batch):
    """Summed categorical negative log-likelihood over a batch (a scalar Tensor)."""
    return ad.sum(per_example_nll(arch, w, batch))


def _sample_matrix(arch, samples):
    S = np.asarray(samples, dtype=np.float64)
    if S.ndim == 1:
        S = S.reshape(1, -1)
    if S.ndim != 2 or len(S) == 0:
        raise UsageError("need at least one weight sample")
    if S.shape[1] != arch.n_w:
        raise DimensionError(f"samples have {S.shape[1]} weights, architecture needs {arch.n_w}")
    return S


def ensemble_params(arch, samples):
    """Per-layer constant tensors stacked over samples: W (N, out, in), b (N, 1, out)."""
    S = _sample_matrix(arch, samples)
    return [(ad.Tensor(S[:, ws].reshape((len(S),) + shape)), ad.Tensor(S[:, bs][:, None, :]))
            for ws, bs, shape in arch.dense_slices()]


def ensemble_logits(arch, samples, x):
    """Logits of every sample at once for a batch x: shape (N, B, C).

    ``x`` may be a differentiable Tensor; the weights are constants.
    """
    h, _ = _as_input(arch, x)
    return apply_layers(arch, ensemble_params(arch, samples), h)


def sample_probs(arch, samples, x, chunk=500):
    """Softmax outputs of every sample: shape (N, B, C) for batched x, (N, C) otherwise."""
    S = _sample_matrix(arch, samples)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    parts = [ad.softmax(ensemble_logits(arch, S, X[i:i + chunk])).data
             for i in range(0, len(X), chunk)]
    out = np.concatenate(parts, axis=1)
    return out[:, 0] if single else out


def predict_ensemble(arch, samples, x):
    """Posterior predictive estimate: mean of the per-sample softmax outputs."""
    return sample_probs(arch, samples, x).mean(axis=0)


def predict_class(arch, samples, x):
    """argmax of the ensemble predictive (numpy breaks ties toward the lowest index)."""
    return np.argmax(predict_ensemble(arch, samples, x), axis=-1)


def init_weights(arch, rng, scale=1.0):
    """Gaussian fan-in initialization: W ~ N(0, scale^2 / fan_in), b = 0."""
    parts = []
    for _, _, (out, inp) in arch.dense_slices():
        parts += [rng.normal(scale=scale / np.sqrt(inp), size=out * inp), np.zeros(out)]
    return np.concatenate(parts)


# ------------------------------------------------------------ sample container
#
# little-endian: 8-byte magic, uint64 n_w, uint64 N, then N*n_w float64 values

SAMPLE_MAGIC = b"BNNWSMP1"
_HEADER = struct.Struct("<8sQQ")


def encode_samples(samples):
    S = np.ascontiguousarray(np.atleast_2d(np.asarray(samples, dtype="<f8")))
    return _HEADER.pack(SAMPLE_MAGIC, S.shape[1], S.shape[0]) + S.tobytes()


def decode_samples(raw, offset=0):
    """Parse a container starting at ``offset``; returns (samples, end offset)."""
    if len(raw) - offset < _HEADER.size:
        raise FormatError("truncated sample header", offset=len(raw))
    magic, n_w, n = _HEADER.unpack_from(raw, offset)
    if magic != SAMPLE_MAGIC:
        raise FormatError("bad sample-container magic", offset=offset)
    start = offset + _HEADER.size
    end = start + 8 * n_w * n
    if end > len(raw):
        raise FormatError(f"truncated sample payload: need {end - start} bytes", offset=len(raw))
    S = np.frombuffer(raw, dtype="<f8", count=n_w * n, offset=start).reshape(n, n_w)
    return S.astype(np.float64), end


def write_samples(path, samples):
    with open(path, "wb") as fh:
        fh.write(encode_samples(samples))


def read_samples(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    S, end = decode_samples(raw)
    if end != len(raw):
        raise FormatError("trailing bytes after sample payload", offset=end)
    return S


def architecture_json(arch):
    return json.dumps(arch.to_dict(), sort_keys=True, separators=(",", ":"))
