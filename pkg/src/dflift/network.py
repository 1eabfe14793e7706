"""Dense multi-head MLP over flat parameter vectors.

The network maps a feature vector to 2M outputs: the first M are predicted
revenues, the last M predicted costs, one pair per treatment. Parameters
live in a single flat float64 vector with a fixed layer-major layout
(weights then bias per layer), so gradients, Hessian-vector products and
checkpoints all operate on plain arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import PredictionMatrix, ValidationError

LAYOUT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_layers: tuple
    num_treatments: int
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.num_treatments < 1:
            raise ValidationError("input_dim and num_treatments must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValidationError("hidden sizes must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("identity", "sigmoid"):
            raise ValidationError(f"unknown output activation {self.output_activation!r}")

    @property
    def output_dim(self) -> int:
        return 2 * self.num_treatments

    def layer_dims(self):
        return [self.input_dim, *self.hidden_layers, self.output_dim]

    def num_params(self) -> int:
        dims = self.layer_dims()
        return sum((fi + 1) * fo for fi, fo in zip(dims[:-1], dims[1:]))

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "num_treatments": self.num_treatments,
            "activation": self.activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_dim"], tuple(d["hidden_layers"]), d["num_treatments"],
                   d["activation"], d["output_activation"])


def init_params(spec: NetworkSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases, layer-major flat layout."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims()
    chunks = []
    for fi, fo in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fi + fo))
        chunks.append(rng.uniform(-bound, bound, size=fi * fo))
        chunks.append(np.zeros(fo))
    return np.concatenate(chunks)


def _layer_slices(spec: NetworkSpec):
    dims = spec.layer_dims()
    offset = 0
    out = []
    for fi, fo in zip(dims[:-1], dims[1:]):
        w = slice(offset, offset + fi * fo)
        b = slice(offset + fi * fo, offset + fi * fo + fo)
        out.append((w, b, fi, fo))
        offset = b.stop
    return out


def forward_graph(spec: NetworkSpec, params, features: np.ndarray):
    """Batch forward pass on the autodiff graph.

    ``params`` may be a Tensor (for training) or an ndarray. Returns the
    (revenues, costs) pair of graph tensors, each of shape (n, M).
    """
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValidationError(
            f"features must be (n, {spec.input_dim}), got {features.shape}"
        )
    p = ad.as_tensor(params)
    if p.data.shape != (spec.num_params(),):
        raise ValidationError(
            f"parameter vector has {p.data.shape}, expected ({spec.num_params()},)"
        )
    act = ad.relu if spec.activation == "relu" else ad.tanh
    h = ad.constant(features)
    layers = _layer_slices(spec)
    for li, (ws, bs, fi, fo) in enumerate(layers):
        w = ad.reshape(p[ws], (fi, fo))
        h = ad.add(ad.matmul(h, w), p[bs])
        if li < len(layers) - 1:
            h = act(h)
        elif spec.output_activation == "sigmoid":
            h = ad.sigmoid(h)
    m = spec.num_treatments
    return h[:, :m], h[:, m:]


def forward(spec: NetworkSpec, params: np.ndarray, features: np.ndarray) -> PredictionMatrix:
    """Plain-numpy forward pass; mirrors ``forward_graph`` op for op."""
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ValidationError(
            f"features must be (n, {spec.input_dim}), got {features.shape}"
        )
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params(),):
        raise ValidationError(
            f"parameter vector has {params.shape}, expected ({spec.num_params()},)"
        )
    h = features
    layers = _layer_slices(spec)
    for li, (ws, bs, fi, fo) in enumerate(layers):
        h = h @ params[ws].reshape(fi, fo) + params[bs]
        if li < len(layers) - 1:
            h = np.tanh(h) if spec.activation == "tanh" else np.maximum(h, 0.0)
        elif spec.output_activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
    m = spec.num_treatments
    return PredictionMatrix(h[:, :m].copy(), h[:, m:].copy())


# re-exported derivative helpers; all second-order products are matrix-free
grad = ad.gradient
value_and_grad = ad.value_and_grad
hessian_vector_product = ad.hessian_vector_product
hvp_operator = ad.hvp_operator
mixed_vjp = ad.mixed_vjp
mixed_vjp_operator = ad.mixed_vjp_operator


def save_params(path, spec: NetworkSpec, params: np.ndarray):
    """Checkpoint: one JSON header line, then raw little-endian float64."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    header = {"layout_version": LAYOUT_VERSION, "count": int(params.size),
              "spec": spec.to_dict()}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(params.astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("layout_version") != LAYOUT_VERSION:
            raise ValidationError(f"unsupported layout version {header.get('layout_version')}")
        spec = NetworkSpec.from_dict(header["spec"])
        params = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if params.size != header["count"] or params.size != spec.num_params():
        raise ValidationError("checkpoint parameter count mismatch")
    return spec, params
