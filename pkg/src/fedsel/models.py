"""Flat-parameter softmax classifiers with hand-derived gradients.

Two architectures: multinomial logistic regression and a two-hidden-layer
ReLU MLP. Parameters live in a single flat float64 vector with a named
segment layout, which keeps averaging, serialization, and SGD trivial.
All arithmetic is 64-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SampleSet

Layout = tuple[tuple[str, tuple[int, ...]], ...]

_PARAMS_MAGIC = b"FPV1"


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "logistic" | "mlp"
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind == "logistic" and self.hidden:
            raise ValueError("logistic model takes no hidden layers")
        if self.kind == "mlp":
            if len(self.hidden) != 2:
                raise ValueError("mlp requires exactly two hidden layer widths")
            if any(h < 1 for h in self.hidden):
                raise ValueError("hidden widths must be positive")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.num_classes)


def layout_for(spec: ModelSpec) -> Layout:
    dims = spec.layer_dims
    segments: list[tuple[str, tuple[int, ...]]] = []
    for i in range(len(dims) - 1):
        segments.append((f"w{i}", (dims[i], dims[i + 1])))
        segments.append((f"b{i}", (dims[i + 1],)))
    return tuple(segments)


def _layout_size(layout: Layout) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout)


@dataclass
class ParamVector:
    """Flat parameter vector plus its named segment layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != _layout_size(self.layout):
            raise ValueError(
                f"parameter vector length {self.values.size} does not match layout "
                f"size {_layout_size(self.layout)}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        offset = 0
        for seg_name, shape in self.layout:
            n = int(np.prod(shape))
            if seg_name == name:
                return self.values[offset : offset + n].reshape(shape)
            offset += n
        raise KeyError(name)

    def segments(self) -> list[np.ndarray]:
        out, offset = [], 0
        for _, shape in self.layout:
            n = int(np.prod(shape))
            out.append(self.values[offset : offset + n].reshape(shape))
            offset += n
        return out

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class MinibatchEval:
    mean_loss: float
    gradient: ParamVector
    batch_size: int


def init_params(spec: ModelSpec, seed=0) -> ParamVector:
    """Zero init for logistic; uniform fan-based init for MLP weights, zero biases.

    ``seed`` is anything ``numpy.random.default_rng`` accepts.
    """
    layout = layout_for(spec)
    values = np.zeros(_layout_size(layout))
    params = ParamVector(values, layout)
    if spec.kind == "mlp":
        rng = np.random.default_rng(seed)
        dims = spec.layer_dims
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.segment(f"w{i}")[...] = rng.uniform(-limit, limit, (fan_in, fan_out))
    return params


def _forward(spec: ModelSpec, params: ParamVector, x: np.ndarray):
    """Returns (logits, activations); activations[0] is the input batch."""
    segs = params.segments()
    acts = [x]
    h = x
    n_layers = len(spec.layer_dims) - 1
    for i in range(n_layers):
        w, b = segs[2 * i], segs[2 * i + 1]
        z = h @ w + b
        if i < n_layers - 1:
            z = np.maximum(z, 0.0)
            acts.append(z)
        h = z
    return h, acts


def _batch_nll(logits: np.ndarray, labels: np.ndarray):
    """Mean stabilized cross-entropy; also returns pieces needed for the gradient."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    nll = lse[:, 0] - shifted[np.arange(labels.size), labels]
    return float(nll.mean()), shifted, lse


def logits(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    out, _ = _forward(spec, params, np.asarray(features, dtype=np.float64))
    return out


def loss(spec: ModelSpec, params: ParamVector, batch: SampleSet) -> float:
    """Mean cross-entropy of softmax outputs over the batch."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    if batch.feature_dim != spec.input_dim:
        raise ValueError(f"batch feature dim {batch.feature_dim} != input_dim {spec.input_dim}")
    out, _ = _forward(spec, params, batch.features)
    mean_nll, _, _ = _batch_nll(out, batch.labels)
    return mean_nll


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: SampleSet) -> MinibatchEval:
    """Batch-mean loss and its gradient via backprop through the flat layout.

    The returned mean_loss is computed by the same code path as :func:`loss`,
    so the two agree bit-for-bit.
    """
    if len(batch) == 0:
        raise ValueError("batch is empty")
    if batch.feature_dim != spec.input_dim:
        raise ValueError(f"batch feature dim {batch.feature_dim} != input_dim {spec.input_dim}")
    n = len(batch)
    out, acts = _forward(spec, params, batch.features)
    mean_nll, shifted, lse = _batch_nll(out, batch.labels)

    probs = np.exp(shifted - lse)
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    segs = params.segments()
    n_layers = len(spec.layer_dims) - 1
    grad = ParamVector(np.zeros(params.size), params.layout)
    gsegs = grad.segments()
    for i in range(n_layers - 1, -1, -1):
        h_in = acts[i]
        gsegs[2 * i][...] = h_in.T @ delta
        gsegs[2 * i + 1][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ segs[2 * i].T) * (acts[i] > 0.0)
    return MinibatchEval(mean_loss=mean_nll, gradient=grad, batch_size=n)


def accuracy(spec: ModelSpec, params: ParamVector, samples: SampleSet) -> float:
    """Fraction with argmax(logits) == label; argmax ties go to the lowest class."""
    if len(samples) == 0:
        raise ValueError("samples are empty")
    out, _ = _forward(spec, params, samples.features)
    return float(np.mean(np.argmax(out, axis=1) == samples.labels))


# ---------------------------------------------------------------------------
# Serialization: little-endian float64 values behind a JSON layout header
# ---------------------------------------------------------------------------


def params_to_bytes(params: ParamVector) -> bytes:
    header = json.dumps({"layout": [[name, list(shape)] for name, shape in params.layout]}).encode()
    body = np.ascontiguousarray(params.values, dtype="<f8").tobytes()
    return _PARAMS_MAGIC + struct.pack("<I", len(header)) + header + body


def params_from_bytes(buf: bytes) -> ParamVector:
    if buf[:4] != _PARAMS_MAGIC:
        raise ValueError("not a serialized parameter vector")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8 : 8 + hlen].decode())
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    values = np.frombuffer(buf, dtype="<f8", offset=8 + hlen)
    if values.size != _layout_size(layout):
        raise ValueError("serialized value count does not match the layout header")
    return ParamVector(values.copy(), layout)


def save_params(params: ParamVector, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParamVector:
    return params_from_bytes(Path(path).read_bytes())
