#!/usr/bin/env python3
"""
Numeric kernels and the model zoo for the parallel-SGD lab.

Everything in this module is a pure function of its inputs:
- ParameterVector / Gradient: read-only float64 vectors
- Vector kernels with fixed left-to-right reductions (axpby, dot, norm2)
- RngState: counter-based Philox streams keyed by (seed, stream_id)
- Models: linear regression, logistic regression, ReLU MLP
- forward_loss / backward / fd_gradient (independent finite differences)
- Checkpoint files (magic "PSYN1", little-endian header and values)

Usage:
    from numkit import RngState, init_model, backward, sgd_step

    model = init_model("mlp", (4, 8, 2), RngState(seed=42))
    grad = backward(model, batch)
    params = sgd_step(model.params, grad, lr=0.1)
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from errors import NumericError, RejectedInputError

logger = logging.getLogger(__name__)


# ─── Constants ───────────────────────────────────────────────────

MODEL_KINDS = ("linear-regression", "logistic-regression", "mlp")
KIND_CODES = {kind: code for code, kind in enumerate(MODEL_KINDS)}

CHECKPOINT_MAGIC = b"PSYN1"

_MASK64 = (1 << 64) - 1

# Stream ids above every plausible worker id. Epoch-dependent streams add
# the epoch index to their base.
DATA_STREAM = 1 << 40
TEACHER_STREAM = 2 << 40
CV_STREAM = 3 << 40
SHUFFLE_STREAM = 4 << 40


# ─── Vectors ─────────────────────────────────────────────────────


def _seal(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.ndim != 1 or arr.size == 0:
        raise RejectedInputError(f"{what} must be a nonempty 1-d vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat model parameters. Values are a private read-only float64 copy."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        object.__setattr__(self, "values", _seal(arr, "parameter vector"))

    @classmethod
    def adopt(cls, arr: np.ndarray) -> "ParameterVector":
        """Wrap a freshly computed array without copying it."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "values", _seal(np.asarray(arr, dtype=np.float64), "parameter vector"))
        return obj

    @classmethod
    def zeros(cls, dim: int) -> "ParameterVector":
        if dim < 1:
            raise RejectedInputError(f"dim must be positive, got {dim}")
        return cls.adopt(np.zeros(dim))

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.dim

    def bit_equal(self, other: "ParameterVector") -> bool:
        return self.dim == other.dim and bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class Gradient:
    """Gradient of a mean minibatch loss; sample_count is the minibatch size."""

    values: np.ndarray
    sample_count: int

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        object.__setattr__(self, "values", _seal(arr, "gradient"))
        if int(self.sample_count) < 1:
            raise RejectedInputError(f"sample_count must be positive, got {self.sample_count}")

    @classmethod
    def adopt(cls, arr: np.ndarray, sample_count: int) -> "Gradient":
        if int(sample_count) < 1:
            raise RejectedInputError(f"sample_count must be positive, got {sample_count}")
        obj = object.__new__(cls)
        object.__setattr__(obj, "values", _seal(np.asarray(arr, dtype=np.float64), "gradient"))
        object.__setattr__(obj, "sample_count", int(sample_count))
        return obj

    @property
    def dim(self) -> int:
        return int(self.values.size)


Vector = Union[ParameterVector, Gradient]


def _check_dims(x: Vector, y: Vector) -> None:
    if x.dim != y.dim:
        raise RejectedInputError(f"dimension mismatch: {x.dim} vs {y.dim}")


def sequential_sum(arr: np.ndarray) -> float:
    """Sum in strict left-to-right order (cumsum never reorders)."""
    if arr.size == 0:
        return 0.0
    return float(np.cumsum(arr, dtype=np.float64)[-1])


def ordered_sum(arr: np.ndarray, axis: int) -> np.ndarray:
    """Sum along `axis`, each lane accumulated left to right."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[axis] == 0:
        return np.zeros(tuple(s for i, s in enumerate(arr.shape) if i != axis % arr.ndim))
    return np.take(np.cumsum(arr, axis=axis), -1, axis=axis)


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b where every inner product runs k = 0, 1, ... in order.

    BLAS blocks and vectorizes its reductions; this never does. 1-d
    operands are treated like np.matmul treats them.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        return ordered_matmul(a[None, :], b)[0]
    if b.ndim == 1:
        return ordered_matmul(a, b[:, None])[:, 0]
    if a.shape[1] != b.shape[0]:
        raise RejectedInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    acc = a[:, 0:1] * b[0:1, :]
    for k in range(1, a.shape[1]):
        acc += a[:, k:k + 1] * b[k:k + 1, :]
    return acc


def kahan_sum(values: Sequence[float]) -> float:
    """Compensated summation; used as an oracle for the sequential kernels."""
    total = 0.0
    compensation = 0.0
    for v in values:
        y = float(v) - compensation
        t = total + y
        compensation = (t - total) - y
        total = t
    return total


def axpby(a: float, x: ParameterVector, b: float, y: ParameterVector) -> ParameterVector:
    """a·x + b·y elementwise."""
    _check_dims(x, y)
    return ParameterVector.adopt(a * x.values + b * y.values)


def dot(x: Vector, y: Vector) -> float:
    _check_dims(x, y)
    return sequential_sum(x.values * y.values)


def norm2(x: Vector) -> float:
    return math.sqrt(dot(x, x))


def sgd_step(params: ParameterVector, grad: Gradient, lr: float) -> ParameterVector:
    """Return params − lr·grad. The input vector is left untouched."""
    _check_dims(params, grad)
    if not lr > 0:
        raise RejectedInputError(f"learning rate must be positive, got {lr}")
    result = params.values - lr * grad.values
    if not np.all(np.isfinite(result)):
        raise NumericError("sgd_step produced non-finite parameters")
    return ParameterVector.adopt(result)


# ─── Deterministic RNG ───────────────────────────────────────────


@dataclass(frozen=True)
class RngState:
    """A Philox stream keyed by (seed, stream_id).

    Philox is counter-based, so the same key yields the same sequence on
    every platform and different stream ids never overlap.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = (int(self.seed) & _MASK64) | ((int(self.stream_id) & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, stream_id: int) -> "RngState":
        return RngState(self.seed, stream_id)


# ─── Models ──────────────────────────────────────────────────────


def param_count(kind: str, layer_dims: Sequence[int]) -> int:
    """Weights plus biases of every affine layer."""
    dims = list(layer_dims)
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(dims[:-1], dims[1:]))


def loss_kind(kind: str, layer_dims: Sequence[int]) -> str:
    """Loss implied by the model kind and its output width."""
    if kind == "linear-regression":
        return "squared"
    if kind == "logistic-regression":
        return "binary-ce"
    return "softmax-ce" if layer_dims[-1] >= 2 else "squared"


def _validate_architecture(kind: str, layer_dims: tuple) -> None:
    if kind not in KIND_CODES:
        raise RejectedInputError(f"unknown model kind '{kind}'. Valid: {', '.join(MODEL_KINDS)}")
    if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
        raise RejectedInputError(f"layer_dims must hold at least two positive sizes, got {layer_dims}")
    if kind != "mlp" and (len(layer_dims) != 2 or layer_dims[-1] != 1):
        raise RejectedInputError(f"{kind} takes layer_dims (d, 1), got {layer_dims}")


@dataclass(frozen=True, eq=False)
class Model:
    kind: str
    layer_dims: tuple
    params: ParameterVector

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        _validate_architecture(self.kind, dims)
        expected = param_count(self.kind, dims)
        if self.params.dim != expected:
            raise RejectedInputError(
                f"{self.kind} {dims} needs {expected} parameters, got {self.params.dim}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def loss(self) -> str:
        return loss_kind(self.kind, self.layer_dims)

    def with_params(self, params: ParameterVector) -> "Model":
        return Model(self.kind, self.layer_dims, params)


@dataclass(frozen=True, eq=False)
class MinibatchView:
    """Rows of a dataset consumed by one SGD step."""

    features: np.ndarray
    targets: np.ndarray

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


def init_model(kind: str, layer_dims: Sequence[int], rng: RngState) -> Model:
    """Fresh model: zeros for the convex models, Glorot-uniform MLP weights.

    MLP weights are drawn from `rng` (the worker-0 stream by convention);
    biases start at zero.
    """
    dims = tuple(int(d) for d in layer_dims)
    _validate_architecture(kind, dims)
    if kind != "mlp":
        return Model(kind, dims, ParameterVector.zeros(param_count(kind, dims)))

    gen = rng.generator()
    chunks = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(gen.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return Model(kind, dims, ParameterVector.adopt(np.concatenate(chunks)))


def _unpack(model: Model) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into (W, b) per layer; W is (fan_in, fan_out)."""
    flat = model.params.values
    layers = []
    offset = 0
    for fan_in, fan_out in zip(model.layer_dims[:-1], model.layer_dims[1:]):
        w = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = flat[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _check_batch(model: Model, batch: MinibatchView) -> None:
    features = batch.features
    if features.ndim != 2 or features.shape[0] == 0:
        raise RejectedInputError(f"batch must be a nonempty (m, d) matrix, got shape {features.shape}")
    if features.shape[1] != model.input_dim:
        raise RejectedInputError(
            f"feature dim {features.shape[1]} does not match model input dim {model.input_dim}"
        )
    if batch.targets.shape != (features.shape[0],):
        raise RejectedInputError(
            f"targets shape {batch.targets.shape} does not match {features.shape[0]} rows"
        )
    if model.loss == "softmax-ce":
        labels = batch.targets
        if np.any(labels != np.floor(labels)) or labels.min() < 0 or labels.max() >= model.output_dim:
            raise RejectedInputError(f"class targets must be integers in [0, {model.output_dim})")


def _affine(h: np.ndarray, w: np.ndarray, b: np.ndarray, layer: int) -> np.ndarray:
    z = ordered_matmul(h, w) + b
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite activations in layer {layer}", layer=layer)
    return z


def model_outputs(model: Model, features: np.ndarray) -> np.ndarray:
    """Raw last-layer values (logits for the classifiers), shape (m, out)."""
    layers = _unpack(model)
    h = features
    for index, (w, b) in enumerate(layers, start=1):
        z = _affine(h, w, b, index)
        h = np.maximum(z, 0.0) if index < len(layers) else z
    return h


def hidden_preactivations(model: Model, features: np.ndarray) -> list[np.ndarray]:
    """Pre-ReLU values of every hidden layer (empty for the convex models)."""
    layers = _unpack(model)
    h = features
    pre = []
    for index, (w, b) in enumerate(layers[:-1], start=1):
        z = _affine(h, w, b, index)
        pre.append(z)
        h = np.maximum(z, 0.0)
    return pre


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(ordered_sum(np.exp(shifted), axis=1))[:, None]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _per_sample_loss(loss: str, out: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if loss == "squared":
        residual = out[:, 0] - targets
        return 0.5 * residual * residual
    if loss == "binary-ce":
        z = out[:, 0]
        return np.logaddexp(0.0, z) - targets * z
    log_probs = _log_softmax(out)
    return -log_probs[np.arange(out.shape[0]), targets.astype(np.int64)]


def _mean(values: np.ndarray, what: str) -> float:
    value = sequential_sum(values) / values.size
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}")
    return value


def forward_loss(model: Model, batch: MinibatchView) -> float:
    """Mean per-sample loss of `model` on `batch`."""
    _check_batch(model, batch)
    out = model_outputs(model, batch.features)
    return _mean(_per_sample_loss(model.loss, out, batch.targets), "loss")


def loss_and_gradient(model: Model, batch: MinibatchView) -> tuple[float, Gradient]:
    """Mean loss and its analytic gradient from one forward/backward pass."""
    _check_batch(model, batch)
    layers = _unpack(model)
    m = batch.size

    inputs = []
    pre = []
    h = batch.features
    for index, (w, b) in enumerate(layers, start=1):
        inputs.append(h)
        z = _affine(h, w, b, index)
        pre.append(z)
        h = np.maximum(z, 0.0) if index < len(layers) else z

    out = h
    targets = batch.targets
    loss = _mean(_per_sample_loss(model.loss, out, targets), "loss")

    if model.loss == "squared":
        delta = (out - targets[:, None]) / m
    elif model.loss == "binary-ce":
        delta = (_sigmoid(out) - targets[:, None]) / m
    else:
        delta = np.exp(_log_softmax(out))
        delta[np.arange(m), targets.astype(np.int64)] -= 1.0
        delta /= m

    grads: list[np.ndarray] = []
    for index in range(len(layers) - 1, -1, -1):
        w, _ = layers[index]
        grads.append(ordered_sum(delta, axis=0))
        grads.append(ordered_matmul(inputs[index].T, delta).ravel())
        if index > 0:
            delta = ordered_matmul(delta, w.T) * (pre[index - 1] > 0.0)
    grads.reverse()
    # reversed pairs now read (dW, db) per layer, matching _unpack order
    flat = np.concatenate(grads)
    if not np.all(np.isfinite(flat)):
        raise NumericError("non-finite gradient")
    return loss, Gradient.adopt(flat, m)


def backward(model: Model, batch: MinibatchView) -> Gradient:
    """Gradient of the mean loss w.r.t. the flat parameters."""
    return loss_and_gradient(model, batch)[1]


def fd_gradient(model: Model, batch: MinibatchView, epsilon: float = 1e-5) -> Gradient:
    """Central finite differences, one coordinate at a time (O(dim) passes).

    Only forward_loss is used, so this is an independent check on backward.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise RejectedInputError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    _check_batch(model, batch)
    base = model.params.values
    numeric = np.empty_like(base)
    for j in range(base.size):
        plus = base.copy()
        plus[j] += epsilon
        minus = base.copy()
        minus[j] -= epsilon
        f_plus = forward_loss(model.with_params(ParameterVector.adopt(plus)), batch)
        f_minus = forward_loss(model.with_params(ParameterVector.adopt(minus)), batch)
        numeric[j] = (f_plus - f_minus) / (2.0 * epsilon)
    return Gradient.adopt(numeric, batch.size)


def max_relative_error(
    analytic: Gradient,
    numeric: Gradient,
    threshold: float = 1e-8,
    floor: float = 1e-3,
) -> float:
    """Largest |a − f| / max(|a|, |f|, floor) over coordinates with |a| > threshold."""
    _check_dims(analytic, numeric)
    a = analytic.values
    f = numeric.values
    mask = np.abs(a) > threshold
    if not np.any(mask):
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a[mask]), np.abs(f[mask])), floor)
    return float(np.max(np.abs(a[mask] - f[mask]) / scale))


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    """Regression outputs, positive-class probabilities, or class probabilities."""
    out = model_outputs(model, np.asarray(features, dtype=np.float64))
    if model.loss == "squared":
        return out[:, 0]
    if model.loss == "binary-ce":
        return _sigmoid(out[:, 0])
    return np.exp(_log_softmax(out))


# ─── Checkpoints ─────────────────────────────────────────────────


def encode_checkpoint(model: Model) -> bytes:
    """Magic, then u32 kind, u32 layer count, u32 dims, u32 dim, then f64 values."""
    dims = model.layer_dims
    header = struct.pack(
        f"<II{len(dims)}II",
        KIND_CODES[model.kind],
        len(dims),
        *dims,
        model.params.dim,
    )
    return CHECKPOINT_MAGIC + header + model.params.values.astype("<f8").tobytes()


def decode_checkpoint(blob: bytes) -> Model:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise RejectedInputError("not a PSYN1 checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        kind_code, n_dims = struct.unpack_from("<II", blob, offset)
        offset += 8
        dims = struct.unpack_from(f"<{n_dims}I", blob, offset)
        offset += 4 * n_dims
        (dim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
    except struct.error as e:
        raise RejectedInputError(f"truncated checkpoint header: {e}") from e

    if kind_code >= len(MODEL_KINDS):
        raise RejectedInputError(f"unknown model kind code {kind_code}")
    if len(blob) - offset != 8 * dim:
        raise RejectedInputError(
            f"checkpoint holds {len(blob) - offset} value bytes, header promises {8 * dim}"
        )
    values = np.frombuffer(blob, dtype="<f8", count=dim, offset=offset).astype(np.float64)
    return Model(MODEL_KINDS[kind_code], tuple(dims), ParameterVector.adopt(values))


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.debug("wrote checkpoint %s (%d params)", path, model.params.dim)
    return path


def load_checkpoint(path: Union[str, Path]) -> Model:
    return decode_checkpoint(Path(path).read_bytes())
