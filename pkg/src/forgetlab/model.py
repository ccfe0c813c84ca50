"""Fully-connected classifier with manual forward/backward passes.

The default network is 784-300-150-10: two leaky-ReLU hidden layers and a
softmax output. Parameters and gradients share one container type so the
optimizers and importance maps can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NonFiniteError, RandomStream, ShapeError, matmul

DEFAULT_LAYER_SIZES = (784, 300, 150, 10)
LEAKY_SLOPE = 0.01
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Per-layer weights (out x in) and biases (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("weights and biases must be non-empty lists of equal length")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.dtype != np.float64:
                raise ShapeError(f"layer {l}: weights must be a 2-D float64 matrix")
            if b.shape != (w.shape[0],) or b.dtype != np.float64:
                raise ShapeError(
                    f"layer {l}: biases shaped {b.shape}, expected ({w.shape[0]},)"
                )
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(
                    f"layer {l} expects {w.shape[1]} inputs but layer {l - 1} "
                    f"emits {self.weights[l - 1].shape[0]}"
                )

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


# Gradients, optimizer moments and importance maps are all parameter-shaped.
Gradients = MlpParams


def check_congruent(a: MlpParams, b: MlpParams, what: str = "operands"):
    if a.layer_sizes != b.layer_sizes:
        raise ShapeError(
            f"{what} are not shape-congruent: {a.layer_sizes} vs {b.layer_sizes}"
        )


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )


def map_blocks(f, *objs: MlpParams) -> MlpParams:
    """Apply ``f`` blockwise across congruent parameter containers."""
    for other in objs[1:]:
        check_congruent(objs[0], other)
    return MlpParams(
        weights=[f(*ws) for ws in zip(*(o.weights for o in objs))],
        biases=[f(*bs) for bs in zip(*(o.biases for o in objs))],
    )


def flatten(params: MlpParams) -> np.ndarray:
    return np.concatenate(
        [w.ravel() for w in params.weights] + [b.ravel() for b in params.biases]
    )


def global_norm(params: MlpParams) -> float:
    return float(np.linalg.norm(flatten(params)))


def all_finite(params: MlpParams) -> bool:
    return all(np.isfinite(w).all() for w in params.weights) and all(
        np.isfinite(b).all() for b in params.biases
    )


@dataclass(frozen=True)
class ForwardTrace:
    """Backprop cache for one minibatch.

    ``pre_activations[l]`` holds layer l's affine outputs; ``activations``
    holds the hidden layers' post-leaky-ReLU values (the output layer's
    nonlinearity is the softmax in ``probabilities``).
    """

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    probabilities: np.ndarray


def init_params(
    stream: RandomStream, layer_sizes: tuple[int, ...] = DEFAULT_LAYER_SIZES
) -> MlpParams:
    """He-uniform weights (entries in +-sqrt(6/fan_in)) with zero biases."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes, layer_sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(stream.uniform(-limit, limit, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases)


def leaky_relu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def leaky_relu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, LEAKY_SLOPE)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def forward(params: MlpParams, batch: np.ndarray) -> ForwardTrace:
    """Run the network on a batch of image rows.

    Raises :class:`NonFiniteError` naming the layer if any pre-activation
    overflows.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(
            f"batch shaped {x.shape}, expected (B, {params.weights[0].shape[1]})"
        )
    pre, act = [], []
    a = x
    last = params.num_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        try:
            z = matmul(a, w.T) + b
        except NonFiniteError:
            raise NonFiniteError(f"non-finite pre-activation in layer {l}") from None
        if not np.isfinite(z).all():
            raise NonFiniteError(f"non-finite pre-activation in layer {l}")
        pre.append(z)
        if l < last:
            a = leaky_relu(z)
            act.append(a)
    return ForwardTrace(
        inputs=x, pre_activations=pre, activations=act, probabilities=softmax(pre[-1])
    )


def _check_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels outside 0..{classes - 1}")
    return labels.astype(np.int64)


def cross_entropy(trace: ForwardTrace, labels: np.ndarray, reduction: str = "mean") -> float:
    """Negative log-probability of the true class, computed from logits.

    Uses the log-sum-exp form so the result stays finite even when some
    probabilities underflow.
    """
    logits = trace.pre_activations[-1]
    labels = _check_labels(labels, logits.shape[1])
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} rows vs {labels.shape[0]} labels")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    per_sample = log_z - shifted[np.arange(len(labels)), labels]
    if reduction == "mean":
        return float(per_sample.mean())
    if reduction == "sum":
        return float(per_sample.sum())
    raise ValueError(f"unknown reduction {reduction!r}")


def backward(params: MlpParams, trace: ForwardTrace, labels: np.ndarray) -> Gradients:
    """Exact gradient of the mean cross-entropy for the traced batch."""
    batch = trace.inputs.shape[0]
    labels = _check_labels(labels, trace.probabilities.shape[1])
    if labels.shape[0] != batch:
        raise ShapeError(f"{batch} rows vs {labels.shape[0]} labels")
    delta = trace.probabilities.copy()
    delta[np.arange(batch), labels] -= 1.0
    delta /= batch
    grad_w = [None] * params.num_layers
    grad_b = [None] * params.num_layers
    for l in range(params.num_layers - 1, -1, -1):
        below = trace.inputs if l == 0 else trace.activations[l - 1]
        grad_w[l] = matmul(delta.T, below)
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = matmul(delta, params.weights[l]) * leaky_relu_grad(
                trace.pre_activations[l - 1]
            )
    return MlpParams(weights=grad_w, biases=grad_b)


def accuracy(params: MlpParams, images: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("accuracy of an empty evaluation set is undefined")
    labels = _check_labels(labels, params.weights[-1].shape[0])
    predictions = np.argmax(forward(params, images).probabilities, axis=1)
    return float(np.mean(predictions == labels))


def save_params(params: MlpParams, path: str):
    """Write a versioned npz checkpoint (also used for importance maps)."""
    arrays = {f"weights_{l}": w for l, w in enumerate(params.weights)}
    arrays.update({f"biases_{l}": b for l, b in enumerate(params.biases)})
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=np.int64(CHECKPOINT_VERSION),
            num_layers=np.int64(params.num_layers),
            **arrays,
        )


def load_params(path: str) -> MlpParams:
    with np.load(path) as archive:
        version = int(archive["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        n = int(archive["num_layers"])
        params = MlpParams(
            weights=[archive[f"weights_{l}"] for l in range(n)],
            biases=[archive[f"biases_{l}"] for l in range(n)],
        )
    if not all_finite(params):
        raise NonFiniteError(f"{path}: checkpoint contains non-finite values")
    return params
