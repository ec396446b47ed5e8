"""Feed-forward network with manual backprop and per-example gradients.

Architecture is a ReLU MLP with a softmax cross-entropy head. Parameters
flatten layer-major, weights before biases:

    [W0.ravel(), b0, W1.ravel(), b1, ...]

with each W_k stored as a (fan_in, fan_out) matrix raveled row-major. Sign
vectors and the server residual index into this order, so it must never
change between releases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MlpModel:
    """Weights and biases of the MLP, one entry per layer."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class Batch:
    """A stack of examples: inputs in [0,1], integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError(f"inputs must be a nonempty 2-D matrix, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one class index per input row")


def init_mlp(layer_dims: tuple[int, ...] = (784, 64, 10), seed: int = 0) -> MlpModel:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases, seeded."""
    if len(layer_dims) < 2:
        raise ValueError("need at least an input and an output layer")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(tuple(layer_dims), weights, biases)


def zero_mlp(layer_dims: tuple[int, ...]) -> MlpModel:
    """All-zero model of the given shape (uniform output probabilities)."""
    weights = [np.zeros((i, o)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
    biases = [np.zeros(o) for o in layer_dims[1:]]
    return MlpModel(tuple(layer_dims), weights, biases)


def flatten_params(model: MlpModel) -> np.ndarray:
    """Concatenate all parameters in the documented layer-major order."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def model_from_flat(layer_dims: tuple[int, ...], flat: np.ndarray) -> MlpModel:
    """Rebuild an MlpModel from a flat vector in the documented order."""
    flat = np.asarray(flat, dtype=np.float64)
    weights, biases = [], []
    pos = 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos : pos + fan_out].copy())
        pos += fan_out
    if pos != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, model needs {pos}")
    return MlpModel(tuple(layer_dims), weights, biases)


def _forward_pass(model: MlpModel, inputs: np.ndarray):
    """Returns (hidden activations incl. inputs, hidden preactivations, logits)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.layer_dims[0]:
        raise ValueError(
            f"inputs of shape {inputs.shape} do not match input dim {model.layer_dims[0]}"
        )
    activations = [inputs]
    preacts = []
    a = inputs
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if k < len(model.weights) - 1:
            preacts.append(z)
            a = np.maximum(z, 0.0)
            activations.append(a)
        else:
            logits = z
    return activations, preacts, logits


def _losses_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    return logsumexp - logits[np.arange(len(labels)), labels]


def _output_deltas(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(loss_i)/d(logits_i): softmax probabilities minus the one-hot label."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    deltas = probs.copy()
    deltas[np.arange(len(labels)), labels] -= 1.0
    return deltas


def _backward_deltas(model: MlpModel, preacts, output_deltas: np.ndarray):
    """Per-layer error signals, input layer first."""
    deltas = [output_deltas]
    for k in range(len(model.weights) - 1, 0, -1):
        back = deltas[0] @ model.weights[k].T
        back *= preacts[k - 1] > 0.0
        deltas.insert(0, back)
    return deltas


def forward(model: MlpModel, batch: Batch):
    """Per-example cross-entropy losses and argmax class predictions."""
    if int(batch.labels.max()) >= model.layer_dims[-1] or int(batch.labels.min()) < 0:
        raise ValueError("labels must be valid class indices for the output layer")
    _, _, logits = _forward_pass(model, batch.inputs)
    return _losses_from_logits(logits, batch.labels), logits.argmax(axis=1)


def per_example_gradients(model: MlpModel, batch: Batch) -> np.ndarray:
    """Gradient of each example's loss w.r.t. all parameters, shape (n, d).

    Columns follow the documented flattening order. Materialises the full
    (n, d) matrix; intended for small models and oracle checks. Training
    uses :func:`local_gradient`, which folds per-example clipping into the
    layer matmuls without materialising this matrix.
    """
    activations, preacts, logits = _forward_pass(model, batch.inputs)
    deltas = _backward_deltas(model, preacts, _output_deltas(logits, batch.labels))
    n = batch.inputs.shape[0]
    parts = []
    for a, delta in zip(activations, deltas):
        parts.append(np.einsum("ni,nj->nij", a, delta).reshape(n, -1))
        parts.append(delta)
    return np.concatenate(parts, axis=1)


def _clipped_mean_gradient(model: MlpModel, inputs: np.ndarray, labels: np.ndarray,
                           clip_bound: float | None):
    """Mean of per-example gradients, each clipped to ``clip_bound``.

    Per-example gradients of layer k factor as outer(a_{k-1,i}, delta_{k,i}),
    so their squared norms are sum_k (|a_{k-1,i}|^2 + 1) * |delta_{k,i}|^2
    and the clip scale folds into the delta side of each layer matmul.
    Returns (flat gradient, mean loss).
    """
    activations, preacts, logits = _forward_pass(model, inputs)
    losses = _losses_from_logits(logits, labels)
    deltas = _backward_deltas(model, preacts, _output_deltas(logits, labels))
    n = inputs.shape[0]

    if clip_bound is None:
        scale = np.full(n, 1.0 / n)
    else:
        sq_norms = np.zeros(n)
        for a, delta in zip(activations, deltas):
            sq_norms += ((a * a).sum(axis=1) + 1.0) * (delta * delta).sum(axis=1)
        norms = np.sqrt(sq_norms)
        scale = np.where(norms > clip_bound, clip_bound / np.maximum(norms, 1e-300), 1.0) / n

    parts = []
    for a, delta in zip(activations, deltas):
        scaled = delta * scale[:, None]
        parts.append((a.T @ scaled).ravel())
        parts.append(scaled.sum(axis=0))
    return np.concatenate(parts), float(losses.mean())


class EpochSampler:
    """Without-replacement mini-batch indices, reshuffled at epoch boundaries."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        out = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def local_gradient(model: MlpModel, data, batch_size: int, clip_bound: float | None,
                   rng: np.random.Generator | None = None, *,
                   indices: np.ndarray | None = None,
                   return_loss: bool = False):
    """One party's shared gradient: mean of per-example-clipped batch gradients.

    Samples ``batch_size`` examples uniformly without replacement (all of
    them if the party holds fewer), computes per-example gradients, clips
    each to ``clip_bound`` (pass None to disable clipping for baselines) and
    returns their mean. Pass ``indices`` to use a caller-managed sampler,
    e.g. an :class:`EpochSampler` that reshuffles per epoch.
    """
    n = len(data.labels)
    if n == 0:
        raise ValueError("party dataset is empty")
    if clip_bound is not None and clip_bound <= 0.0:
        raise ValueError(f"clip bound must be positive, got {clip_bound!r}")
    if indices is None:
        if n <= batch_size:
            indices = np.arange(n)
        else:
            if rng is None:
                raise ValueError("an rng is required when sampling a strict subset")
            indices = rng.choice(n, size=batch_size, replace=False)
    grad, loss = _clipped_mean_gradient(
        model, data.examples[indices], data.labels[indices], clip_bound
    )
    if return_loss:
        return grad, loss
    return grad


def apply_update(model: MlpModel, direction: np.ndarray, eta: float) -> MlpModel:
    """New model with parameters w - eta * direction (documented flat order)."""
    if eta < 0.0:
        raise ValueError(f"learning rate must be nonnegative, got {eta!r}")
    direction = np.asarray(direction, dtype=np.float64)
    if direction.size != model.num_params:
        raise ValueError(
            f"direction has {direction.size} entries, model has {model.num_params} parameters"
        )
    return model_from_flat(model.layer_dims, flatten_params(model) - eta * direction)


def evaluate(model: MlpModel, data) -> tuple[float, float]:
    """(mean cross-entropy loss, accuracy) over a dataset."""
    losses, preds = forward(model, Batch(data.examples, data.labels))
    return float(losses.mean()), float((preds == data.labels).mean())
