"""Dense feed-forward classifier: ReLU hidden layers, softmax output.

Trained with seeded mini-batch gradient descent on mean softmax
cross-entropy. Weight matrices are stored ``(n_out, n_in)`` so a layer maps
``h -> W @ h + b``; batches run as ``H @ W.T + b``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (512, 256)
OPTIMIZERS = ("adam", "sgd")


class TrainingError(RuntimeError):
    """Training diverged or was given unusable data."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.001
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass
class MlpModel:
    """Layer parameters plus per-layer identity-skip flags.

    ``residual_skips[i]`` adds the layer input to its pre-activation
    (``relu(W h + b + h)``); only valid on square hidden layers. The output
    layer never has a skip.
    """

    weights: list
    biases: list
    residual_skips: tuple = field(default=())

    def __post_init__(self):
        n = len(self.weights)
        if n < 1 or len(self.biases) != n:
            raise ValueError("weights and biases must be non-empty and of equal length")
        if not self.residual_skips:
            self.residual_skips = (False,) * n
        self.residual_skips = tuple(bool(s) for s in self.residual_skips)
        if len(self.residual_skips) != n:
            raise ValueError("residual_skips needs one flag per layer")
        if self.residual_skips[-1]:
            raise ValueError("output layer cannot carry a skip connection")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weights {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[1]} does not chain")
            if self.residual_skips[i] and w.shape[0] != w.shape[1]:
                raise ValueError(f"layer {i}: skip needs equal widths, got {w.shape}")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            residual_skips=self.residual_skips,
        )


def init_network(layer_sizes: Sequence[int], residual_skips=None, seed: int = 0) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if residual_skips is None:
        residual_skips = (False,) * len(weights)
    return MlpModel(weights=weights, biases=biases, residual_skips=tuple(residual_skips))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match model input {model.n_in}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    return x


def _forward_cache(model: MlpModel, x: np.ndarray):
    """Return logits and the activations needed for backprop (batch input)."""
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if i == last:
            return z, acts, pre
        if model.residual_skips[i]:
            z = z + h
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    raise AssertionError("unreachable")


def logits(model: MlpModel, x) -> np.ndarray:
    x = _check_input(model, x)
    single = x.ndim == 1
    z, _, _ = _forward_cache(model, np.atleast_2d(x))
    return z[0] if single else z


def forward(model: MlpModel, x) -> np.ndarray:
    """Class probabilities for one input vector or a batch of row vectors."""
    return softmax(logits(model, x))


def predict(model: MlpModel, x) -> np.ndarray:
    return np.argmax(logits(model, np.atleast_2d(x)), axis=1)


def loss_and_gradients(model: MlpModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch and its gradients.

    Returns ``(loss, probs, grad_w, grad_b)``.
    """
    z, acts, pre = _forward_cache(model, x)
    probs = softmax(z)
    n = x.shape[0]
    rows = np.arange(n)
    # log-softmax directly to keep tiny probabilities finite
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[rows, y].mean()

    delta = probs.copy()
    delta[rows, y] -= 1.0
    delta /= n
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        # delta is dL/dz for layer i here
        grad_w[i] = delta.T @ acts[i]
        grad_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        grad_h = delta @ model.weights[i]
        if model.residual_skips[i]:
            grad_h = grad_h + delta
        delta = grad_h * (pre[i - 1] > 0)
    return loss, probs, grad_w, grad_b


def train(
    model: MlpModel,
    features,
    labels,
    config: TrainConfig,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
):
    """Fit a copy of ``model`` and return ``(trained, loss_history)``.

    Each epoch shuffles the samples with a generator seeded from
    ``config.seed``, then steps through mini-batches of ``config.batch_size``.
    ``loss_history[e]`` is the sample-weighted mean batch loss of epoch ``e``.
    ``on_epoch(epoch, loss, accuracy)`` is called after every epoch with the
    running training accuracy of that epoch.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise TrainingError("empty dataset")
    if y.shape != (x.shape[0],):
        raise TrainingError(f"{x.shape[0]} samples but {y.shape} labels")
    if x.shape[1] != model.n_in:
        raise TrainingError(f"feature width {x.shape[1]} does not match model input {model.n_in}")
    if not np.all(np.isfinite(x)):
        raise TrainingError("non-finite feature values")
    if y.min() < 0 or y.max() >= model.n_out:
        raise TrainingError(f"labels must lie in [0, {model.n_out})")

    trained = model.copy()
    rng = np.random.default_rng(config.seed)
    n = x.shape[0]
    step = _make_optimizer(config, trained)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for batch_no, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, probs, grad_w, grad_b = loss_and_gradients(trained, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[idx]))
            step(grad_w + grad_b)
        epoch_loss = total_loss / n
        history.append(epoch_loss)
        log.debug("epoch %d loss %.6f acc %.4f", epoch, epoch_loss, correct / n)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, correct / n)
    return trained, history


def _make_optimizer(config: TrainConfig, model: MlpModel):
    """Return ``step(grads)`` updating the model parameters in place.

    ``grads`` lists weight gradients then bias gradients, matching
    ``model.weights + model.biases``.
    """
    params = model.weights + model.biases
    lr = config.learning_rate
    if config.optimizer == "sgd":

        def sgd_step(grads):
            for p, g in zip(params, grads):
                p -= lr * g

        return sgd_step

    beta1, beta2, eps = 0.9, 0.999, 1e-7
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0

    def adam_step(grads):
        nonlocal t
        t += 1
        alpha = lr * np.sqrt(1 - beta2**t) / (1 - beta1**t)
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= beta1
            mi += (1 - beta1) * g
            vi *= beta2
            vi += (1 - beta2) * g * g
            p -= alpha * mi / (np.sqrt(vi) + eps)

    return adam_step
