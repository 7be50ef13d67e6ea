"""From-scratch multilayer perceptron with exact backpropagation.

The same model class serves as victim, surrogate, shadow, and recovery
network. Hidden layers are ReLU, the output layer is affine, and the
"features" of an input are the post-activation values of the last hidden
layer (the representation the watermark similarity score is computed on).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .numerics import (
    RandomSource,
    log_softmax,
    read_tensor,
    softmax,
    write_tensor,
)

MODEL_MAGIC = b"NHTM"

LOSS_KINDS = ("hard", "soft", "mse")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN/Inf."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.0
    lr_decay_step: int = 0
    lr_decay_factor: float = 1.0
    loss: str = "hard"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # A zero rate is allowed (it is the no-op schedule); negatives are not.
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")


class Mlp:
    """ReLU MLP defined by its layer widths [D, H1, ..., Hk, K]."""

    def __init__(self, widths: Sequence[int], weights, biases):
        widths = [int(w) for w in widths]
        if len(widths) < 3:
            raise ValueError("need at least one hidden layer: [in, hidden..., out]")
        if len(weights) != len(widths) - 1 or len(biases) != len(widths) - 1:
            raise ValueError("parameter count does not match widths")
        for l, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l} parameter shapes inconsistent with widths")
        self.widths = widths
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    # -- construction -------------------------------------------------------

    @classmethod
    def initialize(cls, widths: Sequence[int], rng: RandomSource) -> "Mlp":
        """He-scaled Gaussian weights, zero biases, drawn from `rng`."""
        widths = [int(w) for w in widths]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(widths, weights, biases)

    def copy(self) -> "Mlp":
        return Mlp(self.widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # -- shape accessors -----------------------------------------------------

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-2]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    # -- forward -------------------------------------------------------------

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (features, logits) for an n x D batch.

        Features are the post-ReLU activations of the final hidden layer;
        logits are the affine output with no activation.
        """
        acts, _ = forward_cached(self, batch)
        return acts[-2], acts[-1]

    def parameter_digest(self) -> str:
        """SHA-256 over widths and raw parameter bytes; used to verify that
        protection layers never touch the model."""
        h = hashlib.sha256()
        h.update(struct.pack(f"<{len(self.widths)}Q", *self.widths))
        for w, b in zip(self.weights, self.biases):
            h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return h.hexdigest()


def _check_batch(model: Mlp, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match input width {model.input_dim}"
        )
    return batch


def forward_cached(model: Mlp, batch: np.ndarray):
    """Forward pass keeping per-layer pre-activations for backprop.

    Returns (acts, pres): acts[0] is the input, acts[i] the post-activation
    output of layer i-1, acts[-1] the logits; pres[i] is the pre-activation
    of layer i.
    """
    batch = _check_batch(model, batch)
    acts = [batch]
    pres = []
    last = model.num_layers - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        # einsum (unoptimized) reduces each output element in a fixed
        # sequential order, so row i of a batched forward is bit-identical
        # to a single-sample forward; BLAS matmul kernels are not.
        z = np.einsum("nd,dk->nk", acts[-1], w, optimize=False) + b
        pres.append(z)
        acts.append(z if l == last else np.maximum(z, 0.0))
    return acts, pres


def backprop(model: Mlp, acts, pres, dlogits: np.ndarray, dfeatures=None):
    """Exact gradients for an upstream gradient on the logits.

    `dfeatures`, when given, is an extra gradient injected at the final
    hidden activation (used by auxiliary heads that read the features).
    Returns (grads, dinput) where grads[l] = (dW_l, db_l).
    """
    last = model.num_layers - 1
    grads: list = [None] * model.num_layers
    delta = np.asarray(dlogits, dtype=np.float64)
    for l in range(last, -1, -1):
        a_prev = acts[l]
        grads[l] = (a_prev.T @ delta, delta.sum(axis=0))
        delta = delta @ model.weights[l].T
        if l == last and dfeatures is not None:
            delta = delta + dfeatures
        if l > 0:
            delta = delta * (pres[l - 1] > 0.0)
    return grads, delta


def loss_and_dlogits(logits: np.ndarray, targets, kind: str):
    """Mean loss over the batch and its exact gradient w.r.t. the logits."""
    n = logits.shape[0]
    k = logits.shape[1]
    if kind == "hard":
        labels = np.asarray(targets)
        if labels.ndim != 1 or labels.shape[0] != n:
            raise ValueError("hard targets must be a vector of class indices")
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError("class index out of range")
        logp = log_softmax(logits)
        loss = float(-np.mean(logp[np.arange(n), labels]))
        dlogits = softmax(logits)
        dlogits[np.arange(n), labels] -= 1.0
        return loss, dlogits / n
    if kind == "soft":
        probs = np.asarray(targets, dtype=np.float64)
        if probs.shape != logits.shape:
            raise ValueError("soft targets must match the logits shape")
        sums = probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("soft target rows must sum to 1 within 1e-9")
        logp = log_softmax(logits)
        loss = float(-np.mean(np.sum(probs * logp, axis=1)))
        return loss, (softmax(logits) - probs) / n
    if kind == "mse":
        target = np.asarray(targets, dtype=np.float64)
        if target.shape != logits.shape:
            raise ValueError("mse targets must match the logits shape")
        diff = logits - target
        loss = float(np.mean(diff**2))
        return loss, 2.0 * diff / diff.size
    raise ValueError(f"unknown loss kind {kind!r}")


def grad(model: Mlp, batch: np.ndarray, targets, loss_kind: str = "hard"):
    """Exact gradients of the mean loss w.r.t. every parameter.

    Returns (loss, grads) with grads[l] = (dW_l, db_l).
    """
    acts, pres = forward_cached(model, batch)
    loss, dlogits = loss_and_dlogits(acts[-1], targets, loss_kind)
    grads, _ = backprop(model, acts, pres, dlogits)
    return loss, grads


def input_grad_sign(model: Mlp, x: np.ndarray, target_class: int) -> np.ndarray:
    """Sign of d CE(logits, target_class) / d input, in {-1, 0, +1}.

    Coordinates with an exactly-zero gradient (dead ReLU paths) map to 0,
    and scaling the loss by any positive constant leaves the result
    unchanged by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("input_grad_sign expects a single flat input")
    target_class = int(target_class)
    if not 0 <= target_class < model.num_classes:
        raise ValueError("target class out of range")
    acts, pres = forward_cached(model, x[None, :])
    _, dlogits = loss_and_dlogits(acts[-1], np.array([target_class]), "hard")
    _, dinput = backprop(model, acts, pres, dlogits)
    return np.sign(dinput[0])


def train(
    model: Mlp,
    inputs: np.ndarray,
    targets,
    config: TrainConfig,
) -> tuple[Mlp, list[float]]:
    """Mini-batch SGD with momentum and a step learning-rate schedule.

    Pure function of (initial model, data, config): shuffling is driven by
    config.seed only, and the input model is never mutated. Returns the
    trained copy and the per-epoch mean loss trace.
    """
    inputs = _check_batch(model, inputs)
    targets = np.asarray(targets)
    if len(targets) != len(inputs):
        raise ValueError("need one target per input row")
    n = inputs.shape[0]
    model = model.copy()
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    rng = RandomSource(config.seed, "train-shuffle")
    trace: list[float] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.lr_decay_step > 0:
            lr = lr * config.lr_decay_factor ** (epoch // config.lr_decay_step)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = grad(model, inputs[idx], targets[idx], config.loss)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            epoch_loss += loss * len(idx)
            for l, (dw, db) in enumerate(grads):
                vel_w[l] = config.momentum * vel_w[l] - lr * dw
                vel_b[l] = config.momentum * vel_b[l] - lr * db
                model.weights[l] += vel_w[l]
                model.biases[l] += vel_b[l]
        trace.append(epoch_loss / n)
    return model, trace


def accuracy(model: Mlp, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax(logits) == label; argmax ties break to the lowest
    class index (np.argmax semantics), the convention used everywhere."""
    _, logits = model.forward(inputs)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def predict_labels(model: Mlp, inputs: np.ndarray) -> np.ndarray:
    _, logits = model.forward(inputs)
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# checkpoints: header (widths, activation tag) + one tensor container per
# parameter, weights and biases interleaved per layer
# ---------------------------------------------------------------------------


def write_model(fh: BinaryIO, model: Mlp) -> None:
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<I", len(model.widths)))
    for w in model.widths:
        fh.write(struct.pack("<Q", w))
    tag = b"relu"
    fh.write(struct.pack("<B", len(tag)))
    fh.write(tag)
    for w, b in zip(model.weights, model.biases):
        write_tensor(fh, w)
        write_tensor(fh, b)


def read_model(fh: BinaryIO) -> Mlp:
    magic = fh.read(4)
    if magic != MODEL_MAGIC:
        raise ValueError(f"bad model checkpoint magic {magic!r}")
    (nwidths,) = struct.unpack("<I", fh.read(4))
    widths = [struct.unpack("<Q", fh.read(8))[0] for _ in range(nwidths)]
    (taglen,) = struct.unpack("<B", fh.read(1))
    tag = fh.read(taglen).decode("ascii")
    if tag != "relu":
        raise ValueError(f"unsupported activation tag {tag!r}")
    weights, biases = [], []
    for _ in range(nwidths - 1):
        weights.append(read_tensor(fh))
        biases.append(read_tensor(fh))
    return Mlp(widths, weights, biases)


def save_model(path, model: Mlp) -> None:
    with open(path, "wb") as fh:
        write_model(fh, model)


def load_model(path) -> Mlp:
    with open(path, "rb") as fh:
        return read_model(fh)
