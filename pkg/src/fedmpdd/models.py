"""Small differentiable models with hand-written gradients.

Two model kinds are supported: multinomial logistic regression and a
one-hidden-layer tanh MLP. Parameters live in one flat float64 vector so the
codecs and the round engine can treat every model the same way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np


@dataclass(frozen=True)
class ModelState:
    params: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.ndim != 1 or params.size == 0:
            raise ValueError("params must be a non-empty 1-D vector")
        if not np.all(np.isfinite(params)):
            raise ValueError("params contain NaN or Inf")
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return self.params.size

    @classmethod
    def zeros(cls, dim: int) -> "ModelState":
        return cls(np.zeros(dim))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        if inputs.shape[0] == 0:
            raise ValueError("empty batch")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} inputs"
            )
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class Logistic:
    """Multinomial logistic regression; layout is W (C x p, row-major) then b (C)."""

    classes: int
    input_dim: int

    def __post_init__(self):
        if self.classes < 2 or self.input_dim < 1:
            raise ValueError("logistic model needs classes >= 2 and input_dim >= 1")

    @property
    def num_params(self) -> int:
        return self.classes * (self.input_dim + 1)

    def _unpack(self, params):
        C, p = self.classes, self.input_dim
        return params[: C * p].reshape(C, p), params[C * p :]

    def logits(self, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        W, b = self._unpack(params)
        return inputs @ W.T + b

    def per_sample_grads(self, params, inputs, targets):
        """Per-sample gradients (n x d) of cross-entropy against soft targets."""
        delta = _softmax(self.logits(params, inputs)) - targets
        gW = delta[:, :, None] * inputs[:, None, :]
        return np.concatenate([gW.reshape(len(inputs), -1), delta], axis=1)

    def loss_and_grad_soft(self, params, inputs, targets):
        n = inputs.shape[0]
        logits = self.logits(params, inputs)
        loss = -np.sum(targets * _log_softmax(logits)) / n
        delta = (_softmax(logits) - targets) / n
        return loss, np.concatenate([(delta.T @ inputs).ravel(), delta.sum(axis=0)])


@dataclass(frozen=True)
class MLP1:
    """One hidden tanh layer; layout is W1 (h x p), b1 (h), W2 (C x h), b2 (C)."""

    hidden: int
    classes: int
    input_dim: int

    def __post_init__(self):
        if self.hidden < 1 or self.classes < 2 or self.input_dim < 1:
            raise ValueError("mlp1 needs hidden >= 1, classes >= 2, input_dim >= 1")

    @property
    def num_params(self) -> int:
        h, C, p = self.hidden, self.classes, self.input_dim
        return h * (p + 1) + C * (h + 1)

    def _unpack(self, params):
        h, C, p = self.hidden, self.classes, self.input_dim
        i = 0
        W1 = params[i : i + h * p].reshape(h, p)
        i += h * p
        b1 = params[i : i + h]
        i += h
        W2 = params[i : i + C * h].reshape(C, h)
        i += C * h
        return W1, b1, W2, params[i : i + C]

    def logits(self, params, inputs):
        W1, b1, W2, b2 = self._unpack(params)
        return np.tanh(inputs @ W1.T + b1) @ W2.T + b2

    def _backward(self, params, inputs, targets):
        W1, b1, W2, b2 = self._unpack(params)
        a = np.tanh(inputs @ W1.T + b1)
        logits = a @ W2.T + b2
        delta2 = _softmax(logits) - targets
        delta1 = (delta2 @ W2) * (1.0 - a * a)
        return logits, a, delta1, delta2

    def per_sample_grads(self, params, inputs, targets):
        n = inputs.shape[0]
        _, a, delta1, delta2 = self._backward(params, inputs, targets)
        gW1 = (delta1[:, :, None] * inputs[:, None, :]).reshape(n, -1)
        gW2 = (delta2[:, :, None] * a[:, None, :]).reshape(n, -1)
        return np.concatenate([gW1, delta1, gW2, delta2], axis=1)

    def loss_and_grad_soft(self, params, inputs, targets):
        n = inputs.shape[0]
        logits, a, delta1, delta2 = self._backward(params, inputs, targets)
        loss = -np.sum(targets * _log_softmax(logits)) / n
        delta1 /= n
        delta2 /= n
        grad = np.concatenate(
            [
                (delta1.T @ inputs).ravel(),
                delta1.sum(axis=0),
                (delta2.T @ a).ravel(),
                delta2.sum(axis=0),
            ]
        )
        return loss, grad


ModelKind = Union[Logistic, MLP1]


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= classes:
        raise ValueError(f"label {labels.max()} out of range for {classes} classes")
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_dim(model: ModelKind, state: ModelState):
    if state.dim != model.num_params:
        raise ValueError(
            f"state has {state.dim} params but model expects {model.num_params}"
        )


def loss_and_grad(model: ModelKind, state: ModelState, batch: Batch):
    """Mean cross-entropy over the batch and its exact gradient."""
    _check_dim(model, state)
    if batch.inputs.shape[1] != model.input_dim:
        raise ValueError(
            f"batch has {batch.inputs.shape[1]} features, model expects {model.input_dim}"
        )
    targets = one_hot(batch.labels, model.classes)
    return model.loss_and_grad_soft(state.params, batch.inputs, targets)


def finite_diff_grad(
    model: ModelKind, state: ModelState, batch: Batch, h: float = 1e-5
) -> np.ndarray:
    _check_dim(model, state)

    def f(x):
        return loss_and_grad(model, ModelState(x), batch)[0]

    return central_difference(f, state.params, h)


def central_difference(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


def sgd_step(state: ModelState, estimate: np.ndarray, eta: float) -> ModelState:
    estimate = np.asarray(estimate, dtype=np.float64)
    if not eta > 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    if estimate.shape != state.params.shape:
        raise ValueError(
            f"estimate length {estimate.size} does not match dim {state.dim}"
        )
    return ModelState(state.params - eta * estimate)


def predict(model: ModelKind, state: ModelState, inputs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(model.logits(state.params, np.atleast_2d(inputs)), axis=1)


def evaluate(model: ModelKind, state: ModelState, dataset, chunk: int = 4096):
    """Return (mean loss, accuracy) over ``dataset`` (anything with inputs/labels)."""
    _check_dim(model, state)
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for lo in range(0, n, chunk):
        x, y = inputs[lo : lo + chunk], labels[lo : lo + chunk]
        logits = model.logits(state.params, x)
        total_loss -= _log_softmax(logits)[np.arange(len(y)), y].sum()
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total_loss / n, correct / n


def init_state(model: ModelKind, seed: int = 0, scale: float = 0.0) -> ModelState:
    """Zero init by default; ``scale`` > 0 draws N(0, scale^2) weights."""
    if scale == 0.0:
        return ModelState.zeros(model.num_params)
    rng = np.random.default_rng(seed)
    return ModelState(rng.normal(0.0, scale, model.num_params))
