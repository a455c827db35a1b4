"""Dense MLP backbone with hand-written backpropagation.

Matrices are plain ``float64`` numpy arrays.  A layer with weight ``W`` of
shape ``(out, in)`` and bias ``b`` maps a row batch ``a`` to ``a @ W.T + b``.
Hidden layers use ReLU; the last layer (the feature layer) is linear.

All operations return fresh arrays and never modify their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, LabelError, NumericError


@dataclass(frozen=True)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    momentum_weights: tuple[np.ndarray, ...] = field(default=())
    momentum_biases: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise DimensionError("an MLP needs at least an input and an output dimension")
        n_layers = len(dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise DimensionError(
                f"expected {n_layers} weight/bias pairs, got {len(self.weights)}/{len(self.biases)}"
            )
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[layer + 1], dims[layer]):
                raise DimensionError(
                    f"layer {layer}: weight shape {w.shape} != {(dims[layer + 1], dims[layer])}"
                )
            if b.shape != (dims[layer + 1],):
                raise DimensionError(f"layer {layer}: bias shape {b.shape} != {(dims[layer + 1],)}")
        if not self.momentum_weights:
            object.__setattr__(self, "momentum_weights", tuple(np.zeros_like(w) for w in self.weights))
        if not self.momentum_biases:
            object.__setattr__(self, "momentum_biases", tuple(np.zeros_like(b) for b in self.biases))
        for layer, (w, mw) in enumerate(zip(self.weights, self.momentum_weights)):
            if mw.shape != w.shape:
                raise DimensionError(f"layer {layer}: momentum buffer shape {mw.shape} != {w.shape}")
        for layer, (b, mb) in enumerate(zip(self.biases, self.momentum_biases)):
            if mb.shape != b.shape:
                raise DimensionError(f"layer {layer}: momentum buffer shape {mb.shape} != {b.shape}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def parameters(self) -> list[np.ndarray]:
        """Weights and biases interleaved per layer: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpModel":
        """Same architecture, new parameters (layout of :meth:`parameters`), momentum kept."""
        return MlpModel(
            self.layer_dims,
            tuple(np.array(p, dtype=np.float64) for p in params[0::2]),
            tuple(np.array(p, dtype=np.float64) for p in params[1::2]),
            self.momentum_weights,
            self.momentum_biases,
        )

    def reset_momentum(self) -> "MlpModel":
        return MlpModel(self.layer_dims, self.weights, self.biases)

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            tuple(w.copy() for w in self.weights),
            tuple(b.copy() for b in self.biases),
            tuple(m.copy() for m in self.momentum_weights),
            tuple(m.copy() for m in self.momentum_biases),
        )


@dataclass(frozen=True)
class GradientSet:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            tuple(factor * w for w in self.weights), tuple(factor * b for b in self.biases)
        )


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator) -> MlpModel:
    """He-uniform weights, zero biases, zero momentum."""
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, tuple(weights), tuple(biases))


def zero_mlp(layer_dims: Sequence[int]) -> MlpModel:
    dims = tuple(int(d) for d in layer_dims)
    return MlpModel(
        dims,
        tuple(np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])),
        tuple(np.zeros(o) for o in dims[1:]),
    )


def _as_batch(batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {x.shape}")
    return x


def _forward_cached(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    """Activations of every layer, input first, features last."""
    if x.shape[1] != model.input_dim:
        raise DimensionError(
            f"layer 0: batch has {x.shape[1]} columns, model expects {model.input_dim}"
        )
    acts = [x]
    last = model.num_layers - 1
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w.T + b
        acts.append(z if layer == last else np.maximum(z, 0.0))
    return acts


def forward(model: MlpModel, batch) -> np.ndarray:
    """Features of shape ``(n, d)``."""
    return _forward_cached(model, _as_batch(batch))[-1]


def _weights_of(classifier) -> np.ndarray:
    w = classifier.weights if hasattr(classifier, "weights") else classifier
    return np.asarray(w, dtype=np.float64)


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise LabelError("labels must be integer class indices")
    if n and (y.min() < 0 or y.max() >= num_classes):
        bad = y[(y < 0) | (y >= num_classes)][0]
        raise LabelError(f"label {bad} outside [0, {num_classes})")
    return y.astype(np.intp)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_terms(features, labels, w):
    h = _as_batch(features)
    if h.shape[1] != w.shape[0]:
        raise DimensionError(f"features have dim {h.shape[1]}, classifier expects {w.shape[0]}")
    y = _check_labels(labels, h.shape[0], w.shape[1])
    logits = h @ w
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(h.shape[0])
    loss = float(np.sum(log_norm - shifted[rows, y]))
    residual = np.exp(shifted - log_norm[:, None])
    residual[rows, y] -= 1.0
    return h, loss, residual


def ce_loss_and_grad(features, labels, classifier) -> tuple[float, np.ndarray]:
    """Summed softmax cross-entropy over the batch and its gradient w.r.t. the features.

    Logits are ``h @ W`` with ``W`` of shape ``(d, C)``; there is no logit bias.
    ``classifier`` is anything with a ``weights`` attribute, or the matrix itself.
    """
    w = _weights_of(classifier)
    _, loss, residual = _softmax_terms(features, labels, w)
    return loss, residual @ w.T


def ce_loss_and_grads_with_classifier(features, labels, weights):
    """Like :func:`ce_loss_and_grad` but also returns ``dL/dW`` for a trainable classifier."""
    w = _weights_of(weights)
    h, loss, residual = _softmax_terms(features, labels, w)
    return loss, residual @ w.T, h.T @ residual


def forward_with_cache(model: MlpModel, batch) -> tuple[np.ndarray, list[np.ndarray]]:
    """Features plus the per-layer activations :func:`backward` can reuse."""
    acts = _forward_cached(model, _as_batch(batch))
    return acts[-1], acts


def backward(model: MlpModel, batch, feature_grads, cache=None) -> GradientSet:
    """Exact parameter gradients given ``dL/df`` for the batch's features.

    ``cache`` (from :func:`forward_with_cache` on the same model and batch)
    skips recomputing the forward pass.
    """
    acts = cache if cache is not None else _forward_cached(model, _as_batch(batch))
    delta = np.asarray(feature_grads, dtype=np.float64)
    if delta.shape != acts[-1].shape:
        raise DimensionError(f"feature_grads shape {delta.shape} != features shape {acts[-1].shape}")
    gw = [None] * model.num_layers
    gb = [None] * model.num_layers
    for layer in range(model.num_layers - 1, -1, -1):
        gw[layer] = delta.T @ acts[layer]
        gb[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer]) * (acts[layer] > 0.0)
    return GradientSet(tuple(gw), tuple(gb))


def momentum_update(param, grad, buf, lr, momentum, weight_decay):
    """One heavy-ball step on a single array; returns ``(new_param, new_buffer)``."""
    v = momentum * buf + (grad + weight_decay * param)
    return param - lr * v, v


def sgd_momentum_step(
    model: MlpModel, grads: GradientSet, lr: float, momentum: float, weight_decay: float
) -> MlpModel:
    """``v <- momentum*v + (g + weight_decay*p)``; ``p <- p - lr*v``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if weight_decay < 0:
        raise ValueError("weight_decay must be non-negative")
    for g in grads.parameters():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry; step aborted")
    new_w, new_b, new_mw, new_mb = [], [], [], []
    for w, g, m in zip(model.weights, grads.weights, model.momentum_weights):
        p, v = momentum_update(w, g, m, lr, momentum, weight_decay)
        new_w.append(p)
        new_mw.append(v)
    for b, g, m in zip(model.biases, grads.biases, model.momentum_biases):
        p, v = momentum_update(b, g, m, lr, momentum, weight_decay)
        new_b.append(p)
        new_mb.append(v)
    return MlpModel(model.layer_dims, tuple(new_w), tuple(new_b), tuple(new_mw), tuple(new_mb))
