"""Plain minibatch SGD on softmax cross-entropy."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DivergenceError, HeadKindError
from .model import HeadKind, backward, forward, with_params


_SHUFFLE_TAG = 0x5D


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    learning_rate: float = 0.05
    batch_size: int = 16
    seed: int = 0


def batch_loss_grad(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    p = T.softmax(logits.astype(np.float64))
    n = len(labels)
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean()
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), (g / n).astype(logits.dtype)


def train(model, images, labels, config=TrainConfig(), on_epoch=None):
    """Train ``model`` and return ``(trained_model, per-epoch mean losses)``.

    ``on_epoch(epoch, model, mean_loss)`` is called after every epoch.
    """
    if model.head_kind != HeadKind.GAP_FC:
        raise HeadKindError(f"training expects a GAP+FC model, got {model.head_kind.value}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise IndexError(f"labels must lie in [0, {model.class_count})")
    images = T.tensor4(images)
    rng = np.random.default_rng([config.seed, _SHUFFLE_TAG])
    params = {k: v.copy() for k, v in model.params.items()}
    lr = np.float32(config.learning_rate)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, acts = forward(model, images[idx], cache=True)
            loss, upstream = batch_loss_grad(logits, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch)
            total += loss * len(idx)
            grads = backward(model, acts, upstream).param_grads
            for name, g in grads.items():
                params[name] = params[name] - lr * g
            model = with_params(model, params)
        mean = total / len(order)
        if not np.isfinite(mean):
            raise DivergenceError(epoch)
        losses.append(mean)
        if on_epoch is not None:
            on_epoch(epoch, model, mean)
    return model, losses
