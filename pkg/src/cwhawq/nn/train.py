"""Mini-batch SGD training and evaluation."""

import numpy as np

from ..errors import NumericalError
from ..rng import substream
from .model import Batch, backward, forward_loss

ALPHA_FLOOR = 1e-6


def evaluate(model, inputs, labels, chunk=1000):
    """Top-1 accuracy as a fraction."""
    if len(inputs) == 0:
        raise ValueError("cannot evaluate on an empty set")
    logits = model.predict(inputs, chunk)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def sgd_step(model, grad, lr, velocity=None, momentum=0.0):
    """In-place SGD (optionally heavy-ball) update; returns the velocity state."""
    if velocity is None:
        velocity = {i: {n: np.zeros_like(t) for n, t in d.items()} for i, d in model.params.items()}
    for i, d in model.params.items():
        for name, t in d.items():
            g = grad.tensors.get(i, {}).get(name)
            if g is None:
                continue
            v = velocity[i][name]
            v *= momentum
            v += g
            t -= lr * v
            if name == "alpha":
                np.maximum(t, ALPHA_FLOOR, out=t)
    model.touch()
    return velocity


def train_epoch(model, data, lr, seed, batch_size=64, momentum=0.9):
    """One shuffled pass of mini-batch SGD over ``data.train_x``.

    Returns a new model and its top-1 accuracy on the evaluation split. The
    input model is left untouched.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    n = len(data.train_x)
    if n == 0:
        raise ValueError("empty dataset")
    model = model.copy()
    if lr > 0:
        order = substream(seed, "shuffle").permutation(n)
        velocity = None
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            loss, cache = forward_loss(model, Batch(data.train_x[idx], data.train_y[idx]))
            if not np.isfinite(loss):
                raise NumericalError(f"loss diverged ({loss}) at sample offset {s}")
            velocity = sgd_step(model, backward(model, cache), lr, velocity, momentum)
    return model, evaluate(model, data.eval_x, data.eval_y)
