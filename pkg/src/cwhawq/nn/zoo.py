"""Desk-scale model zoo."""

import numpy as np

from ..rng import substream
from .layers import Conv2d, Dense, Flatten, MaxPool2x2, ReLU
from .model import Model, SoftmaxCE


def init_params(layers, seed):
    """He-normal weights, zero biases."""
    rng = substream(seed, "init")
    params = {}
    for i, layer in enumerate(layers):
        shapes = layer.param_shapes()
        if not shapes:
            continue
        wshape = shapes["weight"]
        fan_in = int(np.prod(wshape[1:]))
        p = {"weight": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape)}
        if "bias" in shapes:
            p["bias"] = np.zeros(shapes["bias"])
        params[i] = p
    return params


def mlp_s(input_shape=(16,), classes=10, hidden=128, seed=0):
    layers = []
    in_features = int(np.prod(input_shape))
    if len(input_shape) != 1:
        layers.append(Flatten())
    layers += [Dense(in_features, hidden), ReLU(), Dense(hidden, classes)]
    return Model(layers, init_params(layers, seed), input_shape, SoftmaxCE(), name="mlp-s")


def convnet_s(classes=10, seed=0):
    layers = [
        Conv2d(1, 8, 3, 3, padding=1), ReLU(), MaxPool2x2(),
        Conv2d(8, 16, 3, 3, padding=1), ReLU(), MaxPool2x2(),
        Flatten(),
        Dense(784, 64), ReLU(),
        Dense(64, classes),
    ]
    return Model(layers, init_params(layers, seed), (1, 28, 28), SoftmaxCE(), name="convnet-s")


def build_model(name, input_shape, classes, seed=0):
    if name == "mlp-s":
        return mlp_s(tuple(input_shape), classes, seed=seed)
    if name == "convnet-s":
        if tuple(input_shape) != (1, 28, 28):
            raise ValueError("convnet-s expects 1x28x28 inputs")
        return convnet_s(classes, seed=seed)
    raise ValueError(f"unknown model {name!r}")
