import os
from pathlib import Path

import numpy as np
import pytest

from cwhawq.data import gen_synthetic
from cwhawq.nn import Batch, Conv2d, Dense, Flatten, MaxPool2x2, Model, ReLU, Sigmoid, init_params

ROOT = Path(__file__).resolve().parents[1]
MNIST5K = ROOT / "data" / "mnist-5k"
FULL_MNIST = os.environ.get("CWHAWQ_MNIST_DIR")


def small_conv_model(seed=1):
    layers = [Conv2d(2, 3, 3, 3, padding=1), ReLU(), MaxPool2x2(), Flatten(),
              Dense(3 * 4 * 4, 5), Sigmoid(), Dense(5, 4)]
    return Model(layers, init_params(layers, seed), (2, 8, 8))


def small_mlp(seed=0, dims=(6, 10, 4)):
    layers = [Dense(dims[0], dims[1]), ReLU(), Dense(dims[1], dims[2])]
    return Model(layers, init_params(layers, seed), (dims[0],))


def random_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, *model.input_shape)), rng.integers(0, model.num_classes, n))


@pytest.fixture(scope="session")
def synthetic():
    return gen_synthetic(0)


@pytest.fixture(scope="session")
def mnist5k():
    from cwhawq.data import ingest_mnist
    return ingest_mnist(MNIST5K)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
