from .layers import Conv2d, Dense, Flatten, MaxPool2x2, ReLU, Sigmoid
from .model import (
    Batch,
    ForwardCache,
    Gradient,
    Model,
    QuadraticHead,
    SoftmaxCE,
    backward,
    forward_loss,
    hvp,
    loss_and_grad,
)
from .train import evaluate, sgd_step, train_epoch
from .zoo import build_model, convnet_s, init_params, mlp_s

__all__ = [
    "Batch", "Conv2d", "Dense", "Flatten", "ForwardCache", "Gradient", "MaxPool2x2",
    "Model", "QuadraticHead", "ReLU", "Sigmoid", "SoftmaxCE", "backward", "build_model",
    "convnet_s", "evaluate", "forward_loss", "hvp", "init_params", "loss_and_grad",
    "mlp_s", "sgd_step", "train_epoch",
]
