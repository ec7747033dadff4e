"""Minimal float32 reverse-mode autodiff for the operations the model needs."""

from .gradcheck import GradCheckResult, check_gradients
from .ops import (
    BatchNormStats,
    add,
    batchnorm,
    conv2d,
    cross_entropy,
    global_avg_pool,
    kl_divergence,
    linear,
    log_softmax,
    matmul,
    maxpool2x2,
    mul,
    relu,
    softmax,
)
from .optim import SGD, sgd_step
from .tensor import DTYPE, Tensor, no_grad, precision

__all__ = [
    "DTYPE",
    "BatchNormStats",
    "GradCheckResult",
    "SGD",
    "Tensor",
    "add",
    "batchnorm",
    "check_gradients",
    "conv2d",
    "cross_entropy",
    "global_avg_pool",
    "kl_divergence",
    "linear",
    "log_softmax",
    "matmul",
    "maxpool2x2",
    "mul",
    "no_grad",
    "precision",
    "relu",
    "sgd_step",
    "softmax",
]
