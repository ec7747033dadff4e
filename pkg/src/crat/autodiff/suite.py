"""Finite-difference checks for every differentiable op and the extractor."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .gradcheck import GradCheckResult, check_gradients
from .tensor import Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict]]


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def _matmul(rng):
    a, b = _t(rng, 5, 7), _t(rng, 7, 3)
    return (lambda: ops.matmul(a, b)), {"a": a, "b": b}


def _linear(rng):
    x, w, b = _t(rng, 4, 6), _t(rng, 6, 3), _t(rng, 3)
    return (lambda: ops.linear(x, w, b)), {"x": x, "w": w, "b": b}


def _add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4)
    return (lambda: ops.add(a, b)), {"a": a, "b": b}


def _mul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return (lambda: ops.mul(a, b)), {"a": a, "b": b}


def _relu(rng):
    x = _t(rng, 4, 6)
    return (lambda: ops.relu(x)), {"x": x}


def _conv2d(rng):
    x, w, b = _t(rng, 2, 3, 8, 8), _t(rng, 4, 3, 3, 3, scale=0.3), _t(rng, 4)
    return (lambda: ops.conv2d(x, w, b)), {"x": x, "w": w, "bias": b}


def _maxpool(rng):
    x = _t(rng, 2, 3, 8, 8)
    return (lambda: ops.maxpool2x2(x)), {"x": x}


def _gap(rng):
    x = _t(rng, 2, 3, 4, 4)
    return (lambda: ops.global_avg_pool(x)), {"x": x}


def _batchnorm(rng):
    x, g, b = _t(rng, 4, 3, 4, 4, scale=2.0), Tensor(1 + 0.1 * rng.standard_normal(3)), _t(rng, 3)
    stats = ops.BatchNormStats.fresh(3)
    return (lambda: ops.batchnorm(x, g, b, stats, mode="batch")), {"x": x, "gamma": g, "beta": b}


def _log_softmax(rng):
    z = _t(rng, 4, 6)
    return (lambda: ops.log_softmax(z)), {"logits": z}


def _cross_entropy(rng):
    z = _t(rng, 3, 5)
    y = rng.integers(0, 5, size=3)
    return (lambda: ops.cross_entropy(z, y)), {"logits": z}


def _kl(rng):
    s, t = _t(rng, 2, 4), Tensor(rng.standard_normal((2, 4)))
    return (lambda: ops.kl_divergence(s, t)), {"student": s}


def _two_layer(rng):
    x, w1, b1 = _t(rng, 6, 5), _t(rng, 5, 8, scale=0.5), _t(rng, 8, scale=0.1)
    w2, b2 = _t(rng, 8, 4, scale=0.5), _t(rng, 4, scale=0.1)
    y = rng.integers(0, 4, size=6)
    fn = lambda: ops.cross_entropy(ops.linear(ops.relu(ops.linear(x, w1, b1)), w2, b2), y)
    return fn, {"x": x, "w1": w1, "b1": b1, "w2": w2, "b2": b2}


def _extractor(rng):
    from ..model import ModelBundle, ModelConfig

    model = ModelBundle(ModelConfig(image_size=16), seed=int(rng.integers(2**31)))
    x = Tensor(rng.random((2, 3, 16, 16)))
    return (lambda: model.forward_features(x, "batch")), {"x": x, **model.extractor_params()}


CASES: dict[str, Case] = {
    "matmul": _matmul,
    "linear": _linear,
    "add": _add,
    "mul": _mul,
    "relu": _relu,
    "conv2d": _conv2d,
    "maxpool2x2": _maxpool,
    "global_avg_pool": _gap,
    "batchnorm": _batchnorm,
    "log_softmax": _log_softmax,
    "cross_entropy": _cross_entropy,
    "kl_divergence": _kl,
    "two_layer_net": _two_layer,
    "extractor": _extractor,
}


def run_suite(seed: int = 0, instances: int = 3, names=None) -> list[GradCheckResult]:
    """One result per (case, instance); the extractor samples 25 coords per input."""
    results = []
    for name in names or CASES:
        for i in range(instances):
            rng = np.random.default_rng([seed, i, len(name)])
            fn, inputs = CASES[name](rng)
            max_coords = 25 if name == "extractor" else None
            res = check_gradients(fn, inputs, seed=seed * 1000 + i, max_coords=max_coords, name=f"{name}[{i}]")
            results.append(res)
    return results
