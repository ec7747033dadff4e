"""Differentiable operations used by the model and the training losses.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.  Losses are evaluated in
float64 and cast back to float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import ArgumentError, DimensionError, LabelError
from .tensor import Tensor, as_tensor, compute_dtype, make_result

Scalar = Union[int, float]

# Piecewise ops (relu, maxpool) route their branch decisions (relu masks,
# pooling winners) through ``_branch``.  The gradient checker records them at
# the base point and replays them for perturbed evaluations, so finite
# differences see the same linear piece the analytic gradient describes.
class BranchTape:
    def __init__(self, replay: Optional[list] = None):
        self.records: list = [] if replay is None else list(replay)
        self.replaying = replay is not None
        self.pos = 0
        self.crossed = 0


_tape: Optional[BranchTape] = None


def _branch(decision: np.ndarray) -> np.ndarray:
    if _tape is None:
        return decision
    if _tape.replaying:
        frozen = _tape.records[_tape.pos]
        _tape.pos += 1
        if not np.array_equal(frozen, decision):
            _tape.crossed += 1
        return frozen
    _tape.records.append(decision)
    return decision


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _const(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=compute_dtype()))


# --------------------------------------------------------------------------
# elementwise / linear algebra
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as (in, out)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear input width {x.shape} does not match weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def relu(x: Tensor) -> Tensor:
    mask = _branch(x.data > 0)
    out = np.maximum(x.data, np.float32(0)) if _tape is None else x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


# --------------------------------------------------------------------------
# layout, convolution and pooling
#
# The spatial ops take (B, C, H, W) input by default.  With
# ``channels_last=True`` they take (B, H, W, C) instead, which avoids
# transposes in the im2col matmuls; the model runs its blocks that way.
# --------------------------------------------------------------------------


def to_channels_last(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H, W, C)."""
    if x.ndim != 4:
        raise DimensionError(f"expected 4-D input, got {x.shape}")
    out = x.data.transpose(0, 2, 3, 1)

    def backward(g):
        return (g.transpose(0, 3, 1, 2),)

    return make_result(out, (x,), backward, "to_channels_last")


def to_channels_first(x: Tensor) -> Tensor:
    """(B, H, W, C) -> (B, C, H, W)."""
    if x.ndim != 4:
        raise DimensionError(f"expected 4-D input, got {x.shape}")
    out = x.data.transpose(0, 3, 1, 2)

    def backward(g):
        return (g.transpose(0, 2, 3, 1),)

    return make_result(out, (x,), backward, "to_channels_first")


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, channels_last: bool = False) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (same-size output).

    ``w`` is always (F, C, 3, 3).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if not channels_last:
        return to_channels_first(conv2d(to_channels_last(x), w, bias, channels_last=True))
    B, H, W, C = x.shape
    F, Cw, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d supports 3x3 kernels only, got {kh}x{kw}")
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input has {C} channels, weight {w.shape}")

    xp = np.zeros((B, H + 2, W + 2, C), dtype=compute_dtype())
    xp[:, 1:-1, 1:-1, :] = x.data
    cols = np.empty((B, H, W, 3, 3, C), dtype=compute_dtype())
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i : i + H, j : j + W, :]
    cols = cols.reshape(B * H * W, 9 * C)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(F, 9 * C)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, H, W, F)

    def backward(g):
        gm = g.reshape(B * H * W, F)
        gw = (gm.T @ cols).reshape(F, 3, 3, C).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, H, W, 3, 3, C)
            gxp = np.zeros((B, H + 2, W + 2, C), dtype=compute_dtype())
            for i in range(3):
                for j in range(3):
                    gxp[:, i : i + H, j : j + W, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, 1:-1, 1:-1, :]
        if bias is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, backward, "conv2d")


def _pool_windows(arr: np.ndarray, channels_last: bool):
    """The four members of each 2x2 window, in row-major window order."""
    if channels_last:
        B, H, W, C = arr.shape
        v = arr.reshape(B, H // 2, 2, W // 2, 2, C)
        return v, [v[:, :, a, :, b, :] for a in (0, 1) for b in (0, 1)]
    B, C, H, W = arr.shape
    v = arr.reshape(B, C, H // 2, 2, W // 2, 2)
    return v, [v[:, :, :, a, :, b] for a in (0, 1) for b in (0, 1)]


def maxpool2x2(x: Tensor, channels_last: bool = False) -> Tensor:
    """2x2 max pooling, stride 2; ties resolve to the first (row-major) maximum."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2x2 expects 4-D input, got {x.shape}")
    H, W = (x.shape[1], x.shape[2]) if channels_last else (x.shape[2], x.shape[3])
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial size, got {H}x{W}")
    _, members = _pool_windows(x.data, channels_last)
    out = np.maximum(np.maximum(members[0], members[1]), np.maximum(members[2], members[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for m in members:
        hit = (m == out) & ~taken
        taken |= hit
        masks.append(hit)
    if _tape is not None:
        masks = list(_branch(np.stack(masks)))
        out = sum(m * hit for m, hit in zip(members, masks))

    def backward(g):
        gx = np.zeros(x.shape, dtype=compute_dtype())
        _, slots = _pool_windows(gx, channels_last)
        for slot, hit in zip(slots, masks):
            slot[...] = g * hit
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2x2")


def global_avg_pool(x: Tensor, channels_last: bool = False) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    axes = (1, 2) if channels_last else (2, 3)
    hw = x.shape[axes[0]] * x.shape[axes[1]]
    out = x.data.mean(axis=axes, dtype=np.float64)

    def backward(g):
        g = g / np.float32(hw)
        g = g[:, None, None, :] if channels_last else g[:, :, None, None]
        return (np.broadcast_to(g, x.shape),)

    return make_result(out, (x,), backward, "global_avg_pool")


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


@dataclass
class BatchNormStats:
    """Running statistics for one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=compute_dtype()), np.ones(channels, dtype=compute_dtype()))


def _channel_mean(arr: np.ndarray) -> np.ndarray:
    """Per-channel mean over all leading axes of a channels-last array (float64 result)."""
    flat = arr.reshape(-1, arr.shape[-1])
    return (np.ones(flat.shape[0], dtype=flat.dtype) @ flat).astype(np.float64) / flat.shape[0]


def _channel_mean_first(arr: np.ndarray) -> np.ndarray:
    return arr.mean(axis=(0, 2, 3), dtype=np.float64)


BN_MODES = ("train", "batch", "eval")


def batchnorm(
    x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, mode: str = "train", channels_last: bool = False
) -> Tensor:
    """Per-channel normalization of a (B, C), (B, C, H, W) or channels-last tensor.

    ``mode="train"`` normalizes with batch statistics and updates the running
    averages; ``"batch"`` uses batch statistics without touching the running
    averages; ``"eval"`` uses the running averages.
    """
    if mode not in BN_MODES:
        raise ArgumentError(f"unknown batchnorm mode {mode!r}")
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    last = channels_last or x.ndim == 2
    C = x.shape[-1] if last else x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm affine shape {gamma.shape} does not match {C} channels")
    if last:
        axes = tuple(range(x.ndim - 1))
        bshape = (C,)
    else:
        axes = (0, 2, 3)
        bshape = (1, C, 1, 1)
    eps = stats.eps

    if mode == "eval":
        inv = (1.0 / np.sqrt(stats.var.astype(np.float64) + eps)).astype(compute_dtype())
        xhat = (x.data - stats.mean.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
        scale = (gamma.data * inv).reshape(bshape)

        def backward(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_result(out, (x, gamma, beta), backward, "batchnorm")

    if x.shape[0] < 2:
        raise ArgumentError("batchnorm in training mode needs a batch of at least 2")
    n = x.data.size // C
    cmean = _channel_mean if last else _channel_mean_first
    # two-pass statistics: centre on the first-pass mean, then correct with
    # the (tiny) residual mean of the centred values
    mu = cmean(x.data)
    xc = x.data - mu.astype(compute_dtype()).reshape(bshape)
    resid = cmean(xc)
    var = np.maximum(cmean(xc * xc) - resid**2, 0.0)
    inv64 = 1.0 / np.sqrt(var + eps)
    inv = inv64.astype(compute_dtype())
    # fused scale/shift keeps the output to two roundings
    scale = (gamma.data * inv64).astype(compute_dtype())
    shift = (beta.data - resid * gamma.data * inv64).astype(compute_dtype())
    out = xc * scale.reshape(bshape) + shift.reshape(bshape)
    xc -= resid.astype(compute_dtype()).reshape(bshape)
    xc *= inv.reshape(bshape)
    xhat = xc
    if mode == "train":
        mom = stats.momentum
        stats.mean = (mom * stats.mean + (1 - mom) * (mu + resid)).astype(compute_dtype())
        stats.var = (mom * stats.var + (1 - mom) * var * n / (n - 1)).astype(compute_dtype())

    def backward(g):
        g_mean = cmean(g)
        gx_mean = cmean(g * xhat)
        scale = (gamma.data * inv).reshape(bshape)
        gx = scale * (g - g_mean.astype(compute_dtype()).reshape(bshape) - xhat * gx_mean.astype(compute_dtype()).reshape(bshape))
        return gx, (gx_mean * n).astype(compute_dtype()), (g_mean * n).astype(compute_dtype())

    return make_result(out, (x, gamma, beta), backward, "batchnorm")


# --------------------------------------------------------------------------
# probabilities and losses
# --------------------------------------------------------------------------


def _log_softmax64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax as a plain float64 array (no graph)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.exp(_log_softmax64(data))


def log_softmax(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"log_softmax expects (B, C>=2), got {x.shape}")
    lsm = _log_softmax64(x.data)
    p = np.exp(lsm)

    def backward(g):
        g64 = g.astype(np.float64)
        return (g64 - p * g64.sum(axis=1, keepdims=True),)

    return make_result(lsm, (x,), backward, "log_softmax")


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise LabelError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got {labels.dtype}")
    bad = (labels < 0) | (labels >= classes)
    if bad.any():
        raise LabelError(f"label {int(labels[bad][0])} out of range [0, {classes})")
    return labels.astype(np.int64)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    B, C = logits.shape
    labels = _check_labels(labels, B, C)
    lsm = _log_softmax64(logits.data)
    rows = np.arange(B)
    value = -lsm[rows, labels].mean()

    def backward(g):
        d = np.exp(lsm)
        d[rows, labels] -= 1.0
        return (d * (float(np.asarray(g).reshape(-1)[0]) / B),)

    return make_result(np.asarray(value), (logits,), backward, "cross_entropy")


def kl_divergence(student_logits: Tensor, teacher_logits) -> Tensor:
    """Batch-mean KL(p_teacher || p_student) over softmax distributions.

    The teacher side is treated as a constant; only the student receives a
    gradient.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=compute_dtype())
    if student_logits.shape != t.shape or t.ndim != 2:
        raise DimensionError(f"kl_divergence shape mismatch: student {student_logits.shape}, teacher {t.shape}")
    B = t.shape[0]
    log_ps = _log_softmax64(student_logits.data)
    log_pt = _log_softmax64(t)
    pt = np.exp(log_pt)
    terms = np.where(pt > 0, pt * (log_pt - log_ps), 0.0)
    value = terms.sum(axis=1).mean()

    def backward(g):
        return ((np.exp(log_ps) - pt) * (float(np.asarray(g).reshape(-1)[0]) / B),)

    return make_result(np.asarray(value), (student_logits,), backward, "kl_divergence")
