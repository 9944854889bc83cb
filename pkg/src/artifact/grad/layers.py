"""Functional layers built on the differentiable primitives."""

from __future__ import annotations

import numpy as np

from . import array as A
from .array import Array

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv(x: Array, weight: Array, bias: Array | None, stride, pad) -> Array:
    out = A.conv3d(x, weight, stride, pad)
    if bias is not None:
        out = out + A.reshape(bias, (1, -1, 1, 1, 1))
    return out


def linear(x: Array, weight: Array, bias: Array | None) -> Array:
    # weight is (out, in)
    out = A.matmul(x, A.transpose(weight, None))
    if bias is not None:
        out = out + A.reshape(bias, (1, -1))
    return out


def batch_norm(
    x: Array,
    gamma: Array,
    beta: Array,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
) -> Array:
    """Per-channel normalisation over every axis except axis 1.

    In training mode batch statistics are used and, when ``update_stats``,
    the running buffers are updated in place with momentum ``BN_MOMENTUM``.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mu = A.mean(x, axes, keepdims=True)
        centred = x - mu
        var = A.mean(centred * centred, axes, keepdims=True)
        if update_stats:
            running_mean *= BN_MOMENTUM
            running_mean += (1 - BN_MOMENTUM) * mu.data.reshape(-1)
            running_var *= BN_MOMENTUM
            running_var += (1 - BN_MOMENTUM) * var.data.reshape(-1)
        normed = centred / A.sqrt(var + BN_EPS)
    else:
        mu = Array(running_mean.reshape(bshape).astype(x.dtype))
        std = Array(np.sqrt(running_var + BN_EPS).reshape(bshape).astype(x.dtype))
        normed = (x - mu) / std
    return normed * A.reshape(gamma, bshape) + A.reshape(beta, bshape)


def global_avg_pool(x: Array) -> Array:
    return A.mean(x, tuple(range(2, x.ndim)))


def resize_nearest(x: Array, extent) -> Array:
    """Nearest-neighbour resize of the spatial axes of a (N, C, X, Y, Z) array."""
    out = x
    for axis, (n_in, n_out) in enumerate(zip(x.shape[2:], extent)):
        if n_in == n_out:
            continue
        idx = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
        out = A.take(out, idx, axis + 2)
    return out


def upsample(x: Array, factor) -> Array:
    extent = tuple(n * f for n, f in zip(x.shape[2:], factor))
    return resize_nearest(x, extent)


def log_softmax(logits: Array) -> Array:
    shift = Array(logits.data.max(axis=1, keepdims=True))
    z = logits - shift
    lse = A.log(A.sum_(A.exp(z), 1, keepdims=True))
    return z - lse


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Array, labels) -> Array:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -A.mean(A.sum_(log_softmax(logits) * Array(onehot), 1))
