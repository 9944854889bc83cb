from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .array import Array
from .network import ParameterSet


class NonFiniteGradient(FloatingPointError):
    def __init__(self, names):
        super().__init__(f"non-finite gradient for {', '.join(names)}; step rejected")
        self.names = list(names)


def _grad_data(g) -> np.ndarray:
    return g.data if isinstance(g, Array) else np.asarray(g)


def _check(params: ParameterSet, grads: Mapping[str, Array]) -> None:
    bad = []
    for name in params.names():
        g = _grad_data(grads[name])
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            bad.append(name)
    if bad:
        raise NonFiniteGradient(bad)


def sgd_step(params: ParameterSet, grads: Mapping[str, Array], lr: float) -> ParameterSet:
    """In-place ``p <- p - lr * g``; returns ``params``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check(params, grads)
    for name in params.names():
        p = params[name]
        p.data = (p.data - lr * _grad_data(grads[name])).astype(p.dtype, copy=False)
    return params


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParameterSet,
    grads: Mapping[str, Array],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[ParameterSet, AdamState]:
    """Bias-corrected adaptive-moment update, in place on ``params``."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    _check(params, grads)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in params.names():
        p = params[name]
        g = _grad_data(grads[name]).astype(np.float64)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state
