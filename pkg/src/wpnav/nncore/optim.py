from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np
from numba import njit

from ..errors import DivergedTraining, NonFiniteGradient
from .autograd import Parameter


@dataclass
class AdamState:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """In-place update of flat arrays; returns False if any parameter became non-finite."""
    step = lr / c1
    inv_c2 = 1.0 / math.sqrt(c2)
    probe = 0.0
    for i in range(p.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= step * m[i] / (math.sqrt(v[i]) * inv_c2 + eps)
        probe += p[i] * 0.0     # stays 0 unless some p[i] is inf or nan
        g[i] = 0.0
    return probe == 0.0


def adam_apply(params: list[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam step over ``params``; gradients are zeroed afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(f"non-finite gradient in {p.name or 'parameter'}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        key = p.name or id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        if not (p.data.flags.c_contiguous and p.grad.flags.c_contiguous):
            raise ValueError(f"{p.name or 'parameter'} must be C-contiguous for in-place updates")
        ok = _adam_kernel(p.data.reshape(-1), p.grad.reshape(-1), m.reshape(-1), state.v[key].reshape(-1),
                          state.lr, b1, b2, c1, c2, state.eps)
        if not ok:
            raise DivergedTraining(f"parameter {p.name or 'parameter'} became non-finite")


def global_grad_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        g = p.grad.reshape(-1)
        total += float(g @ g)
    return math.sqrt(total)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm
