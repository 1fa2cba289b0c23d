from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .autograd import Parameter, Tensor, _sigmoid, as_tensor

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal (n_in, n_out) matrix scaled by ``gain``."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


def dense_forward(x, weight, bias, activation: str = "identity") -> Tensor:
    """activation(x @ W + b) as one graph node; x is (in,) or (batch, in), W is (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    z = x.data @ weight.data + bias.data
    if activation == "identity":
        out = z
    elif activation == "tanh":
        out = np.tanh(z)
    elif activation == "relu":
        out = z * (z > 0)
    elif activation == "sigmoid":
        out = _sigmoid(z)
    else:
        raise ValueError(f"unknown activation {activation!r}")

    def back(g):
        if activation == "tanh":
            g = g * (1.0 - out * out)
        elif activation == "relu":
            g = g * (z > 0)
        elif activation == "sigmoid":
            g = g * out * (1.0 - out)
        gx = g @ weight.data.T if x.requires_grad else None
        if x.ndim == 1:
            return gx, np.outer(x.data, g), g
        return gx, x.data.T @ g, g.sum(axis=0)

    return Tensor._make(out, (x, weight, bias), back)


class Module:
    """Parameter container; subclasses register Parameters and child Modules as attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield val.name, val
            elif isinstance(val, Module):
                yield from val.named_parameters()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeMismatch(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            val = np.asarray(state[name], dtype=np.float64)
            if val.shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {val.shape} != model shape {p.shape}")
            p.data[...] = val

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str, rng: np.random.Generator,
                 name: str, gain: float | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if gain is None:
            gain = np.sqrt(2.0) if activation == "relu" else 1.0
        self.activation = activation
        self.weight = Parameter(orthogonal(rng, n_in, n_out, gain), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")

    def __call__(self, x) -> Tensor:
        return dense_forward(x, self.weight, self.bias, self.activation)


class MLP(Module):
    def __init__(self, sizes, activations, rng: np.random.Generator, name: str, gains=None):
        gains = gains or [None] * (len(sizes) - 1)
        self.layers = [Dense(sizes[i], sizes[i + 1], activations[i], rng, f"{name}.{i}", gains[i])
                       for i in range(len(sizes) - 1)]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
