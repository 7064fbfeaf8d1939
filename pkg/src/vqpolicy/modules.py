"""Parameter containers shared by the tokenizer MLPs and the policy trunk."""

from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor, layernorm
from .rng import SeededRng


def kaiming_uniform(rng: SeededRng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: SeededRng | None = None, init: str = "kaiming", std: float = 0.02):
        if init == "zeros" or rng is None:
            w = np.zeros((fan_in, fan_out), dtype=np.float32)
        elif init == "kaiming":
            w = kaiming_uniform(rng, fan_in, fan_out)
        elif init == "normal":
            w = rng.trunc_normal((fan_in, fan_out), std=std)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)

    def named_params(self, prefix: str):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


class Mlp:
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: SeededRng):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng.split(f"linear{i}")) for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    def named_params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.{i}"))
        return out


def params_of(named) -> list[Tensor]:
    return [t for _, t in named]
