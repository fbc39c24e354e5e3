"""Transformer building blocks on top of the autodiff engine.

Parameter creation is always driven by an explicit numpy Generator so
that model initialization is a pure function of the seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class with attribute-walk parameter discovery.

    Tensor attributes count as parameters; Module attributes and plain
    lists of Modules are recursed into. Discovery order follows attribute
    assignment order, which keeps checkpoint layout and optimizer state
    deterministic.
    """

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        """All parameter tensors, frozen ones included (the optimizer filters)."""
        out: list[tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{key}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def parameter(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    return Tensor((rng.normal(0.0, std, shape)).astype(dtype), requires_grad=True)


def zeros_parameter(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Affine map with Xavier-scaled normal init and zero bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        std = math.sqrt(2.0 / (d_in + d_out))
        self.weight = parameter(rng, (d_in, d_out), std=std, dtype=dtype)
        self.bias = zeros_parameter((d_out,), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = zeros_parameter((dim,), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head self-attention over (batch, tokens, dim) sequences."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % num_heads != 0:
            raise ValueError(f"attention width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        batch, tokens, dim = x.shape
        heads, per_head = self.num_heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            return t.reshape((batch, tokens, heads, per_head)).transpose((0, 2, 1, 3))

        q = split(self.query(x))
        k = split(self.key(x))
        v = split(self.value(x))
        scores = (q @ k.transpose()) * self.scale
        attn = ad.softmax(scores, axis=-1)
        merged = (attn @ v).transpose((0, 2, 1, 3)).reshape((batch, tokens, dim))
        return self.out(merged)


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, rng: np.random.Generator, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
