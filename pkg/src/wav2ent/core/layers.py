"""Parameter containers and the pre-norm transformer encoder block."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeMismatch
from . import functional as F
from .tensor import Tensor

INIT_STD = 0.02


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeMismatch(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {tuple(arr.shape)}")
            p.data = np.array(arr, dtype=p.dtype)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.w = normal_param(rng, (d_in, d_out))
        self.b = zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ones_param((d,))
        self.beta = zeros_param((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, rng, d: int, n_heads: int):
        if d % n_heads:
            raise ShapeMismatch(f"d_model {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.o = Linear(rng, d, d)
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, T, d = x.shape
        x = F.reshape(x, tuple(lead) + (T, self.n_heads, d // self.n_heads))
        return F.swapaxes(x, -2, -3)

    def __call__(self, x: Tensor) -> Tensor:
        *lead, T, d = x.shape
        dh = d // self.n_heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = F.matmul(q, F.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        weights = F.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = F.swapaxes(F.matmul(weights, v), -2, -3)
        return self.o(F.reshape(ctx, tuple(lead) + (T, d)))


class TransformerBlock(Module):
    """x + MHA(LN(x)), then + FFN(LN(.)) with a 4x GELU hidden layer."""

    def __init__(self, rng, d: int, n_heads: int):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.ln2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, 4 * d)
        self.ff2 = Linear(rng, 4 * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.ln1.gamma.shape[0]:
            raise ShapeMismatch(f"block width {self.ln1.gamma.shape[0]} got input {x.shape}")
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table.astype(np.float32)


def transformer_block(x: Tensor, params: TransformerBlock, n_heads: int | None = None) -> Tensor:
    if n_heads is not None and n_heads != params.attn.n_heads:
        raise ShapeMismatch(f"block built for {params.attn.n_heads} heads, asked for {n_heads}")
    return params(x)
