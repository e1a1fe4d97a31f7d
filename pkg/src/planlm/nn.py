"""Parameter containers and transformer building blocks shared by the planner and LM."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor, add, causal_attention, embedding_lookup, gelu, get_default_dtype, layer_norm, matmul,
)


def _param(arr) -> Tensor:
    return Tensor(np.array(arr, dtype=get_default_dtype(), copy=True), requires_grad=True)


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float = 0.02, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
        self.weight = _param(w)
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y if self.bias is None else add(y, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = _param(rng.normal(0.0, std, (n, d)))

    def __call__(self, idx) -> Tensor:
        return embedding_lookup(self.weight, idx)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class CausalSelfAttention(Module):
    """Multi-head causal self-attention with an optional additive injection.

    ``inject`` (B, T, d) is added to the head-merged attention-value aggregate,
    before the output projection. When ``capture`` is a dict, that post-merge
    aggregate is stored under ``"post_merge"``.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, n_layers: int = 1):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng, std=0.02 / math.sqrt(2 * n_layers))

    def __call__(self, x: Tensor, inject: Tensor | None = None, capture: dict | None = None):
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(y):
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        agg = causal_attention(q, k, v).transpose(0, 2, 1, 3).reshape(b, t, d)
        if inject is not None:
            agg = agg + inject
        if capture is not None:
            capture["post_merge"] = agg
        return self.out(agg)


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, n_layers: int = 1):
        self.ln1 = LayerNorm(d)
        self.attn = CausalSelfAttention(d, n_heads, rng, n_layers)
        self.ln2 = LayerNorm(d)
        self.fc = Linear(d, 4 * d, rng)
        self.proj = Linear(4 * d, d, rng, std=0.02 / math.sqrt(2 * n_layers))

    def __call__(self, x: Tensor, inject: Tensor | None = None, capture: dict | None = None):
        x = x + self.attn(self.ln1(x), inject=inject, capture=capture)
        return x + self.proj(gelu(self.fc(self.ln2(x))))
