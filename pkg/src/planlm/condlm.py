"""Decoder-only byte LM with adapters that inject action-conditioned vectors."""

from __future__ import annotations

import enum

import numpy as np

from .corpus import VOCAB_SIZE
from .nn import Block, Embedding, LayerNorm, Linear, Module, _param
from .tensor import (
    Tensor, cross_entropy, get_default_dtype, hard_select, matmul, softmax, straight_through,
)


class ConditioningError(ValueError):
    pass


class ConditioningMode(str, enum.Enum):
    HARD = "hard"
    STRAIGHT_THROUGH = "st"
    SOFT = "soft"
    UNIFORM = "uniform"
    ORACLE = "oracle"

    @classmethod
    def parse(cls, value) -> "ConditioningMode":
        if isinstance(value, cls):
            return value
        aliases = {"straight_through": "st", "straight-through": "st", "oracle_onehot": "oracle"}
        try:
            return cls(aliases.get(str(value).lower(), str(value).lower()))
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown conditioning mode {value!r} (expected one of {names})") from None

    @property
    def uses_planner(self) -> bool:
        return self in (ConditioningMode.HARD, ConditioningMode.STRAIGHT_THROUGH,
                        ConditioningMode.SOFT)

    @property
    def differentiable(self) -> bool:
        return self in (ConditioningMode.STRAIGHT_THROUGH, ConditioningMode.SOFT)

    @property
    def eval_mode(self) -> "ConditioningMode":
        # evaluation always conditions on the planner's prediction
        return ConditioningMode.HARD if self is ConditioningMode.ORACLE else self


def onehot(ids: np.ndarray, K: int, dtype=None) -> np.ndarray:
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (K,), dtype=dtype or get_default_dtype())
    valid = ids >= 0
    if (ids >= K).any():
        raise ConditioningError(f"action id out of range for K={K}")
    np.put_along_axis(out, np.where(valid, ids, 0)[..., None], 1.0, axis=-1)
    out[~valid] = 0.0
    return out


def conditioning_weights(mode, K: int, logits: Tensor | None = None,
                         oracle: np.ndarray | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Mixing weights over actions per sentence, shape (..., K).

    Soft uses softmax(logits); Hard and StraightThrough the argmax one-hot (the
    latter passing softmax gradients back); Uniform 1/K; Oracle the one-hot of
    the oracle action id.
    """
    mode = ConditioningMode.parse(mode)
    if mode.uses_planner:
        if logits is None:
            raise ConditioningError(f"mode {mode.value} needs planner logits")
        if logits.shape[-1] != K:
            raise ConditioningError(f"logits have {logits.shape[-1]} actions, expected {K}")
        if mode is ConditioningMode.SOFT:
            return softmax(logits)
        if mode is ConditioningMode.HARD:
            return hard_select(logits)
        return straight_through(logits)
    if mode is ConditioningMode.UNIFORM:
        if logits is None and oracle is None:
            raise ConditioningError("uniform mode needs logits or oracle ids to infer the shape")
        shape = (logits.shape[:-1] if logits is not None else np.shape(oracle)) + (K,)
        return Tensor(np.full(shape, 1.0 / K, dtype=get_default_dtype()))
    if oracle is None:
        raise ConditioningError("oracle mode needs oracle action ids")
    oracle = np.asarray(oracle)
    if mask is None:
        mask = oracle >= 0
    if (oracle[mask] < 0).any() or (oracle[mask] >= K).any():
        raise ConditioningError(f"invalid oracle action id for K={K}")
    return Tensor(onehot(np.where(mask, oracle, -1), K))


class AdapterLayer(Module):
    """Action embedding table plus a zero-initialized projection into the LM width."""

    def __init__(self, centroids: np.ndarray, d_model: int, rng: np.random.Generator):
        self.embedding = _param(centroids)
        self.projection = Linear(centroids.shape[1], d_model, rng, bias=False, zero=True)

    @property
    def K(self) -> int:
        return self.embedding.shape[0]

    def conditioning_vector(self, weights: Tensor) -> Tensor:
        """Weighted average of action embeddings: (..., K) -> (..., d_e)."""
        return matmul(weights, self.embedding)


def conditioning_vector(weights: Tensor, embedding: Tensor) -> Tensor:
    return matmul(weights, embedding)


class ConditionedLM(Module):
    """Byte-level causal transformer; adapters add projected action vectors
    to the attention-value aggregate of selected layers."""

    def __init__(self, centroids: np.ndarray, d_model: int = 128, n_layers: int = 4,
                 n_heads: int = 4, context: int = 128, adapter_layers=None,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if adapter_layers is None:
            adapter_layers = list(range(max(0, n_layers - 2), n_layers))
        adapter_layers = sorted(int(i) for i in adapter_layers)
        if any(not 0 <= i < n_layers for i in adapter_layers):
            raise ValueError(f"adapter layers {adapter_layers} outside 0..{n_layers - 1}")
        self.d_model = d_model
        self.context = context
        self.adapter_layers = adapter_layers
        self.token_embed = Embedding(VOCAB_SIZE, d_model, rng)
        self.position = Embedding(context, d_model, rng)
        self.blocks = [Block(d_model, n_heads, rng, n_layers) for _ in range(n_layers)]
        self.ln_f = LayerNorm(d_model)
        self.head = Linear(d_model, VOCAB_SIZE, rng)
        self.adapters = [AdapterLayer(np.asarray(centroids), d_model, rng) for _ in adapter_layers]

    @property
    def K(self) -> int:
        return self.adapters[0].K if self.adapters else 0

    @property
    def config(self) -> dict:
        return {"d_model": self.d_model, "n_layers": len(self.blocks),
                "n_heads": self.blocks[0].attn.n_heads, "context": self.context,
                "adapter_layers": list(self.adapter_layers)}

    def base_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("adapters.")]

    def adapter_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("adapters.")]

    def __call__(self, tokens: np.ndarray, slot_index: np.ndarray | None = None,
                 weights: Tensor | None = None, slot_mask: np.ndarray | None = None,
                 capture: list | None = None) -> Tensor:
        """Next-token logits (B, T, V).

        ``weights`` (B, S, K) holds action mixing weights per sentence slot and
        ``slot_index`` (B, T) maps each position to the slot of the token it
        predicts. Without weights the adapters are bypassed (base LM).
        ``capture``, when a list, receives one dict per adapter layer with the
        pre-merge (B, T, d_e) and post-merge (B, T, d_model) representations.
        """
        tokens = np.asarray(tokens)
        b, t = tokens.shape
        if t > self.context:
            raise ValueError(f"sequence length {t} exceeds context {self.context}")
        spread = None
        if weights is not None:
            spread = self._spread(slot_index, weights, slot_mask, (b, t))
        x = self.token_embed(tokens) + self.position(np.arange(t))
        adapter_of = {layer: a for layer, a in zip(self.adapter_layers, self.adapters)}
        for i, block in enumerate(self.blocks):
            adapter = adapter_of.get(i) if spread is not None else None
            if adapter is None:
                x = block(x)
                continue
            r = adapter.conditioning_vector(weights)
            inject = matmul(spread, adapter.projection(r))
            if capture is not None:
                cap = {"layer": i}
                x = block(x, inject=inject, capture=cap)
                cap["pre_merge"] = matmul(spread, r)
                capture.append(cap)
            else:
                x = block(x, inject=inject)
        return self.head(self.ln_f(x))

    def _spread(self, slot_index, weights: Tensor, slot_mask, shape) -> Tensor:
        if not self.adapters:
            raise ConditioningError("model has no adapter layers")
        if slot_index is None:
            raise ConditioningError("conditioning weights given without a position->slot map")
        slot_index = np.asarray(slot_index)
        b, t = shape
        if slot_index.shape != (b, t):
            raise ConditioningError(f"slot_index shape {slot_index.shape} != {(b, t)}")
        if weights.ndim != 3 or weights.shape[0] != b or weights.shape[2] != self.K:
            raise ConditioningError(f"weights shape {weights.shape} incompatible with batch {b}, K={self.K}")
        s = weights.shape[1]
        if slot_index.min() < 0 or slot_index.max() >= s:
            raise ConditioningError("a position has no conditioning vector")
        if slot_mask is not None:
            covered = np.take_along_axis(np.asarray(slot_mask), slot_index, axis=1)
            if not covered.all():
                raise ConditioningError("a position maps to a padded sentence slot")
        return Tensor(onehot(slot_index, s, dtype=weights.dtype))


def next_token_targets(tokens: np.ndarray) -> np.ndarray:
    """Targets for every position: the following token, -1 at the window's last position."""
    tokens = np.asarray(tokens)
    targets = np.full(tokens.shape, -1, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    return targets


def ntp_loss(model: ConditionedLM, tokens: np.ndarray, slot_index=None, weights: Tensor | None = None,
             slot_mask=None) -> Tensor:
    """Mean next-token cross-entropy over all predicted positions of the windows."""
    logits = model(tokens, slot_index, weights, slot_mask)
    return cross_entropy(logits, next_token_targets(tokens))
