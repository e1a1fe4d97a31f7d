"""Adam optimizer over named parameter groups."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction.

    Each group keeps its own step counter so a group that is skipped (e.g. a
    frozen planner) leaves its parameters and moments untouched.
    """

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]], lr: float | dict = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = {g: list(params) for g, params in groups.items()}
        self.lr = {g: (lr[g] if isinstance(lr, dict) else lr) for g in self.groups}
        self.betas = betas
        self.eps = eps
        self.m = {g: [np.zeros_like(p.data) for _, p in ps] for g, ps in self.groups.items()}
        self.v = {g: [np.zeros_like(p.data) for _, p in ps] for g, ps in self.groups.items()}
        self.t = {g: 0 for g in self.groups}

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for _, p in params:
                p.grad = None

    def step(self, groups=None) -> None:
        b1, b2 = self.betas
        for g in (self.groups if groups is None else groups):
            self.t[g] += 1
            t = self.t[g]
            lr = self.lr[g]
            c1 = 1.0 - b1 ** t
            c2 = 1.0 - b2 ** t
            for (_, p), m, v in zip(self.groups[g], self.m[g], self.v[g]):
                if p.grad is None:
                    continue
                grad = p.grad.astype(p.dtype, copy=False)
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for g, params in self.groups.items():
            for (name, _), m, v in zip(params, self.m[g], self.v[g]):
                out[f"adam.{g}.m.{name}"] = m
                out[f"adam.{g}.v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict, steps: dict) -> None:
        for g, params in self.groups.items():
            for i, (name, _) in enumerate(params):
                self.m[g][i] = np.array(arrays[f"adam.{g}.m.{name}"], dtype=self.m[g][i].dtype)
                self.v[g][i] = np.array(arrays[f"adam.{g}.v.{name}"], dtype=self.v[g][i].dtype)
            self.t[g] = int(steps[g])
