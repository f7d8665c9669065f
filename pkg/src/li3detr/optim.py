"""AdamW with a linear-warmup cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import Params


@dataclass
class OptimConfig:
    lr: float = 2e-4
    min_lr: float = 2e-6
    weight_decay: float = 1e-2
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 35.0  # global L2 norm; 0 disables


def cosine_lr(step: int, total: int, cfg: OptimConfig) -> float:
    """Learning rate for 0-based ``step`` out of ``total`` steps.

    Linear warmup to ``lr`` over the first ``warmup_steps`` steps, then a
    cosine decay that reaches ``min_lr`` exactly at step ``total - 1``.
    """
    warm = min(cfg.warmup_steps, max(total - 1, 0))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = total - 1 - warm
    if span <= 0:
        return cfg.min_lr
    t = min((step - warm) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    def __init__(self, params: Params, cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        c = self.cfg
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = 1.0
        if c.grad_clip > 0 and norm > c.grad_clip:
            scale = c.grad_clip / (norm + 1e-12)
        self.step_count += 1
        b1c = 1.0 - c.beta1 ** self.step_count
        b2c = 1.0 - c.beta2 ** self.step_count
        for k, t in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g * scale
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            t.data *= 1.0 - lr * c.weight_decay
            t.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64)
        self.step_count = step_count
