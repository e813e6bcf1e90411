"""AdamW over named numpy parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}; step aborted")
        self.block = block


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    # optional per-block learning rates
    block_lr: Dict[str, float] = field(default_factory=dict)
    # blocks subject to weight decay; None decays every block
    decay_blocks: Optional[frozenset] = None
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or any(x <= 0 for x in self.block_lr.values()):
            raise ValueError("learning rates must be positive")

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             frozen: Optional[set] = None) -> None:
        """In-place update of ``params``; blocks in ``frozen`` are left untouched."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, p in params.items():
            if frozen and name in frozen:
                continue
            g = grads.get(name)
            if g is None:
                continue
            lr = self.block_lr.get(name, self.lr)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and (self.decay_blocks is None or name in self.decay_blocks):
                p *= 1 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
