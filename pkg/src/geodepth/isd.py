"""Iterative self-distillation: per-pixel best disparity across scales as a teacher."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np


@dataclass
class DistillState:
    disp_best: Optional[np.ndarray] = None
    error_min: Optional[np.ndarray] = None
    # index of the scale each pixel's teacher came from
    source_scale: Optional[np.ndarray] = None
    folded: int = 0

    @property
    def empty(self) -> bool:
        return self.disp_best is None


def fold_scale(state: DistillState, error: np.ndarray, disp: np.ndarray) -> DistillState:
    """Fold one scale's error map and disparity into the running selection.

    Strict ``<``: the earliest-folded scale wins ties. The state is not mutated.
    """
    error = np.asarray(error, float)
    disp = np.asarray(disp, float)
    if error.shape != disp.shape:
        raise ValueError(f"shape mismatch: error {error.shape} vs disparity {disp.shape}")
    if state.empty:
        return DistillState(disp.copy(), error.copy(), np.zeros(disp.shape, dtype=np.int8), 1)
    better = error < state.error_min
    return DistillState(
        np.where(better, disp, state.disp_best),
        np.minimum(error, state.error_min),
        np.where(better, np.int8(state.folded), state.source_scale),
        state.folded + 1,
    )


def build_state(errors: Sequence[np.ndarray], disps: Sequence[np.ndarray]) -> DistillState:
    state = DistillState()
    for e, d in zip(errors, disps):
        state = fold_scale(state, e, d)
    return state


def isd_loss(state: DistillState, disps: Sequence[np.ndarray]) -> float:
    """Sum over scales of the mean ``log(|d_best - d_s| + 1)``."""
    best = state.disp_best
    return float(sum(np.log1p(np.abs(best - d)).mean() for d in disps))


def isd_loss_backward(state: DistillState, disps: Sequence[np.ndarray], g: float = 1.0) -> List[np.ndarray]:
    """Gradients w.r.t. each scale's disparity; the teacher is a constant."""
    best = state.disp_best
    out = []
    for d in disps:
        diff = d - best
        out.append(g * np.sign(diff) / (np.abs(diff) + 1.0) / diff.size)
    return out


def isd_round_loop(n: int, step: Callable[[int], float]) -> List[float]:
    """Run ``n`` inner iterations for one training sample.

    ``step(i)`` must re-render, rebuild the distillation state, evaluate the
    total loss, apply one update and return the loss.
    """
    if n < 1:
        raise ValueError("number of self-distillation iterations must be >= 1")
    return [step(i) for i in range(n)]
