"""Directly optimised depth representation: four disparity logit grids.

Scale ``s`` holds a grid of size ``(H / 2**s, W / 2**s)``. Each grid is squashed
into ``(min_disp, max_disp)`` with a sigmoid and bilinearly upsampled to full
resolution (half-pixel centres, edge clamped).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Tuple

import numpy as np

NUM_SCALES = 4


def depth_range_to_disp(min_depth: float = 0.1, max_depth: float = 10.0) -> Tuple[float, float]:
    return 1.0 / max_depth, 1.0 / min_depth


@lru_cache(maxsize=None)
def upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D linear interpolation matrix (n_out, n_in) with half-pixel alignment."""
    m = np.zeros((n_out, n_in))
    f = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * f - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w = src - i0
        m[i, i0] += 1.0 - w
        m[i, i1] += w
    m.setflags(write=False)
    return m


def upsample(grid: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling over the last two axes."""
    h, w = grid.shape[-2:]
    if (h, w) == tuple(shape):
        return grid.copy()
    uh = upsample_matrix(shape[0], h)
    uw = upsample_matrix(shape[1], w)
    return uh @ grid @ uw.T


def upsample_adjoint(g: np.ndarray, in_shape: Tuple[int, int]) -> np.ndarray:
    H, W = g.shape[-2:]
    if (H, W) == tuple(in_shape):
        return g.copy()
    uh = upsample_matrix(H, in_shape[0])
    uw = upsample_matrix(W, in_shape[1])
    return uh.T @ g @ uw


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DepthPyramid:
    """Disparity logits for one image (or a stack: leading axes are allowed)."""

    logits: List[np.ndarray]
    min_disp: float = 0.1
    max_disp: float = 10.0
    shape: Tuple[int, int] = field(default=None)

    def __post_init__(self):
        if len(self.logits) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} logit grids, got {len(self.logits)}")
        if not 0 < self.min_disp < self.max_disp:
            raise ValueError("need 0 < min_disp < max_disp")
        if self.shape is None:
            self.shape = tuple(self.logits[0].shape[-2:])

    @classmethod
    def zeros(cls, height: int, width: int, lead: Tuple[int, ...] = (), min_depth=0.1, max_depth=10.0):
        if height % 2 ** (NUM_SCALES - 1) or width % 2 ** (NUM_SCALES - 1):
            raise ValueError(f"resolution must be divisible by {2 ** (NUM_SCALES - 1)}")
        lo, hi = depth_range_to_disp(min_depth, max_depth)
        grids = [np.zeros(lead + (height >> s, width >> s)) for s in range(NUM_SCALES)]
        return cls(grids, lo, hi, (height, width))

    def copy(self) -> DepthPyramid:
        return DepthPyramid([g.copy() for g in self.logits], self.min_disp, self.max_disp, self.shape)

    def disparity_at_scale(self, s: int) -> np.ndarray:
        return self.min_disp + (self.max_disp - self.min_disp) * _sigmoid(self.logits[s])

    def logits_for_disparity(self, disp: np.ndarray) -> np.ndarray:
        """Inverse of the sigmoid squashing (no upsampling)."""
        p = (np.asarray(disp) - self.min_disp) / (self.max_disp - self.min_disp)
        p = np.clip(p, 1e-12, 1 - 1e-12)
        return np.log(p) - np.log1p(-p)


def predict_full_res(pyr: DepthPyramid, s: int) -> np.ndarray:
    if not 0 <= s < NUM_SCALES:
        raise ValueError(f"scale index must be in 0..{NUM_SCALES - 1}")
    return upsample(pyr.disparity_at_scale(s), pyr.shape)


def predict_full_res_backward(pyr: DepthPyramid, s: int, g_disp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the scale-``s`` logits given a full-resolution disparity gradient."""
    sig = _sigmoid(pyr.logits[s])
    g = upsample_adjoint(g_disp, pyr.logits[s].shape[-2:])
    return g * (pyr.max_disp - pyr.min_disp) * sig * (1.0 - sig)


def disparity_to_depth(disp: np.ndarray) -> np.ndarray:
    return 1.0 / np.asarray(disp)
