"""Per-pair pose refinement parameters.

Each ordered (target, source) pair owns a translation rescale/shift applied to
the coarse relative pose and a residual rigid motion composed on top of it.
The vectorised helpers at the bottom are what the trainer differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .colmap_io import FrameUnregistered, SequencePoses, coarse_relative
from .geometry import Pose, axis_angle_to_rotation, compose, so3_exp, so3_exp_jacobian


@dataclass
class PairAlignment:
    log_scale: float = 0.0
    delta_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    residual_axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    residual_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))


def apply_alignment(coarse: Pose, a: PairAlignment) -> Pose:
    """Rotation kept; translation becomes ``scale * t + delta_t``."""
    return Pose(coarse.rotation, a.scale * coarse.translation + np.asarray(a.delta_t, float))


def residual_pose(a: PairAlignment) -> Pose:
    return Pose(axis_angle_to_rotation(a.residual_axis_angle), a.residual_t)


def apply_residual(aligned: Pose, a: PairAlignment) -> Pose:
    return compose(residual_pose(a), aligned)


@dataclass
class Pair:
    sequence: str
    target: str
    source: str
    offset: int  # +1 forward neighbour, -1 backward
    coarse: Pose
    alignment: PairAlignment = field(default_factory=PairAlignment)


def enumerate_pairs(frames: Sequence[str], poses: SequencePoses) -> Tuple[List[Pair], int]:
    """Adjacent ordered pairs of a time-ordered sequence; pairs touching an
    unregistered frame are dropped and counted."""
    pairs, skipped = [], 0
    for i, tgt in enumerate(frames):
        for off in (1, -1):
            j = i + off
            if not 0 <= j < len(frames):
                continue
            try:
                rel = coarse_relative(poses, tgt, frames[j])
            except FrameUnregistered:
                skipped += 1
                continue
            pairs.append(Pair(poses.sequence_id, tgt, frames[j], off, rel))
    return pairs, skipped


def format_alignment_dump(pairs: Sequence[Pair]) -> str:
    lines = ["# sequence target source offset scale delta_t_norm residual_angle_deg residual_t_norm"]
    for p in pairs:
        a = p.alignment
        lines.append(
            f"{p.sequence} {p.target} {p.source} {p.offset:+d} {a.scale:.6f} "
            f"{np.linalg.norm(a.delta_t):.6g} {np.degrees(np.linalg.norm(a.residual_axis_angle)):.6g} "
            f"{np.linalg.norm(a.residual_t):.6g}"
        )
    return "\n".join(lines) + "\n"


# ------------------------------------------------------- vectorised, with grads


def refined_poses(R_cp, t_cp, log_s, delta_t, res_r, res_t):
    """Poses for both reconstruction passes, for P pairs at once.

    Returns ``(R_t, t_t, R_r, t_r, cache)``: the translation-refined pose and the
    pose after composing the residual motion.
    """
    s = np.exp(log_s)
    t_star = s[:, None] * t_cp + delta_t
    R_res = np.stack([so3_exp(r) for r in res_r])
    R_r = R_res @ R_cp
    t_r = np.einsum("pij,pj->pi", R_res, t_star) + res_t
    cache = dict(R_cp=R_cp, t_cp=t_cp, s=s, t_star=t_star, R_res=R_res, res_r=res_r)
    return R_cp, t_star, R_r, t_r, cache


def refined_poses_backward(cache, g_tt, g_Rr=None, g_tr=None):
    """Gradients ``(g_log_s, g_delta_t, g_res_r, g_res_t)``.

    The translation-pass rotation is the coarse one and carries no parameters.
    """
    P = g_tt.shape[0]
    g_tstar = g_tt.copy()
    g_res_r = np.zeros((P, 3))
    g_res_t = np.zeros((P, 3))
    if g_Rr is not None:
        R_res = cache["R_res"]
        g_Rres = g_Rr @ np.transpose(cache["R_cp"], (0, 2, 1)) + np.einsum("pi,pj->pij", g_tr, cache["t_star"])
        g_tstar += np.einsum("pji,pj->pi", R_res, g_tr)
        g_res_t = g_tr.copy()
        for p in range(P):
            jac = so3_exp_jacobian(cache["res_r"][p])
            g_res_r[p] = np.einsum("kij,ij->k", jac, g_Rres[p])
    g_delta_t = g_tstar
    g_log_s = np.einsum("pi,pi->p", g_tstar, cache["s"][:, None] * cache["t_cp"])
    return g_log_s, g_delta_t, g_res_r, g_res_t
