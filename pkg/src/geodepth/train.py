"""Joint optimisation of per-frame depth fields and per-pair pose refinements.

One training step evaluates the full objective on every frame and pair of the
dataset at once (full batch), differentiates it with hand-written adjoints and
applies one AdamW update. An epoch performs ``isd_iterations`` such steps, each
rebuilding the self-distillation teacher from the current parameters.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import photometric as ph
from .colmap_io import SequencePoses
from .depth_field import NUM_SCALES, DepthPyramid, predict_full_res, predict_full_res_backward
from .geometry import Intrinsics, relative_pose
from .isd import DistillState, build_state, isd_loss, isd_loss_backward, isd_round_loop
from .metrics import COLUMNS, Metrics, aggregate, compute_metrics
from .optim import AdamW
from .pose_opt import Pair, PairAlignment, enumerate_pairs, refined_poses, refined_poses_backward

log = logging.getLogger(__name__)

POSE_BLOCKS = ("log_scale", "delta_t", "res_r", "res_t")
# blocks whose natural value is zero; only these receive weight decay
RESIDUAL_BLOCKS = frozenset({"delta_t", "res_r", "res_t"})


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-2  # depth logits
    pose_lr: float = 1e-3  # delta_t, residual rotation and translation
    scale_lr: float = 1e-2  # log_scale
    weight_decay: float = 0.0  # decoupled, applied to RESIDUAL_BLOCKS only
    betas: Tuple[float, float] = (0.9, 0.999)
    isd_iterations: int = 2
    use_coarse_poses: bool = True
    optim_t: bool = True
    optim_R: bool = True
    isd: bool = True
    automask: bool = True
    min_depth: float = 0.1
    max_depth: float = 10.0
    # std of Gaussian noise added to the initial logits (0 keeps the all-zero start)
    init_noise: float = 0.0
    # arithmetic precision of images and warps; parameters stay float64
    precision: str = "float32"
    seed: int = 0

    def validate(self):
        if min(self.lr, self.pose_lr, self.scale_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.isd and self.isd_iterations < 1:
            raise ValueError("isd_iterations must be >= 1 when self-distillation is enabled")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, not {self.precision!r}")
        return self

    @property
    def steps_per_epoch(self) -> int:
        return self.isd_iterations if self.isd else 1


ABLATIONS: Dict[str, Dict[str, bool]] = {
    # flags per named configuration, Table-1 style
    "baseline": dict(use_coarse_poses=False, optim_t=False, optim_R=False, isd=False),
    "cp": dict(use_coarse_poses=True, optim_t=False, optim_R=False, isd=False),
    "cp_t": dict(use_coarse_poses=True, optim_t=True, optim_R=False, isd=False),
    "cp_t_r": dict(use_coarse_poses=True, optim_t=True, optim_R=True, isd=False),
    "full": dict(use_coarse_poses=True, optim_t=True, optim_R=True, isd=True),
}
# row letters used for the ablation table
ABLATION_ROWS = {"cp": "j", "cp_t": "k", "cp_t_r": "l", "full": "o"}
DEFAULT_GRID = ("cp", "cp_t", "cp_t_r", "full")


def config_for(name: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return dataclasses.replace(base or TrainConfig(), **ABLATIONS[name])


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d).validate()


# ----------------------------------------------------------------- problem


@dataclass
class Problem:
    """Everything the objective needs that does not change during training."""

    names: List[str]
    images: np.ndarray  # (N, 3, H, W)
    k: Intrinsics
    pairs: List[Pair]
    target: np.ndarray  # (P,) frame index of each pair's target
    source: np.ndarray  # (P,)
    R_cp: np.ndarray  # (P, 3, 3)
    t_cp: np.ndarray  # (P, 3)
    slots: np.ndarray  # (N, S) pair indices per target, -1 padded
    raw_min: np.ndarray  # (N, H, W) best unwarped error per target
    gt_depth: Optional[np.ndarray] = None
    skipped: int = 0

    @property
    def has_pairs(self) -> np.ndarray:
        return (self.slots >= 0).any(axis=1)


def build_problem(names: Sequence[str], images: np.ndarray, k: Intrinsics, sequences: Dict[str, List[str]],
                  poses: Dict[str, SequencePoses], gt_depth: Optional[np.ndarray] = None,
                  dtype=np.float64) -> Problem:
    """Enumerate pairs per sequence and precompute the static parts of the loss."""
    names = list(names)
    index = {n: i for i, n in enumerate(names)}
    pairs: List[Pair] = []
    skipped = 0
    for seq, frames in sequences.items():
        p, s = enumerate_pairs(frames, poses[seq])
        pairs.extend(p)
        skipped += s
    if not pairs:
        raise ValueError("no usable frame pairs (every pair touches an unregistered frame or sequences are too short)")
    images = np.asarray(images, dtype=dtype)
    target = np.array([index[p.target] for p in pairs])
    source = np.array([index[p.source] for p in pairs])
    N = len(names)
    per_target: List[List[int]] = [[] for _ in range(N)]
    for i, t in enumerate(target):
        per_target[t].append(i)
    S = max(len(x) for x in per_target)
    slots = np.full((N, S), -1)
    for n, lst in enumerate(per_target):
        slots[n, : len(lst)] = lst
    raw = ph.recon_error(images[source], images[target])
    raw_min = _gather_min(raw, slots)[0]
    return Problem(
        names, images, k, pairs, target, source,
        np.stack([p.coarse.R for p in pairs]), np.stack([p.coarse.t for p in pairs]),
        slots, raw_min, gt_depth, skipped,
    )


def problem_from_dataset(ds, cfg: TrainConfig) -> Problem:
    """Problem for a :class:`~geodepth.synth.SceneDataset` honouring ``use_coarse_poses``."""
    names = [f.name for f in ds.frames]
    poses = ds.coarse_poses() if cfg.use_coarse_poses else ds.gt_poses()
    gt = np.stack([f.depth for f in ds.frames]) if all(f.depth is not None for f in ds.frames) else None
    return build_problem(
        names, np.stack([f.image for f in ds.frames]), ds.intrinsics, ds.sequences(), poses,
        gt, dtype=np.dtype(cfg.precision),
    )


def _gather_min(err: np.ndarray, slots: np.ndarray):
    """Per-target minimum over that target's pairs; ``inf`` pads missing slots.

    Returns ``(min_map, winning_pair)``; the first slot wins ties.
    """
    padded = np.concatenate([err, np.full((1,) + err.shape[1:], np.inf)])
    stack = padded[slots]  # (N, S, H, W)
    choice = np.argmin(stack, axis=1)
    best = np.take_along_axis(stack, choice[:, None], axis=1)[:, 0]
    return best, np.take_along_axis(slots[:, :, None, None], choice[:, None], axis=1)[:, 0]


# --------------------------------------------------------------- parameters


def init_params(problem: Problem, cfg: TrainConfig, init_depth: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """All-zero logits and identity alignments.

    ``init_depth`` (N, H, W) instead starts every scale at that depth; coarser
    scales take the block mean of its disparity.
    """
    N = len(problem.names)
    H, W = problem.images.shape[-2:]
    P = len(problem.pairs)
    pyr = DepthPyramid.zeros(H, W, lead=(N,), min_depth=cfg.min_depth, max_depth=cfg.max_depth)
    if init_depth is not None:
        disp = 1.0 / np.asarray(init_depth, float)
        for s in range(NUM_SCALES):
            f = 2**s
            block = disp.reshape(N, H // f, f, W // f, f).mean(axis=(2, 4))
            pyr.logits[s] = pyr.logits_for_disparity(block)
    params = {f"logits{s}": g for s, g in enumerate(pyr.logits)}
    if cfg.init_noise > 0:
        rng = np.random.default_rng(cfg.seed)
        for s in range(NUM_SCALES):
            params[f"logits{s}"] = params[f"logits{s}"] + rng.normal(0.0, cfg.init_noise, params[f"logits{s}"].shape)
    params.update(log_scale=np.zeros(P), delta_t=np.zeros((P, 3)), res_r=np.zeros((P, 3)), res_t=np.zeros((P, 3)))
    return params


def pyramid(params, cfg: TrainConfig, shape) -> DepthPyramid:
    lo, hi = 1.0 / cfg.max_depth, 1.0 / cfg.min_depth
    return DepthPyramid([params[f"logits{s}"] for s in range(NUM_SCALES)], lo, hi, tuple(shape))


def frozen_blocks(cfg: TrainConfig) -> set:
    frozen = set()
    if not cfg.optim_t:
        frozen |= {"log_scale", "delta_t"}
    if not cfg.optim_R:
        frozen |= {"res_r", "res_t"}
    return frozen


# ---------------------------------------------------------------- objective


@dataclass
class Frozen:
    """Quantities the gradient treats as constants: masks per (pass, scale) and the ISD teacher."""

    masks: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    teacher: Optional[np.ndarray] = None


def objective(problem: Problem, params: Dict[str, np.ndarray], cfg: TrainConfig,
              frozen: Optional[Frozen] = None, need_grad: bool = True):
    """Total loss, its parts and gradients for every parameter block.

    Returns ``(LossBreakdown, grads, frozen)``. Pass a previously returned
    ``frozen`` to evaluate with fixed masks and teacher, which is how the
    finite-difference checks probe the analytic gradient.
    """
    imgs = problem.images
    N, C, H, W = imgs.shape
    k = problem.k
    pyr = pyramid(params, cfg, (H, W))
    disps = [predict_full_res(pyr, s) for s in range(NUM_SCALES)]
    R_t, t_t, R_r, t_r, pcache = refined_poses(
        problem.R_cp, problem.t_cp, params["log_scale"], params["delta_t"], params["res_r"], params["res_t"]
    )
    passes = [("t", R_t, t_t, 1.0)]
    if cfg.optim_R:
        passes.append(("r", R_r, t_r, ph.REC_R_WEIGHT))
    src_imgs = imgs[problem.source]
    tgt_imgs = imgs[problem.target]
    active = problem.has_pairs
    out_frozen = Frozen()
    rec = {"t": [], "r": []}
    sel_maps = []
    pass_cache = []
    for s, d in enumerate(disps):
        depth = (1.0 / d).astype(imgs.dtype, copy=False)
        for name, R, t, _ in passes:
            w = ph.warp_batch(src_imgs, depth[problem.target], k, R, t)
            err, parts = ph.recon_error(w.image, tgt_imgs, return_parts=True)
            err_inf = np.where(w.valid, err, np.inf)
            best, win = _gather_min(err_inf, problem.slots)
            valid = np.isfinite(best) & active[:, None, None]
            if frozen is not None and (name, s) in frozen.masks:
                mask = frozen.masks[(name, s)]
            elif cfg.automask:
                mask = valid & ph.automask_from_errors(best, problem.raw_min)
            else:
                mask = valid
            out_frozen.masks[(name, s)] = mask
            n = int(mask.sum())
            rec[name].append(float(best[mask].sum() / n) if n else 0.0)
            pass_cache.append((s, name, w, parts, win, mask, n))
            if name == ("r" if cfg.optim_R else "t"):
                sel_maps.append(np.where(valid, best, np.inf))
    smooth = [ph.smoothness_loss(d, imgs) for d in disps]

    teacher = None
    isd_val = 0.0
    if cfg.isd:
        if frozen is not None and frozen.teacher is not None:
            teacher = frozen.teacher
        else:
            teacher = build_state(sel_maps, disps).disp_best
        out_frozen.teacher = teacher
        state = _teacher_state(teacher)
        isd_val = isd_loss(state, disps)

    ns = NUM_SCALES
    rec_t = float(np.mean(rec["t"]))
    rec_r = float(np.mean(rec["r"])) if cfg.optim_R else 0.0
    sm = float(np.mean(smooth))
    total = ph.total_loss(rec_t, rec_r, sm, isd_val)
    breakdown = ph.LossBreakdown(rec_t, rec_r, sm, isd_val, total, sel_maps[0])
    breakdown.per_scale = dict(rec_t=rec["t"], rec_r=rec["r"], smooth=smooth)
    if not need_grad:
        return breakdown, None, out_frozen

    # ----- backward
    g_disp = [np.zeros((N, H, W)) for _ in range(ns)]
    P = len(problem.pairs)
    g_tt = np.zeros((P, 3))
    g_Rr = np.zeros((P, 3, 3))
    g_tr = np.zeros((P, 3))
    pair_ids = np.arange(P)[:, None, None]
    for s, name, w, parts, win, mask, n in pass_cache:
        if n == 0:
            continue
        weight = (1.0 if name == "t" else ph.REC_R_WEIGHT) / ns
        # per-pair upstream gradient: the pair that won the min at a masked pixel of its target
        g_best = np.where(mask, weight / n, 0.0)  # (N, H, W)
        g_err = np.where(win[problem.target] == pair_ids, g_best[problem.target], 0.0)
        g_img = ph.recon_error_backward(w.image, tgt_imgs, g_err, parts=parts)
        g_depth_p, g_R, g_t = ph.warp_batch_backward(w, g_img)
        g_depth = np.zeros((N, H, W))
        for p in range(P):
            g_depth[problem.target[p]] += g_depth_p[p]
        g_disp[s] -= g_depth * (1.0 / disps[s]) ** 2
        if name == "t":
            g_tt += g_t
        else:
            g_Rr += g_R
            g_tr += g_t
    for s in range(ns):
        g_disp[s] += ph.smoothness_backward(disps[s], imgs, ph.SMOOTH_WEIGHT / ns)
    if cfg.isd:
        for s, g in enumerate(isd_loss_backward(_teacher_state(teacher), disps, ph.ISD_WEIGHT)):
            g_disp[s] += g
    grads = {f"logits{s}": predict_full_res_backward(pyr, s, g_disp[s]) for s in range(ns)}
    g_ls, g_dt, g_rr, g_rt = refined_poses_backward(
        pcache, g_tt, g_Rr if cfg.optim_R else None, g_tr if cfg.optim_R else None
    )
    grads.update(log_scale=g_ls, delta_t=g_dt, res_r=g_rr, res_t=g_rt)
    return breakdown, grads, out_frozen


def _teacher_state(teacher):
    return DistillState(teacher, np.zeros_like(teacher))


# ------------------------------------------------------------------ training


@dataclass
class TrainReport:
    history: List[ph.LossBreakdown]
    metrics: List[dict]
    params: Dict[str, np.ndarray]
    pairs: List[Pair]
    skipped: int
    config: TrainConfig
    names: List[str] = field(default_factory=list)
    depth: Optional[np.ndarray] = None  # final scale-0 depth per frame
    per_image: List[Metrics] = field(default_factory=list)

    @property
    def final_metrics(self) -> dict:
        return self.metrics[-1] if self.metrics else {}

    def scale_products(self, factors: Dict[str, float]) -> Dict[str, List[float]]:
        """``s^NN * k`` per pair, grouped by sequence, for injected per-frame factors ``k``."""
        out: Dict[str, List[float]] = {}
        for p in self.pairs:
            k = factors.get(p.target, 1.0)
            out.setdefault(p.sequence, []).append(p.alignment.scale * k)
        return out

    def log_csv(self) -> str:
        """One row per epoch: the loss parts of its last step and the metrics after it."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        parts = ("rec_t", "rec_r", "smooth", "isd", "total")
        w.writerow(["epoch", *parts, *COLUMNS])
        steps = self.config.steps_per_epoch
        for e, m in enumerate(self.metrics[1:], start=1):
            lb = self.history[e * steps - 1].as_dict()
            w.writerow([e, *(f"{lb[k]:.8g}" for k in parts), *(f"{m.get(c, float('nan')):.8g}" for c in COLUMNS)])
        return buf.getvalue()


def evaluate(problem: Problem, params, cfg: TrainConfig) -> Tuple[dict, List[Metrics], np.ndarray]:
    H, W = problem.images.shape[-2:]
    depth = 1.0 / predict_full_res(pyramid(params, cfg, (H, W)), 0)
    if problem.gt_depth is None:
        return {}, [], depth
    per = [compute_metrics(depth[i], problem.gt_depth[i]) for i in range(len(depth))]
    return aggregate(per), per, depth


def train(problem: Problem, cfg: TrainConfig, callback=None, init_depth: Optional[np.ndarray] = None) -> TrainReport:
    """Optimise depth and pose parameters on ``problem``.

    ``metrics[0]`` is evaluated at initialisation and ``metrics[e]`` after epoch
    ``e``. Each epoch runs ``isd_iterations`` full-batch steps (one when
    self-distillation is off).
    """
    cfg.validate()
    params = init_params(problem, cfg, init_depth)
    opt = AdamW(lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay,
                block_lr={"log_scale": cfg.scale_lr, "delta_t": cfg.pose_lr, "res_r": cfg.pose_lr,
                          "res_t": cfg.pose_lr},
                decay_blocks=RESIDUAL_BLOCKS)
    frozen = frozen_blocks(cfg)
    history: List[ph.LossBreakdown] = []
    m0, _, _ = evaluate(problem, params, cfg)
    metrics = [m0]

    def step(_i):
        lb, grads, _ = objective(problem, params, cfg)
        opt.step(params, grads, frozen=frozen)
        lb.min_error = None
        history.append(lb)
        return lb.total

    for epoch in range(1, cfg.epochs + 1):
        isd_round_loop(cfg.steps_per_epoch, step)
        m, _, _ = evaluate(problem, params, cfg)
        metrics.append(m)
        if callback is not None:
            callback(epoch, history[-1], m)
        log.debug("epoch %d loss %.6f abs_rel %s", epoch, history[-1].total, m.get("abs_rel"))

    for i, p in enumerate(problem.pairs):
        p.alignment = PairAlignment(float(params["log_scale"][i]), params["delta_t"][i].copy(),
                                    params["res_r"][i].copy(), params["res_t"][i].copy())
    final, per, depth = evaluate(problem, params, cfg)
    return TrainReport(history, metrics, params, problem.pairs, problem.skipped, cfg, problem.names, depth, per)
