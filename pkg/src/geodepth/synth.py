"""Procedural box-room scenes with exact depth, rendered by analytic ray casting.

Each sequence is a closed room (an axis-aligned box seen from inside) with a
few axis-aligned boxes on the floor. Each object carries a solid (3-D) smooth
value-noise albedo ("high" texture) or a near-constant albedo ("low" texture)
under uniform illumination, so appearance is view-independent and continuous
across the room's corners. Images are anti-aliased by supersampling. Stored depth is the
camera-frame z coordinate of the hit point, i.e. the quantity back-projected by
``depth * K^-1 [u, v, 1]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from PIL import Image

from .colmap_io import SequencePoses, load_sequence, write_sequence
from .depthio import read_depth_png16, write_depth_png16
from .geometry import Intrinsics, Pose, Rotation, axis_angle_to_rotation, so3_exp

@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    focal: float = 56.0
    frames: int = 8
    sequences: int = 1
    # camera centre moves ~step per frame; rotations are in degrees per frame
    step: float = 0.02
    rotation_deg: float = 1.5
    forward: float = 0.3  # relative amount of motion along the viewing axis
    room: Tuple[float, float, float, float, float, float] = (-0.2, 0.2, -0.14, 0.12, -0.3, 0.45)
    boxes: int = 2
    texture: str = "high"  # high | low | mixed (walls low, floor and boxes high)
    texture_cell: float = 0.07
    corruption: Optional["CorruptionSpec"] = None

    def validate(self):
        if self.frames < 1 or self.sequences < 1:
            raise ValueError("need at least one frame and one sequence")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if self.texture not in ("high", "low", "mixed"):
            raise ValueError(f"unknown texture mode {self.texture!r}")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


@dataclass
class CorruptionSpec:
    """Coarse-pose corruption: per-sequence scale, optional drift, per-frame noise."""

    scale_range: Tuple[float, float] = (0.5, 2.0)
    rotation_sigma: float = np.radians(0.3)
    # absolute translation noise; when None, ``translation_sigma_rel`` of the median baseline
    translation_sigma: Optional[float] = None
    translation_sigma_rel: float = 0.01
    # std of the per-frame log-scale random walk
    drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale jitter range must be positive and ordered")


@dataclass
class Frame:
    name: str
    sequence: str
    image: np.ndarray  # (3, H, W)
    depth: Optional[np.ndarray]  # (H, W); None for external data without ground truth
    pose: Optional[Pose]  # None for a frame the pose file does not register


@dataclass
class SceneDataset:
    frames: List[Frame]
    intrinsics: Intrinsics
    texture_tags: Dict[str, Dict[str, str]] = field(default_factory=dict)
    coarse: Optional[Dict[str, SequencePoses]] = None
    scale_factors: Dict[str, float] = field(default_factory=dict)

    def sequences(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for f in self.frames:
            out.setdefault(f.sequence, []).append(f.name)
        return out

    def frame(self, name: str) -> Frame:
        for f in self.frames:
            if f.name == name:
                return f
        raise KeyError(name)

    def gt_poses(self) -> Dict[str, SequencePoses]:
        out = {}
        for seq, names in self.sequences().items():
            poses = {n: self.frame(n).pose for n in names}
            out[seq] = SequencePoses(seq, {n: p for n, p in poses.items() if p is not None}, self.intrinsics)
        return out

    def coarse_poses(self) -> Dict[str, SequencePoses]:
        return self.coarse if self.coarse is not None else self.gt_poses()


# ------------------------------------------------------------------- textures


class ValueNoise:
    """Smooth 3-D lattice noise (quintic fade), two octaves, three channels.

    Evaluated at world positions, so albedo is continuous across surface seams.
    """

    def __init__(self, rng: np.random.Generator, cell: float, amplitude: float, base: np.ndarray, size: int = 32):
        self.table = rng.uniform(-1, 1, size=(2, 3, size, size, size))
        self.offset = rng.uniform(0, size, size=3)
        self.cell = cell
        self.amp = amplitude
        self.base = np.asarray(base, float)
        self.size = size

    def _octave(self, table, p):
        n = self.size
        i = np.floor(p).astype(int)
        f = p - i
        f = f**3 * (f * (f * 6 - 15) + 10)
        out = 0.0
        for corner in np.ndindex(2, 2, 2):
            c = np.asarray(corner)
            idx = (i + c) % n
            w = np.prod(np.where(c == 1, f, 1 - f), axis=1)
            out = out + w * table[:, idx[:, 0], idx[:, 1], idx[:, 2]]
        return out

    def __call__(self, pts):
        p = pts / self.cell + self.offset
        val = 0.85 * self._octave(self.table[0], p) + 0.15 * self._octave(self.table[1], 2 * p + 17.3)
        return np.clip(self.base[:, None] + self.amp * val, 0.0, 1.0)


# ------------------------------------------------------------------- geometry


@dataclass
class _Layout:
    room_lo: np.ndarray
    room_hi: np.ndarray
    boxes: List[Tuple[np.ndarray, np.ndarray]]
    # object 0 is the room; the floor may carry its own texture
    textures: Dict[str, ValueNoise]
    tags: Dict[str, str]


def _make_layout(cfg: SceneConfig, rng: np.random.Generator) -> _Layout:
    lo = np.array(cfg.room[0::2], float)
    hi = np.array(cfg.room[1::2], float)
    boxes = []
    for _ in range(cfg.boxes):
        size = rng.uniform([0.05, 0.03, 0.04], [0.09, 0.06, 0.07])
        cx = rng.uniform(lo[0] + 0.05, hi[0] - 0.05 - size[0])
        cz = rng.uniform(0.28, hi[2] - 0.06 - size[2])
        bmin = np.array([cx, hi[1] - size[1], cz])
        boxes.append((bmin, bmin + size))

    def texture(tag):
        base = rng.uniform(0.35, 0.65, size=3)
        amp = 0.45 if tag == "high" else 0.008
        return ValueNoise(rng, cfg.texture_cell, amp, base)

    wall_tag = "low" if cfg.texture in ("low", "mixed") else "high"
    other_tag = "low" if cfg.texture == "low" else "high"
    walls = texture(wall_tag)
    textures = {"walls": walls, "floor": walls if wall_tag == other_tag else texture(other_tag)}
    tags = {"walls": wall_tag, "floor": other_tag}
    for i in range(len(boxes)):
        textures[f"box{i + 1}"] = texture(other_tag)
        tags[f"box{i + 1}"] = other_tag
    return _Layout(lo, hi, boxes, textures, tags)


def _cast(layout: _Layout, origin: np.ndarray, d: np.ndarray):
    """Nearest hit along world rays ``origin + lam * d``; returns (lam, surface id)."""
    n = len(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_exit = np.where(d > 0, (layout.room_hi - origin) * inv, (layout.room_lo - origin) * inv)
    t_exit = np.where(d == 0, np.inf, t_exit)
    axis = np.argmin(t_exit, axis=1)
    lam = t_exit[np.arange(n), axis]
    floor = (axis == 1) & (d[:, 1] > 0)
    surf = np.where(floor, 1, 0)
    for bi, (bmin, bmax) in enumerate(layout.boxes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (bmin - origin) * inv
            t2 = (bmax - origin) * inv
        tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        t_near = tmin.max(axis=1)
        hit = (t_near <= tmax.min(axis=1)) & (t_near > 1e-9) & (t_near < lam)
        lam = np.where(hit, t_near, lam)
        surf = np.where(hit, bi + 2, surf)
    return lam, surf


def _shade_points(layout: _Layout, pts: np.ndarray, surf: np.ndarray) -> np.ndarray:
    names = ["walls", "floor"] + [f"box{i + 1}" for i in range(len(layout.boxes))]
    color = np.zeros((3, len(pts)))
    for sid, name in enumerate(names):
        sel = surf == sid
        if sel.any():
            color[:, sel] = layout.textures[name](pts[sel])
    return color


def _render(layout: _Layout, k: Intrinsics, pose: Pose, supersample: int = 4):
    """Image averaged over ``supersample**2`` sub-pixel rays; depth at pixel centres."""
    R = pose.R
    origin = pose.center()
    H, W = k.height, k.width
    # directions are scaled so the ray parameter equals camera-frame z
    d = k.pixel_rays().reshape(-1, 3) @ R
    lam, _ = _cast(layout, origin, d)
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    color = np.zeros((3, H * W))
    for oy in offs:
        for ox in offs:
            rays = k.pixel_rays()
            rays[..., 0] += ox / k.fx
            rays[..., 1] += oy / k.fy
            ds = rays.reshape(-1, 3) @ R
            ls, surf = _cast(layout, origin, ds)
            color += _shade_points(layout, origin + ls[:, None] * ds, surf)
    color /= supersample**2
    return color.reshape(3, H, W), lam.reshape(H, W)


def _trajectory(cfg: SceneConfig, rng: np.random.Generator) -> List[Pose]:
    n = cfg.frames
    phase = rng.uniform(0, 2 * np.pi, size=6)
    direction = rng.normal(size=3)
    direction[1:] *= (0.4, cfg.forward)
    direction /= np.linalg.norm(direction)
    wiggle = 0.3 * cfg.step * np.array([1.0, 1.0, cfg.forward / 0.3])
    poses = []
    rot_amp = np.radians(cfg.rotation_deg)
    for i in range(n):
        centre = direction * cfg.step * (i - (n - 1) / 2) + wiggle * np.sin(0.9 * i + phase[:3])
        # yaw/pitch/roll wobble; per-frame change is on the order of rotation_deg
        aa = rot_amp * np.array([0.8 * np.sin(0.7 * i + phase[3]), 1.6 * np.sin(0.5 * i + phase[4]),
                                 0.5 * np.sin(0.6 * i + phase[5])])
        cam_to_world = so3_exp(aa)
        R = cam_to_world.T
        poses.append(Pose(Rotation.from_matrix(R), -R @ centre))
    return poses


def make_scene(config: Optional[SceneConfig] = None, seed: int = 0) -> SceneDataset:
    cfg = config or SceneConfig()
    cfg.validate()
    k = cfg.intrinsics()
    rng = np.random.default_rng(seed)
    frames: List[Frame] = []
    tags = {}
    for si in range(cfg.sequences):
        seq = f"seq{si:02d}"
        layout = _make_layout(cfg, rng)
        tags[seq] = layout.tags
        for fi, pose in enumerate(_trajectory(cfg, rng)):
            img, depth = _render(layout, k, pose)
            frames.append(Frame(f"{seq}_{fi:04d}.png", seq, img, depth, pose))
    ds = SceneDataset(frames, k, tags)
    if cfg.corruption is not None:
        ds.coarse, ds.scale_factors = corrupt_dataset(ds, cfg.corruption)
    return ds


# ----------------------------------------------------------------- corruption


def corrupt_poses(gt: Sequence[Pose], spec: CorruptionSpec, rng: Optional[np.random.Generator] = None):
    """Scale all translations by one random factor, then add per-frame noise.

    Returns ``(poses, per_frame_scale)``.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    lo, hi = spec.scale_range
    k = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else float(lo)
    n = len(gt)
    if spec.translation_sigma is not None:
        t_sigma = spec.translation_sigma
    else:
        centres = np.array([p.center() for p in gt])
        base = np.linalg.norm(np.diff(centres, axis=0), axis=1) if n > 1 else np.zeros(1)
        t_sigma = spec.translation_sigma_rel * k * float(np.median(base))
    drift = np.cumsum(rng.normal(0.0, spec.drift, size=n)) if spec.drift > 0 else np.zeros(n)
    drift -= drift.mean()
    out, scales = [], []
    for p, dr in zip(gt, drift):
        ki = k * float(np.exp(dr))
        rot = p.rotation
        if spec.rotation_sigma > 0:
            rot = axis_angle_to_rotation(rng.normal(0.0, spec.rotation_sigma, size=3)) @ rot
        t = ki * p.translation
        if t_sigma > 0:
            t = t + rng.normal(0.0, t_sigma, size=3)
        out.append(Pose(rot, t))
        scales.append(ki)
    return out, scales


def corrupt_dataset(ds: SceneDataset, spec: CorruptionSpec):
    rng = np.random.default_rng(spec.seed)
    coarse, factors = {}, {}
    for seq, names in ds.sequences().items():
        poses, scales = corrupt_poses([ds.frame(n).pose for n in names], spec, rng)
        coarse[seq] = SequencePoses(seq, dict(zip(names, poses)), ds.intrinsics)
        factors.update(dict(zip(names, scales)))
    return coarse, factors


# ------------------------------------------------------------------ config io


def config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    corr = d.pop("corruption", None)
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
    if "room" in d:
        d["room"] = tuple(d["room"])
    cfg = SceneConfig(**d)
    if corr is not None:
        corr = dict(corr)
        if "rotation_sigma_deg" in corr:
            corr["rotation_sigma"] = np.radians(corr.pop("rotation_sigma_deg"))
        if "scale_range" in corr:
            corr["scale_range"] = tuple(corr["scale_range"])
        cfg.corruption = CorruptionSpec(**corr)
    cfg.validate()
    return cfg


def config_to_dict(cfg: SceneConfig) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(SceneConfig) if f.name != "corruption"}
    d["room"] = list(d["room"])
    if cfg.corruption is not None:
        c = dataclasses.asdict(cfg.corruption)
        c["scale_range"] = list(c["scale_range"])
        c["rotation_sigma_deg"] = float(np.degrees(c.pop("rotation_sigma")))
        d["corruption"] = c
    return d


def load_config(path: Union[str, Path]) -> SceneConfig:
    """Read a YAML scene config (same keys as :class:`SceneConfig`)."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: scene config must be a mapping")
    return config_from_dict(data.get("scene", data))


# ------------------------------------------------------------------ export


def export_dataset(ds: SceneDataset, out: Union[str, Path], config: Optional[SceneConfig] = None) -> Path:
    """Write ``ds`` as a directory tree.

    Layout per sequence: ``images/*.png`` (8-bit RGB), ``depth/*.png``
    (16-bit, millimetres), ``sparse/`` (COLMAP text, the poses a training
    run should treat as coarse) and, when the poses were corrupted,
    ``sparse_gt/`` with the true poses. ``scene.yaml`` at the root keeps the
    config, texture tags and injected per-frame scale factors.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    coarse = ds.coarse_poses()
    gt = ds.gt_poses()
    for seq, names in ds.sequences().items():
        root = out / seq
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "depth").mkdir(parents=True, exist_ok=True)
        for n in names:
            f = ds.frame(n)
            rgb = np.round(np.clip(f.image, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
            Image.fromarray(rgb, "RGB").save(root / "images" / n)
            write_depth_png16(root / "depth" / n, f.depth)
        write_sequence(root / "sparse", ds.intrinsics, coarse[seq].poses)
        if ds.coarse is not None:
            write_sequence(root / "sparse_gt", ds.intrinsics, gt[seq].poses)
    meta = {
        "scene": config_to_dict(config) if config is not None else None,
        "texture_tags": ds.texture_tags,
        "scale_factors": {k: float(v) for k, v in ds.scale_factors.items()},
    }
    (out / "scene.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
    return out


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_dataset(root: Union[str, Path]) -> SceneDataset:
    """Inverse of :func:`export_dataset` (up to 8-bit / millimetre quantisation)."""
    root = Path(root)
    meta_path = root / "scene.yaml"
    meta = yaml.safe_load(meta_path.read_text()) if meta_path.exists() else {}
    meta = meta or {}
    seq_dirs = sorted(p for p in root.iterdir() if (p / "sparse").is_dir())
    if not seq_dirs:
        raise FileNotFoundError(f"{root}: no sequence directories with a sparse/ model")
    frames: List[Frame] = []
    coarse: Dict[str, SequencePoses] = {}
    k = None
    has_gt = False
    for d in seq_dirs:
        seq = d.name
        cp = load_sequence(d / "sparse", seq)
        truth = cp
        if (d / "sparse_gt").is_dir():
            truth = load_sequence(d / "sparse_gt", seq)
            has_gt = True
        coarse[seq] = cp
        k = cp.intrinsics
        on_disk = {p.name for p in (d / "images").glob("*") if p.suffix.lower() in IMAGE_SUFFIXES}
        # frames absent from the pose file stay in the sequence as unregistered frames
        for n in sorted(on_disk | set(truth.poses)):
            img_path = d / "images" / n
            if not img_path.exists():
                raise FileNotFoundError(f"{img_path}: image listed in images.txt is missing")
            img = np.asarray(Image.open(img_path).convert("RGB"), float) / 255.0
            depth_path = d / "depth" / n
            depth = read_depth_png16(depth_path) if depth_path.exists() else None
            frames.append(Frame(n, seq, img.transpose(2, 0, 1), depth, truth.poses.get(n)))
    ds = SceneDataset(frames, k, meta.get("texture_tags") or {})
    ds.scale_factors = dict(meta.get("scale_factors") or {})
    if has_gt:
        ds.coarse = coarse
    return ds
