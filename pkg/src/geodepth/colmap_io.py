"""Reader/writer for COLMAP text reconstructions (``cameras.txt`` / ``images.txt``).

Only camera intrinsics and per-image extrinsics are consumed; keypoint lines
are skipped without parsing.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO, Union

import numpy as np

from .geometry import Intrinsics, Pose, Rotation, relative_pose

log = logging.getLogger(__name__)

QUAT_TOL = 1e-3


class ColmapFormatError(ValueError):
    pass


class FrameUnregistered(LookupError):
    """A frame has no pose in the reconstruction."""

    def __init__(self, name: str):
        super().__init__(f"frame {name!r} is not registered in the reconstruction")
        self.name = name


@dataclass
class SequencePoses:
    sequence_id: str
    poses: Dict[str, Pose]
    intrinsics: Optional[Intrinsics] = None
    warnings: List[str] = field(default_factory=list)

    def __contains__(self, name: str) -> bool:
        return name in self.poses

    def __len__(self) -> int:
        return len(self.poses)

    def pose(self, name: str) -> Pose:
        try:
            return self.poses[name]
        except KeyError:
            raise FrameUnregistered(name) from None


def _lines(src: Union[str, TextIO, Iterable[str]]) -> Iterable[str]:
    if isinstance(src, str):
        src = io.StringIO(src)
    return src


def parse_cameras(src) -> Intrinsics:
    cams = []
    for lineno, raw in enumerate(_lines(src), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) < 4:
            raise ColmapFormatError(f"cameras.txt line {lineno}: expected at least 4 fields, got {len(tok)}")
        model = tok[1]
        try:
            width, height = int(tok[2]), int(tok[3])
            params = [float(x) for x in tok[4:]]
        except ValueError as exc:
            raise ColmapFormatError(f"cameras.txt line {lineno}: {exc}") from None
        if model == "PINHOLE":
            if len(params) != 4:
                raise ColmapFormatError(f"cameras.txt line {lineno}: PINHOLE needs 4 parameters")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ColmapFormatError(f"cameras.txt line {lineno}: SIMPLE_PINHOLE needs 3 parameters")
            fx, cx, cy = params
            fy = fx
        else:
            raise ColmapFormatError(
                f"cameras.txt line {lineno}: unsupported camera model {model!r} "
                "(only PINHOLE and SIMPLE_PINHOLE)"
            )
        cams.append(Intrinsics(fx, fy, cx, cy, width, height))
    if not cams:
        raise ColmapFormatError("cameras.txt contains no camera")
    if len(cams) > 1:
        raise ColmapFormatError(f"expected a single camera per sequence, found {len(cams)}")
    return cams[0]


def parse_images(src, intrinsics: Optional[Intrinsics] = None, sequence_id: str = "") -> SequencePoses:
    poses: Dict[str, Pose] = {}
    warnings: List[str] = []
    expect_points = False
    for lineno, raw in enumerate(_lines(src), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        tok = line.split()
        # keypoint lines hold (x, y, point3D_id) triples; a pose header has 10 fields
        if expect_points and len(tok) % 3 == 0:
            expect_points = False
            continue
        if not tok:
            continue
        if len(tok) != 10:
            raise ColmapFormatError(f"images.txt line {lineno}: expected 10 fields, got {len(tok)}")
        try:
            q = np.array([float(x) for x in tok[1:5]])
            t = np.array([float(x) for x in tok[5:8]])
            int(tok[0]), int(tok[8])
        except ValueError as exc:
            raise ColmapFormatError(f"images.txt line {lineno}: {exc}") from None
        name = tok[9]
        if name in poses:
            raise ColmapFormatError(f"images.txt line {lineno}: duplicate image name {name!r}")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_TOL:
            msg = f"images.txt line {lineno}: quaternion norm {norm:.6f} for {name!r}, renormalised"
            warnings.append(msg)
            log.warning(msg)
        poses[name] = Pose(Rotation(q), t)
        expect_points = True
    return SequencePoses(sequence_id, poses, intrinsics, warnings)


def load_sequence(directory: Union[str, Path], sequence_id: Optional[str] = None) -> SequencePoses:
    directory = Path(directory)
    cams, imgs = directory / "cameras.txt", directory / "images.txt"
    for f in (cams, imgs):
        if not f.is_file():
            raise FileNotFoundError(f"missing COLMAP file: {f}")
    with open(cams) as fh:
        k = parse_cameras(fh)
    with open(imgs) as fh:
        return parse_images(fh, k, sequence_id or directory.name)


def format_cameras(k: Intrinsics, camera_id: int = 1) -> str:
    return (
        "# Camera list with one line of data per camera:\n"
        "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n"
        f"{camera_id} PINHOLE {k.width} {k.height} {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n"
    )


def format_images(poses: Dict[str, Pose], camera_id: int = 1) -> str:
    out = [
        "# Image list with two lines of data per image:\n",
        "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n",
        "#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    ]
    for i, (name, p) in enumerate(poses.items(), start=1):
        q = " ".join(repr(float(x)) for x in p.rotation.quat)
        t = " ".join(repr(float(x)) for x in p.translation)
        out.append(f"{i} {q} {t} {camera_id} {name}\n\n")
    return "".join(out)


def write_sequence(directory: Union[str, Path], k: Intrinsics, poses: Dict[str, Pose]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "cameras.txt").write_text(format_cameras(k))
    (directory / "images.txt").write_text(format_images(poses))


def coarse_relative(seq: SequencePoses, target: str, source: str) -> Pose:
    return relative_pose(seq.pose(target), seq.pose(source))
