"""Depth map files: PFM (little-endian float32) and 16-bit PNG in millimetres."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

PathLike = Union[str, Path]


def write_pfm(path: PathLike, depth: np.ndarray) -> None:
    """Single-channel PFM, rows stored bottom-to-top as the format requires."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while not dims:  # tolerate blank lines between header fields
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_depth_png16(path: PathLike, depth: np.ndarray) -> None:
    """Depth in millimetres, rounded and clipped to [1, 65535].

    Non-positive or non-finite depth is written as 0, the usual "no
    measurement" value, which the metrics exclude.
    """
    d = np.asarray(depth, float)
    ok = np.isfinite(d) & (d > 0)
    mm = np.zeros(d.shape, np.uint16)
    mm[ok] = np.clip(np.round(d[ok] * 1000.0), 1, 65535)
    Image.fromarray(mm).save(path)


def read_depth_png16(path: PathLike) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def read_depth(path: PathLike) -> np.ndarray:
    """Dispatch on suffix: ``.pfm`` or 16-bit ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    if path.suffix.lower() == ".png":
        return read_depth_png16(path)
    raise ValueError(f"{path}: unsupported depth format (use .pfm or 16-bit .png)")
