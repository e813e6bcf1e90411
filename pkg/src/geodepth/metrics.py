"""Monocular depth metrics with median scaling, and the scale-consistency diagnostic."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

COLUMNS = ("scale_std", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass
class Metrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    scale: float = 1.0

    def as_dict(self):
        return asdict(self)


def compute_metrics(pred, gt, median_align: bool = True, clamp=(0.1, 10.0), valid=None) -> Metrics:
    """Standard error metrics on pixels with positive ground truth.

    With ``median_align`` the prediction is multiplied by
    ``median(gt) / median(pred)`` first; ``scale`` records that factor. The
    aligned prediction is clamped to ``clamp`` (pass ``None`` to disable).
    """
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)
    mask = np.isfinite(gt) & (gt > 0)
    if valid is not None:
        mask &= valid
    if not mask.any():
        raise ValueError("no valid ground-truth pixels to evaluate")
    p, g = pred[mask], gt[mask]
    scale = 1.0
    if median_align:
        scale = float(np.median(g) / np.median(p))
        p = p * scale
    if clamp is not None:
        p = np.clip(p, *clamp)
    ratio = np.maximum(p / g, g / p)
    diff = p - g
    return Metrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        scale=scale,
    )


def scale_std(factors: Sequence[float]) -> float:
    """Population standard deviation of per-image alignment factors."""
    f = np.asarray(list(factors), float)
    if f.size < 2:
        raise ValueError("scale_std needs at least two images")
    return float(np.std(f))


def aggregate(per_image: Sequence[Metrics]) -> dict:
    """Mean of each metric over images plus ``scale_std`` of the factors."""
    out = {k: float(np.mean([getattr(m, k) for m in per_image])) for k in COLUMNS[1:]}
    out["scale_std"] = scale_std([m.scale for m in per_image]) if len(per_image) > 1 else float("nan")
    return out


def format_table(rows: Iterable[tuple], columns=COLUMNS) -> str:
    """Aligned text table; each row is ``(label, metrics_dict)``."""
    rows = list(rows)
    width = max([len("config")] + [len(r[0]) for r in rows])
    head = f"{'config':<{width}} | " + " ".join(f"{c:>9}" for c in columns)
    lines = [head, "-" * len(head)]
    for label, d in rows:
        lines.append(f"{label:<{width}} | " + " ".join(f"{d[c]:>9.4f}" for c in columns))
    return "\n".join(lines) + "\n"


def format_csv(rows: Iterable[tuple], columns=COLUMNS, label="name") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label, *columns])
    for name, d in rows:
        w.writerow([name, *(f"{d[c]:.6f}" for c in columns)])
    return buf.getvalue()
