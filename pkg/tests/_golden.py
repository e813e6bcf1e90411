"""Deterministic prediction/ground-truth fixture behind ``data/golden_eval.csv``."""

import numpy as np

from geodepth.depthio import write_depth_png16, write_pfm


def write_eval_fixture(pred_dir, gt_dir):
    pred_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:16, 0:20]
    for i in range(3):
        gt = 0.5 + 0.05 * xx + 0.02 * (i + 1) * yy
        gt[0, 0] = 0  # invalid pixel, excluded by every metric
        rng = np.random.default_rng(100 + i)
        pred = (1.5 + 0.5 * i) * gt * np.exp(0.1 * rng.standard_normal(gt.shape))
        pred[0, 0] = 1.0
        write_pfm(pred_dir / f"frame{i}.pfm", pred)
        write_depth_png16(gt_dir / f"frame{i}.png", gt)
