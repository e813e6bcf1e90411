"""Command-line entry point: ``geodepth {synth,train,eval,ablate}``.

Every command writes into a fresh output directory (an existing non-empty
directory is refused) and finishes by writing ``manifest.json`` next to its
outputs. Log verbosity comes from the ``GEODEPTH_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``INFO``).

Exit codes: 0 success, 2 configuration error, 3 I/O or input-data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import __version__
from .colmap_io import ColmapFormatError
from .depthio import read_depth, write_depth_png16, write_pfm
from .metrics import COLUMNS, Metrics, aggregate, compute_metrics, format_csv, format_table
from .optim import NonFiniteGradient
from .pose_opt import format_alignment_dump
from .synth import config_from_dict as scene_from_dict
from .synth import export_dataset, load_dataset, make_scene
from .train import (
    ABLATION_ROWS,
    ABLATIONS,
    DEFAULT_GRID,
    TrainConfig,
    TrainReport,
    config_for,
    config_from_dict,
    problem_from_dataset,
    train,
)

log = logging.getLogger("geodepth")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config_error(msg: str) -> CliError:
    return CliError(msg, EXIT_CONFIG)


def _io_error(msg: str) -> CliError:
    return CliError(msg, EXIT_IO)


# ------------------------------------------------------------------ plumbing


def _now() -> str:
    """UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
    else:
        t = _dt.datetime.now(_dt.timezone.utc)
    return t.isoformat(timespec="seconds")


def _claim_out_dir(out: Path) -> Path:
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise _io_error(f"output directory {out} already exists and is not empty; each run needs a fresh one")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise _io_error(f"cannot create output directory {out}: {e}") from e
    return out


def _write_manifest(out: Path, command: str, config_path: Optional[str], seed: int,
                    ablation: Optional[dict], started: str, extra: Optional[dict] = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config_path": config_path,
        "out_dir": str(out),
        "seed": seed,
        "ablation": ablation,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise _io_error(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise _config_error(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise _config_error(f"{path}: top level must be a mapping with 'scene' and/or 'train' sections")
    unknown = set(data) - {"scene", "train", "seed"}
    if unknown:
        raise _config_error(f"{path}: unknown top-level keys {sorted(unknown)} (expected scene, train, seed)")
    return data


def _seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _train_config(args, cfg: dict, ablation: Optional[str]) -> TrainConfig:
    try:
        base = config_from_dict(cfg.get("train") or {})
        if ablation is not None:
            base = config_for(ablation, base)
        changes = {"seed": _seed(args, cfg)}
        if args.no_automask:
            changes["automask"] = False
        if args.isd_iters is not None:
            changes["isd_iterations"] = args.isd_iters
        return dataclasses.replace(base, **changes).validate()
    except (TypeError, ValueError, KeyError) as e:
        raise _config_error(f"invalid training config: {e}") from e


def _flags(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in ("use_coarse_poses", "optim_t", "optim_R", "isd", "automask")}


def _load(dataset: str):
    try:
        return load_dataset(dataset)
    except (OSError, ColmapFormatError) as e:
        raise _io_error(str(e)) from e


# --------------------------------------------------------------- evaluation


def collect_depths(directory: Path) -> Dict[str, Path]:
    """Depth files keyed by stem.

    A directory holding ``.pfm``/``.png`` files directly is used as is;
    otherwise a dataset root is assumed and ``*/depth/*`` is gathered.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise _io_error(f"{directory}: not a directory")
    files = [p for p in directory.iterdir() if p.suffix.lower() in (".pfm", ".png")]
    if not files:
        files = [p for p in directory.glob("*/depth/*") if p.suffix.lower() in (".pfm", ".png")]
    out: Dict[str, Path] = {}
    for p in sorted(files):
        if p.stem in out:
            raise _io_error(f"{directory}: two depth files share the name {p.stem!r}")
        out[p.stem] = p
    if not out:
        raise _io_error(f"{directory}: no .pfm or .png depth files found")
    return out


def evaluate_maps(preds: Dict[str, np.ndarray], gts: Dict[str, np.ndarray]) -> Tuple[List[Tuple[str, Metrics]], dict]:
    """Per-image metrics in name order plus the aggregate row."""
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt:
        raise _io_error(
            "prediction and ground-truth names differ: "
            f"only in ground truth {missing_pred}, only in predictions {missing_gt}"
        )
    rows = []
    for name in sorted(gts):
        if preds[name].shape != gts[name].shape:
            raise _io_error(f"{name}: prediction shape {preds[name].shape} != ground truth {gts[name].shape}")
        rows.append((name, compute_metrics(preds[name], gts[name])))
    return rows, aggregate([m for _, m in rows])


def metrics_csv(rows: Sequence[Tuple[str, Metrics]], agg: dict) -> str:
    """Per-image rows (with their alignment factor) followed by a ``mean`` row."""
    lines = [",".join(["name", *COLUMNS, "scale"])]
    for name, m in rows:
        d = m.as_dict()
        lines.append(",".join([name, ""] + [f"{d[c]:.6f}" for c in COLUMNS[1:]] + [f"{m.scale:.6f}"]))
    lines.append(",".join(["mean"] + [f"{agg[c]:.6f}" for c in COLUMNS] + [""]))
    return "\n".join(lines) + "\n"


def _exported(depth: np.ndarray) -> np.ndarray:
    """The prediction exactly as it is read back from its PFM file."""
    return np.asarray(depth, dtype="<f4").astype(np.float64)


# ------------------------------------------------------------------ commands


def _write_train_outputs(out: Path, ds, report: TrainReport) -> Optional[Tuple[list, dict]]:
    (out / "train_log.csv").write_text(report.log_csv())
    (out / "alignment.txt").write_text(format_alignment_dump(report.pairs))
    pfm_dir, png_dir = out / "depth" / "pfm", out / "depth" / "png16"
    pfm_dir.mkdir(parents=True)
    png_dir.mkdir(parents=True)
    for name, d in zip(report.names, report.depth):
        stem = Path(name).stem
        write_pfm(pfm_dir / f"{stem}.pfm", d)
        write_depth_png16(png_dir / f"{stem}.png", d)
    if any(f.depth is None for f in ds.frames):
        log.info("dataset has no ground-truth depth; skipping metrics")
        return None
    preds = {Path(n).stem: _exported(d) for n, d in zip(report.names, report.depth)}
    gts = {Path(f.name).stem: f.depth for f in ds.frames}
    rows, agg = evaluate_maps(preds, gts)
    (out / "metrics.csv").write_text(metrics_csv(rows, agg))
    return rows, agg


def _run_training(ds, cfg: TrainConfig) -> TrainReport:
    try:
        problem = problem_from_dataset(ds, cfg)
    except ValueError as e:
        raise _io_error(f"dataset unusable: {e}") from e
    if problem.skipped:
        log.warning("%d frame pairs skipped (unregistered frames)", problem.skipped)

    def progress(epoch, lb, m):
        log.debug("epoch %d total %.6f abs_rel %s", epoch, lb.total, m.get("abs_rel"))

    log.info("training %d frames, %d pairs, %d epochs, flags %s", len(problem.names), len(problem.pairs),
             cfg.epochs, _flags(cfg))
    return train(problem, cfg, progress)


def cmd_synth(args) -> int:
    started = _now()
    cfg_dict = _read_config(args.config)
    try:
        scene = scene_from_dict(cfg_dict.get("scene") or {})
        scene.validate()
    except (TypeError, ValueError) as e:
        raise _config_error(f"invalid scene config: {e}") from e
    seed = _seed(args, cfg_dict)
    out = _claim_out_dir(Path(args.out))
    ds = make_scene(scene, seed=seed)
    try:
        export_dataset(ds, out, scene)
    except OSError as e:
        raise _io_error(f"cannot write dataset to {out}: {e}") from e
    _write_manifest(out, "synth", args.config, seed, None, started,
                    {"frames": len(ds.frames), "sequences": sorted(ds.sequences())})
    print(f"wrote {len(ds.frames)} frames in {len(ds.sequences())} sequence(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg_dict = _read_config(args.config)
    if args.ablate is not None and args.ablate not in ABLATIONS:
        raise _config_error(f"unknown ablation {args.ablate!r}; choose from {sorted(ABLATIONS)}")
    cfg = _train_config(args, cfg_dict, args.ablate)
    ds = _load(args.dataset)
    out = _claim_out_dir(Path(args.out))
    report = _run_training(ds, cfg)
    result = _write_train_outputs(out, ds, report)
    _write_manifest(out, "train", args.config, cfg.seed, _flags(cfg), started,
                    {"dataset": str(args.dataset), "pairs": len(report.pairs), "skipped_pairs": report.skipped})
    if result is not None:
        print(format_table([(args.ablate or "train", result[1])]), end="")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    pred_files = collect_depths(Path(args.pred))
    gt_files = collect_depths(Path(args.gt))
    try:
        preds = {k: read_depth(p) for k, p in pred_files.items()}
        gts = {k: read_depth(p) for k, p in gt_files.items()}
    except (OSError, ValueError) as e:
        raise _io_error(f"cannot read depth file: {e}") from e
    rows, agg = evaluate_maps(preds, gts)
    text = metrics_csv(rows, agg)
    if args.out is not None:
        out = _claim_out_dir(Path(args.out))
        (out / "metrics.csv").write_text(text)
        (out / "table.txt").write_text(format_table([("mean", agg)]))
        _write_manifest(out, "eval", None, 0, None, started, {"pred": str(args.pred), "gt": str(args.gt)})
    print(format_table([("mean", agg)]), end="")
    return EXIT_OK


def parse_grid(spec: Optional[str]) -> List[str]:
    if spec is None:
        return list(DEFAULT_GRID)
    names = [s.strip() for s in spec.split(",") if s.strip()]
    if not names:
        raise _config_error("empty ablation grid")
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise _config_error(f"unknown ablation(s) {bad}; choose from {sorted(ABLATIONS)}")
    return names


def row_label(name: str) -> str:
    return f"({ABLATION_ROWS[name]}) {name}" if name in ABLATION_ROWS else name


def cmd_ablate(args) -> int:
    started = _now()
    cfg_dict = _read_config(args.config)
    grid = parse_grid(args.ablate)
    configs = [(name, _train_config(args, cfg_dict, name)) for name in grid]
    ds = _load(args.dataset)
    if any(f.depth is None for f in ds.frames):
        raise _io_error(f"{args.dataset}: ablation needs ground-truth depth for every frame")
    out = _claim_out_dir(Path(args.out))
    rows = []
    for name, cfg in configs:
        log.info("ablation %s", name)
        sub = out / name
        sub.mkdir()
        report = _run_training(ds, cfg)
        _, agg = _write_train_outputs(sub, ds, report)
        rows.append((row_label(name), agg))
    (out / "ablation.csv").write_text(format_csv(rows, label="config"))
    table = format_table(rows)
    (out / "ablation.txt").write_text(table)
    _write_manifest(out, "ablate", args.config, configs[0][1].seed, {n: _flags(c) for n, c in configs}, started,
                    {"dataset": str(args.dataset), "grid": grid})
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geodepth", description="Depth and pose refinement on posed image sequences.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--config", help="YAML file; its 'scene' section configures the renderer")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def training_flags(q):
        q.add_argument("dataset", help="dataset directory (synth export or <seq>/images + <seq>/sparse layout)")
        q.add_argument("--config", help="YAML file; its 'train' section configures optimisation")
        q.add_argument("--seed", type=int)
        q.add_argument("--out", required=True)
        q.add_argument("--no-automask", action="store_true", help="disable the auto-mask")
        q.add_argument("--isd-iters", type=int, metavar="N", help="self-distillation iterations per epoch")

    t = sub.add_parser("train", help="optimise depth and pair alignment on a dataset")
    training_flags(t)
    t.add_argument("--ablate", metavar="NAME", help=f"configuration preset: {', '.join(ABLATIONS)}")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="depth metrics for predictions against ground truth")
    e.add_argument("pred", help="directory of predicted depth files (.pfm or 16-bit .png)")
    e.add_argument("gt", help="directory of ground-truth depth files, or a dataset root")
    e.add_argument("--out", help="directory for metrics.csv and table.txt")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every configuration of a grid and tabulate")
    training_flags(a)
    a.add_argument("--ablate", metavar="GRID",
                   help=f"comma-separated presets (default {','.join(DEFAULT_GRID)})")
    a.set_defaults(func=cmd_ablate)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GEODEPTH_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "isd_iters", None) is not None and args.isd_iters < 1:
        parser.error("--isd-iters must be >= 1")
    try:
        return args.func(args)
    except CliError as e:
        log.error("%s", e)
        return e.code
    except NonFiniteGradient as e:
        log.error("numerical abort: %s", e)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        log.error("numerical abort: %s", e)
        return EXIT_NUMERIC
    except OSError as e:
        log.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
