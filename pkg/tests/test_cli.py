import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from _golden import write_eval_fixture
from geodepth import cli
from geodepth.depthio import read_depth, read_pfm, write_pfm
from geodepth.optim import NonFiniteGradient

DATA = Path(__file__).parent / "data"

TINY = {
    "scene": {"frames": 3, "width": 32, "height": 32, "focal": 28.0, "sequences": 2, "boxes": 1,
              "corruption": {"seed": 1}},
    "train": {"epochs": 2, "isd_iterations": 1},
}


def files(root: Path, skip=("manifest.json",)):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(root / "ds")]) == 0
    return root, cfg


def test_synth_default_file_contract(tmp_path):
    out = tmp_path / "ds"
    assert cli.main(["synth", "--out", str(out)]) == 0
    seq = out / "seq00"
    assert len(list((seq / "images").glob("*.png"))) == 8
    assert len(list((seq / "depth").glob("*.png"))) == 8
    assert sorted(p.name for p in (seq / "sparse").iterdir()) == ["cameras.txt", "images.txt"]
    assert not (seq / "sparse_gt").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 0
    assert read_depth(next((seq / "depth").glob("*.png"))).shape == (64, 64)


def test_synth_same_seed_byte_identical(tmp_path):
    assert cli.main(["synth", "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a and a == b
    assert cli.main(["synth", "--seed", "5", "--out", str(tmp_path / "c")]) == 0
    assert files(tmp_path / "c") != a


def test_manifest_reproducible_with_source_date_epoch(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    monkeypatch.chdir(tmp_path)
    cli.main(["synth", "--out", "x"])
    m = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert m["started"] == m["finished"] == "2023-11-14T22:13:20+00:00"


def test_synth_corruption_emits_both_pose_sets(tiny):
    root, _ = tiny
    for seq in ("seq00", "seq01"):
        assert (root / "ds" / seq / "sparse" / "images.txt").is_file()
        assert (root / "ds" / seq / "sparse_gt" / "images.txt").is_file()


def test_refuses_non_empty_out_dir(tmp_path):
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / "x").write_text("")
    assert cli.main(["synth", "--out", str(tmp_path / "busy")]) == cli.EXIT_IO


@pytest.mark.parametrize("text,code", [("scene: [1, 2", cli.EXIT_CONFIG), ("scene: {frames: 0}", cli.EXIT_CONFIG),
                                       ("bogus: 1", cli.EXIT_CONFIG), ("scene: {nope: 1}", cli.EXIT_CONFIG)])
def test_config_errors(tmp_path, text, code):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == code


def test_missing_config_file_is_io_error(tmp_path):
    assert cli.main(["synth", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO


def test_train_outputs_and_flag_mapping(tiny, tmp_path):
    root, cfg = tiny
    out = tmp_path / "tr"
    assert cli.main(["train", str(root / "ds"), "--config", str(cfg), "--out", str(out), "--ablate", "full"]) == 0
    names = sorted(p.stem for p in (root / "ds").glob("*/images/*.png"))
    assert sorted(p.stem for p in (out / "depth" / "pfm").glob("*.pfm")) == names
    assert sorted(p.stem for p in (out / "depth" / "png16").glob("*.png")) == names
    log_lines = (out / "train_log.csv").read_text().splitlines()
    assert log_lines[0].startswith("epoch,rec_t,rec_r,smooth,isd,total,scale_std,abs_rel")
    assert len(log_lines) == 1 + 2
    dump = (out / "alignment.txt").read_text().splitlines()
    assert len(dump) == 1 + 8  # 2 sequences x 2(3-1) pairs
    m = json.loads((out / "manifest.json").read_text())
    assert m["ablation"] == dict(use_coarse_poses=True, optim_t=True, optim_R=True, isd=True, automask=True)
    d = read_pfm(out / "depth" / "pfm" / f"{names[0]}.pfm")
    assert d.shape == (32, 32) and np.all(d > 0)
    png = read_depth(out / "depth" / "png16" / f"{names[0]}.png")
    assert np.abs(png - d).max() <= 0.0005 + 1e-9


def test_train_baseline_and_switches(tiny, tmp_path):
    root, cfg = tiny
    out = tmp_path / "tr"
    args = ["train", str(root / "ds"), "--config", str(cfg), "--out", str(out), "--ablate", "baseline",
            "--no-automask", "--isd-iters", "3"]
    assert cli.main(args) == 0
    flags = json.loads((out / "manifest.json").read_text())["ablation"]
    assert flags == dict(use_coarse_poses=False, optim_t=False, optim_R=False, isd=False, automask=False)
    parsed = cli.build_parser().parse_args(args[:1] + [str(root / "ds"), "--out", "x", "--isd-iters", "3"])
    cfg_obj = cli._train_config(parsed, {}, "full")
    assert cfg_obj.isd_iterations == 3 and cfg_obj.isd


def test_train_is_deterministic(tiny, tmp_path):
    root, cfg = tiny
    for name in ("a", "b"):
        assert cli.main(["train", str(root / "ds"), "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_missing_images_txt_names_the_file(tiny, tmp_path, caplog):
    root, cfg = tiny
    ds = tmp_path / "ds"
    shutil.copytree(root / "ds", ds)
    (ds / "seq01" / "sparse" / "images.txt").unlink()
    assert cli.main(["train", str(ds), "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_IO
    assert "images.txt" in caplog.text and "seq01" in caplog.text


def test_zero_usable_pairs(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"scene": {"frames": 1, "width": 16, "height": 16, "focal": 14.0}}))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "ds")]) == 0
    assert cli.main(["train", str(tmp_path / "ds"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO


def test_unregistered_frame_is_skipped(tiny, tmp_path):
    root, cfg = tiny
    ds = tmp_path / "ds"
    shutil.copytree(root / "ds", ds)
    # drop the middle frame of seq00 from its pose file: its 4 pairs are skipped
    images = ds / "seq00" / "sparse" / "images.txt"
    lines = images.read_text().splitlines()
    keep, i = [], 0
    while i < len(lines):
        if not lines[i].startswith("#") and "seq00_0001.png" in lines[i]:
            i += 2
            continue
        keep.append(lines[i])
        i += 1
    images.write_text("\n".join(keep) + "\n")
    assert cli.main(["train", str(ds), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["skipped_pairs"] == 4 and m["pairs"] == 4


def test_unknown_ablation_is_config_error(tiny, tmp_path):
    root, _ = tiny
    assert cli.main(["train", str(root / "ds"), "--out", str(tmp_path / "o"), "--ablate", "nope"]) == cli.EXIT_CONFIG


def test_numerical_abort_exit_code(tiny, tmp_path, monkeypatch):
    root, cfg = tiny

    def boom(*a, **k):
        raise NonFiniteGradient("logits0")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", str(root / "ds"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC


# ---------------------------------------------------------------------- eval


def _eval_csv(pred, gt, out):
    assert cli.main(["eval", str(pred), str(gt), "--out", str(out)]) == 0
    return (out / "metrics.csv").read_text()


def test_eval_matches_golden(tmp_path):
    write_eval_fixture(tmp_path / "pred", tmp_path / "gt")
    assert _eval_csv(tmp_path / "pred", tmp_path / "gt", tmp_path / "o") == (DATA / "golden_eval.csv").read_text()


def test_eval_identity_and_doubling(tiny, tmp_path):
    root, _ = tiny
    gt_files = sorted((root / "ds").glob("*/depth/*.png"))
    for name, factor in (("same", 1.0), ("double", 2.0)):
        d = tmp_path / name
        d.mkdir()
        for f in gt_files:
            write_pfm(d / f"{f.stem}.pfm", factor * read_depth(f))
    same = _eval_csv(tmp_path / "same", root / "ds", tmp_path / "o1")
    mean = dict(zip(same.splitlines()[0].split(","), same.splitlines()[-1].split(",")))
    for c in ("abs_rel", "sq_rel", "rmse", "rmse_log", "scale_std"):
        assert float(mean[c]) == 0
    assert float(mean["delta1"]) == 1
    double = _eval_csv(tmp_path / "double", root / "ds", tmp_path / "o2")
    strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]  # drop the scale column
    assert strip(double) == strip(same)


def test_eval_name_mismatch(tmp_path, caplog):
    write_eval_fixture(tmp_path / "pred", tmp_path / "gt")
    (tmp_path / "pred" / "frame2.pfm").unlink()
    assert cli.main(["eval", str(tmp_path / "pred"), str(tmp_path / "gt")]) == cli.EXIT_IO
    assert "frame2" in caplog.text


# -------------------------------------------------------------------- ablate


def test_ablate_empty_grid(tiny, tmp_path):
    root, _ = tiny
    assert cli.main(["ablate", str(root / "ds"), "--out", str(tmp_path / "o"), "--ablate", " , "]) == cli.EXIT_CONFIG


def test_ablate_single_row_equals_train_then_eval(tiny, tmp_path):
    root, cfg = tiny
    ab = tmp_path / "ab"
    assert cli.main(["ablate", str(root / "ds"), "--config", str(cfg), "--out", str(ab), "--ablate", "cp_t"]) == 0
    rows = (ab / "ablation.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("(k) cp_t,")
    tr = tmp_path / "tr"
    assert cli.main(["train", str(root / "ds"), "--config", str(cfg), "--out", str(tr), "--ablate", "cp_t"]) == 0
    ev = _eval_csv(tr / "depth" / "pfm", root / "ds", tmp_path / "ev")
    mean = ev.splitlines()[-1].split(",")[1:-1]
    assert rows[1].split(",")[1:] == mean
