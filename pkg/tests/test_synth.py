import numpy as np
import pytest

from geodepth.geometry import Pose, Rotation, relative_pose
from geodepth.photometric import recon_error, warp
from geodepth.synth import (
    CorruptionSpec,
    SceneConfig,
    _make_layout,
    _render,
    config_from_dict,
    config_to_dict,
    corrupt_poses,
    export_dataset,
    load_dataset,
    make_scene,
)


@pytest.fixture(scope="module")
def scene():
    return make_scene(SceneConfig(frames=4), seed=0)


def test_deterministic(scene):
    again = make_scene(SceneConfig(frames=4), seed=0)
    for a, b in zip(scene.frames, again.frames):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.pose.matrix(), b.pose.matrix())
    other = make_scene(SceneConfig(frames=4), seed=1)
    assert not np.array_equal(other.frames[0].image, scene.frames[0].image)


def test_basic_invariants(scene):
    for f in scene.frames:
        assert f.image.shape == (3, 64, 64) and f.depth.shape == (64, 64)
        assert np.all(f.depth > 0)
        assert f.image.min() >= 0 and f.image.max() <= 1


@pytest.mark.parametrize("bad", [dict(frames=0), dict(width=0), dict(height=-2), dict(texture="odd")])
def test_degenerate_config(bad):
    with pytest.raises(ValueError):
        make_scene(SceneConfig(**bad))


def test_static_camera_identical_views():
    cfg = SceneConfig()
    layout = _make_layout(cfg, np.random.default_rng(3))
    pose = Pose(Rotation.from_matrix(np.eye(3)), np.array([0.01, 0.0, 0.02]))
    a = _render(layout, cfg.intrinsics(), pose)
    b = _render(layout, cfg.intrinsics(), pose)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_fronto_parallel_plane_depth():
    # a huge room whose far wall sits at Z=2 covers every pixel
    cfg = SceneConfig(room=(-100, 100, -100, 100, -1, 2), boxes=0)
    layout = _make_layout(cfg, np.random.default_rng(0))
    _, depth = _render(layout, cfg.intrinsics(), Pose(Rotation.identity(), np.zeros(3)))
    assert np.allclose(depth, 2.0, atol=1e-12)


def test_gt_warp_round_trip(scene):
    k = scene.intrinsics
    for names in scene.sequences().values():
        for i in range(len(names) - 1):
            for a, b in ((i, i + 1), (i + 1, i)):
                ft, fs = scene.frame(names[a]), scene.frame(names[b])
                w = warp(fs.image, ft.depth, k, relative_pose(ft.pose, fs.pose))
                err = recon_error(w.image, ft.image)
                assert w.valid.mean() > 0.5
                assert err[w.valid].mean() < 0.01


def test_low_texture_is_nearly_flat():
    ds = make_scene(SceneConfig(frames=1, texture="low", boxes=0), seed=0)
    img = ds.frames[0].image
    # brightness variation within a surface stays under 2%
    assert np.all(img.max(axis=(1, 2)) - img.min(axis=(1, 2)) < 0.02)
    assert set(ds.texture_tags["seq00"].values()) == {"low"}


def _random_poses(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        q = rng.normal(size=4)
        out.append(Pose(Rotation(q / np.linalg.norm(q)), rng.normal(size=3)))
    return out


def test_identity_corruption():
    gt = _random_poses(5)
    spec = CorruptionSpec(scale_range=(1.0, 1.0), rotation_sigma=0.0, translation_sigma=0.0)
    out, scales = corrupt_poses(gt, spec)
    assert scales == [1.0] * 5
    for a, b in zip(gt, out):
        assert np.array_equal(a.matrix(), b.matrix())


def test_pure_scaling():
    gt = _random_poses(6, seed=2)
    spec = CorruptionSpec(scale_range=(1.7, 1.7), rotation_sigma=0.0, translation_sigma=0.0)
    out, _ = corrupt_poses(gt, spec)
    for a, b in zip(gt, out):
        assert np.array_equal(b.translation, 1.7 * a.translation)
        assert np.array_equal(a.R, b.R)


def test_scale_shared_within_sequence():
    gt = _random_poses(8, seed=4)
    spec = CorruptionSpec(rotation_sigma=0.0, translation_sigma=0.0, seed=9)
    out, scales = corrupt_poses(gt, spec)
    assert len(set(scales)) == 1 and 0.5 <= scales[0] <= 2.0
    ratios = [np.linalg.norm(b.translation) / np.linalg.norm(a.translation) for a, b in zip(gt, out)]
    assert np.allclose(ratios, scales[0])


def test_rotation_noise_magnitude_monte_carlo():
    sigma = np.radians(0.3)
    gt = _random_poses(1000, seed=1)
    out, _ = corrupt_poses(gt, CorruptionSpec(rotation_sigma=sigma, translation_sigma=0.0, seed=5))
    angles = [(b.rotation @ a.rotation.inverse()).angle() for a, b in zip(gt, out)]
    expected = sigma * np.sqrt(8 / np.pi)  # mean norm of an isotropic 3-D Gaussian
    assert abs(np.mean(angles) / expected - 1) < 0.05


def test_corrupted_dataset_uses_per_sequence_scale():
    cfg = SceneConfig(frames=3, sequences=2, corruption=CorruptionSpec(rotation_sigma=0.0, translation_sigma=0.0))
    ds = make_scene(cfg, seed=0)
    seqs = ds.sequences()
    assert set(ds.coarse) == set(seqs)
    per_seq = [{ds.scale_factors[n] for n in names} for names in seqs.values()]
    assert all(len(s) == 1 for s in per_seq)
    assert per_seq[0] != per_seq[1]


def test_config_dict_round_trip():
    cfg = SceneConfig(frames=5, corruption=CorruptionSpec(drift=0.01, seed=3))
    back = config_from_dict(config_to_dict(cfg))
    assert back.frames == 5 and back.corruption.drift == 0.01
    assert np.isclose(back.corruption.rotation_sigma, cfg.corruption.rotation_sigma)
    with pytest.raises(ValueError):
        config_from_dict({"nonsense": 1})


def test_export_round_trip(tmp_path):
    cfg = SceneConfig(frames=2, sequences=1, boxes=1, corruption=CorruptionSpec(seed=2))
    ds = make_scene(cfg, seed=0)
    export_dataset(ds, tmp_path, cfg)
    back = load_dataset(tmp_path)
    assert [f.name for f in back.frames] == [f.name for f in ds.frames]
    for a, b in zip(ds.frames, back.frames):
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
        assert np.abs(a.depth - b.depth).max() <= 0.0005 + 1e-12
        assert np.allclose(a.pose.matrix(), b.pose.matrix(), atol=1e-9)
    n = ds.frames[1].name
    assert np.allclose(back.coarse["seq00"].pose(n).matrix(), ds.coarse["seq00"].pose(n).matrix(), atol=1e-9)
    assert back.scale_factors == pytest.approx(ds.scale_factors)
