import numpy as np
import pytest

from conftest import random_clip, smooth_clip
from services.dataio import (
    COND_DIM,
    FORMAT_VERSION,
    HEADER,
    MotionClip,
    apply_norm,
    build_training_arrays,
    extract_condition,
    fit_channel_stats,
    fit_normstats,
    invert_norm,
    load_clip,
    load_dataset,
    make_windows,
    save_clip,
    save_dataset,
    split_dataset,
    window_starts,
)
from services.errors import ClipTooShort, DataFormatError, EmptyDataset, ShapeMismatch
from services.rotmath import identity_6d, sixd_decode, sixd_encode
from services.skeleton import HEAD, JOINT_COUNT, LEFT_WRIST, RIGHT_WRIST, project_sequence


def test_clip_validation():
    with pytest.raises(ShapeMismatch):
        MotionClip(np.zeros((3, 21, 6)), np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        MotionClip(np.zeros((3, 22, 6)), np.zeros((4, 3)))
    with pytest.raises(ClipTooShort):
        MotionClip(np.zeros((1, 22, 6)), np.zeros((1, 3)))


def test_condition_layout(skel, rng):
    clip = random_clip(rng, frames=6)
    cond = extract_condition(clip, skel)
    assert cond.features.shape == (6, 3, 18)
    assert cond.flat().shape == (6, COND_DIM)
    pos = clip.global_positions(skel)
    np.testing.assert_allclose(cond.features[:, 0, 12:15], pos[:, HEAD])
    np.testing.assert_allclose(cond.features[:, 1, 12:15], pos[:, LEFT_WRIST])
    np.testing.assert_allclose(cond.features[:, 2, 12:15], pos[:, RIGHT_WRIST])
    np.testing.assert_allclose(cond.head_pos, pos[:, HEAD])


def test_condition_first_frame_has_no_motion(skel, rng):
    cond = extract_condition(random_clip(rng, frames=4), skel)
    for k in range(3):
        np.testing.assert_array_equal(cond.features[0, k, 6:12], identity_6d())
        np.testing.assert_array_equal(cond.features[0, k, 15:18], np.zeros(3))


def test_condition_velocities_chain_back_to_rotations(skel, rng):
    clip = random_clip(rng, frames=5)
    cond = extract_condition(clip, skel)
    rot = sixd_decode(cond.features[:, :, 0:6])
    omega = sixd_decode(cond.features[1:, :, 6:12])
    np.testing.assert_allclose(rot[:-1] @ omega, rot[1:], atol=1e-12)
    vel = cond.features[1:, :, 15:18]
    np.testing.assert_allclose(cond.features[:-1, :, 12:15] + vel, cond.features[1:, :, 12:15], atol=1e-12)


@pytest.mark.parametrize(
    "length, starts",
    [(120, [0]), (121, [0, 1]), (228, [0, 108]), (250, [0, 108, 130]), (336, [0, 108, 216])],
)
def test_window_starts(length, starts):
    assert window_starts(length, 120, 12) == starts


def test_window_starts_too_short():
    with pytest.raises(ClipTooShort):
        window_starts(119, 120, 12)


def test_make_windows_history(skel, rng):
    clip = smooth_clip(rng, frames=250)
    cond = extract_condition(clip, skel)
    windows = make_windows(clip, cond, 120, 12)
    assert [w.start for w in windows] == [0, 108, 130]
    assert [w.history_len for w in windows] == [0, 12, 98]
    assert all(len(w.condition) == 120 and len(w.target) == 120 for w in windows)
    np.testing.assert_array_equal(windows[1].target.local_rot, clip.local_rot[108:228])
    assert make_windows(None, cond, 120, 12)[0].target is None


def test_channel_stats_floor_constant_channels():
    x = np.ones((10, 3))
    x[:, 0] = np.arange(10)
    mean, std = fit_channel_stats(x)
    np.testing.assert_allclose(mean, [4.5, 1.0, 1.0])
    assert std[0] == pytest.approx(np.arange(10).std())
    np.testing.assert_array_equal(std[1:], [1e-6, 1e-6])
    normed = apply_norm(x, mean, std)
    assert np.all(np.isfinite(normed))
    np.testing.assert_allclose(invert_norm(normed, mean, std), x)


def test_channel_stats_empty():
    with pytest.raises(EmptyDataset):
        fit_channel_stats(np.zeros((0, 4)))
    with pytest.raises(EmptyDataset):
        fit_normstats([], None, {})


def test_training_targets_follow_pipeline_order(skel, scales, rng):
    clips = [smooth_clip(rng, frames=120) for _ in range(3)]
    stats = fit_normstats(clips, skel, scales)
    arrays = build_training_arrays(clips, skel, scales, stats, window=120, history=12)
    assert arrays.cond.shape == (3, 120, COND_DIM)
    assert {k: v.shape for k, v in arrays.targets.items()} == {
        "S1": (3, 120, 36),
        "S2": (3, 120, 66),
        "S3": (3, 120, 132),
    }
    s3 = apply_norm(clips[1].local_rot.reshape(120, 132), stats.target_mean["S3"], stats.target_std["S3"])
    np.testing.assert_array_equal(arrays.targets["S3"][1], s3)
    raw = invert_norm(arrays.targets["S3"][1], stats.target_mean["S3"], stats.target_std["S3"])
    s1 = project_sequence(raw.reshape(120, JOINT_COUNT, 6), scales["S1"]).reshape(120, 36)
    np.testing.assert_allclose(
        arrays.targets["S1"][1], apply_norm(s1, stats.target_mean["S1"], stats.target_std["S1"]), atol=1e-6
    )


def test_normstats_tensor_names(skel, scales, rng):
    stats = fit_normstats([smooth_clip(rng, frames=30)], skel, scales)
    tensors = stats.to_tensors()
    assert set(tensors) >= {"norm/cond/mean", "norm/cond/std", "norm/S1/mean", "norm/S3/std"}
    back = type(stats).from_tensors(tensors)
    np.testing.assert_array_equal(back.target_std["S2"], stats.target_std["S2"])


def test_clip_file(tmp_path, rng):
    clip = random_clip(rng, frames=7, fps=30.0)
    path = tmp_path / "clip.mage"
    save_clip(path, clip)
    assert path.stat().st_size == HEADER.size + 7 * (3 + 132) * 4
    back = load_clip(path)
    assert back.fps == 30.0 and len(back) == 7
    np.testing.assert_allclose(back.local_rot, clip.local_rot, atol=1e-6)
    np.testing.assert_allclose(back.root_trans, clip.root_trans, atol=1e-6)


def test_clip_file_guards(tmp_path, rng):
    path = tmp_path / "clip.mage"
    save_clip(path, random_clip(rng, frames=4))
    data = path.read_bytes()

    (tmp_path / "short.mage").write_bytes(data[:-5])
    with pytest.raises(DataFormatError, match="expected"):
        load_clip(tmp_path / "short.mage")

    (tmp_path / "magic.mage").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DataFormatError, match="magic"):
        load_clip(tmp_path / "magic.mage")

    bad_version = HEADER.pack(b"MAGE", FORMAT_VERSION + 1, 60.0, 22, 4) + data[HEADER.size :]
    (tmp_path / "version.mage").write_bytes(bad_version)
    with pytest.raises(DataFormatError, match="version"):
        load_clip(tmp_path / "version.mage")

    with pytest.raises(DataFormatError):
        load_clip(tmp_path / "missing.mage")


def test_dataset_directory(tmp_path, rng):
    clips = [random_clip(rng, frames=5) for _ in range(3)]
    for i, c in enumerate(clips):
        c.meta = {"kind": "walk", "index": i}
    manifest = save_dataset(tmp_path / "ds", clips)
    assert manifest.name == "manifest.yaml"
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 3
    assert back[2].meta == {"kind": "walk", "index": 2}


def test_dataset_manifest_errors(tmp_path):
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.yaml").write_text("format_version: 1\nclips: []\n")
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path)
    (tmp_path / "manifest.yaml").write_text("format_version: 1\nclips:\n  - {frames: 10, fps: 60}\n")
    with pytest.raises(DataFormatError, match="no 'file'"):
        load_dataset(tmp_path)


def test_split_is_deterministic(rng):
    clips = [random_clip(rng, frames=2) for _ in range(10)]
    train_a, test_a = split_dataset(clips, 3, seed=5)
    train_b, test_b = split_dataset(clips, 3, seed=5)
    assert len(train_a) == 7 and len(test_a) == 3
    assert [id(c) for c in test_a] == [id(c) for c in test_b]
    assert {id(c) for c in train_a}.isdisjoint(id(c) for c in test_a)
