import numpy as np
import pytest

from cfmlab.codec import PART_JOINTS, PART_ORDER, init_part_codec
from cfmlab.flow import NegativePairing, init_velocity_net
from cfmlab.metrics import OnsetTrack, beat_consistency, extract_kinematic_peaks, fgd, motion_features
from cfmlab.numerics import NumericError
from cfmlab.synthdata import (
    DatasetConfig,
    GestureClass,
    build_dataset,
    generate_utterance,
    load_dataset,
    make_gesture_classes,
    mismatch_pairing,
    save_dataset,
)


# --------------------------------------------------------------------- classes

def test_class_anchors_nearly_orthogonal():
    classes = make_gesture_classes(np.random.default_rng(0), 3)
    for a in classes:
        for b in classes:
            if a.id != b.id:
                assert abs(float(a.text_anchor @ b.text_anchor)) < 0.5
                assert abs(float(a.audio_anchor @ b.audio_anchor)) < 0.5


def test_class_part_signatures_differ():
    classes = make_gesture_classes(np.random.default_rng(1), 3)
    assert classes[0].part_weights["hand"] == 2.0
    assert classes[1].part_weights["upper"] == 2.0
    assert classes[2].part_weights["lower"] == 2.0


def test_too_many_classes_for_anchor_dim_rejected():
    with pytest.raises(NumericError, match="orthogonal anchors"):
        make_gesture_classes(np.random.default_rng(2), 5, d_text=4, d_audio=4)


def test_gesture_class_requires_unit_anchors():
    with pytest.raises(NumericError, match="unit norm"):
        GestureClass(id=0, freqs={}, part_weights={}, phases={}, stroke_dirs={},
                     text_anchor=np.ones(4), audio_anchor=np.ones(4) / 2.0)


# ------------------------------------------------------------------- utterance

def _one_class(seed=0):
    return make_gesture_classes(np.random.default_rng(seed), 1)[0]


def test_utterance_deterministic_per_seed():
    c = _one_class()
    a = generate_utterance(11, c, noise=0.05)
    b = generate_utterance(11, c, noise=0.05)
    assert np.array_equal(a.audio, b.audio)
    assert np.array_equal(a.text, b.text)
    assert np.array_equal(a.onsets, b.onsets)
    for p in PART_ORDER:
        assert np.array_equal(a.motion[p].frames, b.motion[p].frames)


def test_utterance_shapes():
    c = _one_class()
    u = generate_utterance(0, c, noise=0.0, n_frames=64, downsample=4)
    assert u.audio.shape == (16, 16)
    assert u.text.shape == (16, 16)
    for p in PART_ORDER:
        assert u.motion[p].frames.shape == (64, PART_JOINTS[p])
    assert u.onsets.shape == (4,)


def test_noise_zero_peaks_within_two_frames_of_onsets():
    classes = make_gesture_classes(np.random.default_rng(3), 3)
    for seed in range(5):
        for c in classes:
            u = generate_utterance(seed, c, noise=0.0)
            track = extract_kinematic_peaks(u.motion)
            assert track.times.size == u.onsets.size
            assert np.all(np.abs(track.times - u.onsets) <= 2.0 / 15.0 + 1e-12)


def test_noise_zero_beat_consistency_above_point_nine():
    classes = make_gesture_classes(np.random.default_rng(4), 3)
    for seed in range(5):
        u = generate_utterance(seed, classes[seed % 3], noise=0.0)
        track = extract_kinematic_peaks(u.motion)
        onsets = OnsetTrack(u.onsets, duration=64 / 15.0)
        assert beat_consistency(track, onsets, sigma=0.1) > 0.9


def test_audio_pulse_marks_onset_latent_steps():
    c = _one_class()
    u = generate_utterance(5, c, noise=0.0)
    marked = set((u.onsets * 15.0).round().astype(int) // 4)
    baseline = c.audio_anchor[-1]
    for l in range(u.audio.shape[0]):
        lifted = u.audio[l, -1] - baseline > 1.0
        assert lifted == (l in marked)


def test_noise_zero_text_is_exact_anchor():
    c = _one_class()
    u = generate_utterance(6, c, noise=0.0)
    assert np.allclose(u.text, c.text_anchor[None, :], atol=1e-15)


def test_onsets_strictly_increasing_and_separated():
    classes = make_gesture_classes(np.random.default_rng(5), 3)
    for seed in range(20):
        u = generate_utterance(seed, classes[seed % 3], noise=0.05)
        frames = (u.onsets * 15.0).round().astype(int)
        assert np.all(np.diff(frames) >= 3)


def test_negative_noise_rejected():
    with pytest.raises(NumericError, match="noise"):
        generate_utterance(0, _one_class(), noise=-0.1)


def test_clip_too_short_for_onsets_rejected():
    with pytest.raises(NumericError, match="too short"):
        generate_utterance(0, _one_class(), noise=0.0, n_frames=16, n_onsets=5)


# --------------------------------------------------------------------- dataset

def test_split_sizes_80_10_10():
    cfg = DatasetConfig(n_clips=100, n_classes=2, seed=0)
    ds = build_dataset(cfg)
    assert [len(ds.splits[s]) for s in ("train", "val", "test")] == [80, 10, 10]


def test_splits_disjoint_and_exhaustive():
    cfg = DatasetConfig(n_clips=60, seed=1)
    ds = build_dataset(cfg)
    seeds = [u.seed for s in ("train", "val", "test") for u in ds.splits[s]]
    assert len(seeds) == 60
    assert len(set(seeds)) == 60


def test_class_balance_within_one_per_split():
    cfg = DatasetConfig(n_clips=100, n_classes=3, seed=2)
    ds = build_dataset(cfg)
    for split in ("train", "val", "test"):
        counts = np.bincount([u.class_id for u in ds.splits[split]], minlength=3)
        assert counts.max() - counts.min() <= 1


def test_dataset_rebuild_is_identical():
    cfg = DatasetConfig(n_clips=24, seed=3)
    a, b = build_dataset(cfg), build_dataset(cfg)
    for split in ("train", "val", "test"):
        for ua, ub in zip(a.splits[split], b.splits[split]):
            assert ua.class_id == ub.class_id
            assert np.array_equal(ua.audio, ub.audio)
            for p in PART_ORDER:
                assert np.array_equal(ua.motion[p].frames, ub.motion[p].frames)


def test_dataset_files_byte_identical(tmp_path):
    cfg = DatasetConfig(n_clips=12, seed=4)
    save_dataset(build_dataset(cfg), tmp_path / "a")
    save_dataset(build_dataset(cfg), tmp_path / "b")
    for name in ("manifest.json", "classes.bin", "train.bin", "val.bin", "test.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_save_load_roundtrip(tmp_path):
    cfg = DatasetConfig(n_clips=12, seed=5)
    ds = build_dataset(cfg)
    save_dataset(ds, tmp_path / "d")
    again = load_dataset(tmp_path / "d")
    assert again.config == cfg
    for split in ("train", "val", "test"):
        assert len(again.splits[split]) == len(ds.splits[split])
        for ua, ub in zip(ds.splits[split], again.splits[split]):
            assert ua.class_id == ub.class_id and ua.seed == ub.seed
            assert np.array_equal(ua.audio, ub.audio)
            assert np.array_equal(ua.text, ub.text)
            assert np.array_equal(ua.onsets, ub.onsets)
            for p in PART_ORDER:
                assert np.array_equal(ua.motion[p].frames, ub.motion[p].frames)
    for orig, loaded in zip(ds.classes, again.classes):
        assert np.array_equal(orig.text_anchor, loaded.text_anchor)
        assert orig.freqs == loaded.freqs


def test_infeasible_ratios_rejected():
    with pytest.raises(NumericError, match="ratios"):
        DatasetConfig(ratios=(0.8, 0.3, 0.1))
    with pytest.raises(NumericError, match="ratios"):
        DatasetConfig(ratios=(1.2, -0.1, -0.1))


def test_fewer_clips_than_classes_rejected():
    with pytest.raises(NumericError, match="n_clips"):
        DatasetConfig(n_clips=2, n_classes=3)


def test_within_class_fgd_below_cross_class():
    classes = make_gesture_classes(np.random.default_rng(6), 2)
    group_a1 = [generate_utterance(1000 + i, classes[0], 0.1).motion for i in range(32)]
    group_a2 = [generate_utterance(2000 + i, classes[0], 0.1).motion for i in range(32)]
    group_b = [generate_utterance(3000 + i, classes[1], 0.1).motion for i in range(32)]
    codecs = {p: init_part_codec(np.random.default_rng(42), p) for p in PART_ORDER}
    fa1 = motion_features(group_a1, codecs)
    fa2 = motion_features(group_a2, codecs)
    fb = motion_features(group_b, codecs)
    assert fgd(fa1, fa2) < fgd(fa1, fb)


# ------------------------------------------------------------------- negatives

def _mismatch_inputs(class_ids, seed=0):
    rng = np.random.default_rng(seed)
    n = len(class_ids)
    z1 = rng.standard_normal((n, 4, 6))
    cond = rng.standard_normal((n, 4, 5))
    return z1, cond


def test_mismatch_two_items_is_a_swap():
    z1, cond = _mismatch_inputs([0, 1])
    out = mismatch_pairing(z1, cond, [0, 1], np.random.default_rng(0))
    assert isinstance(out, NegativePairing)
    assert list(out.permutation) == [1, 0]
    assert np.array_equal(out.latents, z1[[1, 0]])
    assert np.array_equal(out.conditions, cond[[1, 0]])


def test_mismatch_prefers_cross_class():
    class_ids = np.array([0, 0, 1, 1, 2, 2, 3, 3] * 2)
    z1, cond = _mismatch_inputs(class_ids, seed=1)
    rng = np.random.default_rng(2)
    cross = 0
    total = 0
    for _ in range(1000):
        out = mismatch_pairing(z1, cond, class_ids, rng)
        cross += int(np.sum(class_ids[out.permutation] != class_ids))
        total += len(class_ids)
    assert cross / total > 0.95


def test_mismatch_all_same_class_warns_and_falls_back(caplog):
    class_ids = [1, 1, 1, 1]
    z1, cond = _mismatch_inputs(class_ids, seed=3)
    with caplog.at_level("WARNING", logger="cfmlab.synthdata"):
        out = mismatch_pairing(z1, cond, class_ids, np.random.default_rng(4))
    assert "plain derangement" in caplog.text
    assert np.all(out.permutation != np.arange(4))


def test_mismatch_majority_class_still_valid_derangement():
    # five of six items share a class, so an all-cross assignment is
    # impossible; the result must still be a derangement
    class_ids = [0, 0, 0, 0, 0, 1]
    z1, cond = _mismatch_inputs(class_ids, seed=9)
    out = mismatch_pairing(z1, cond, class_ids, np.random.default_rng(10))
    assert np.all(out.permutation != np.arange(6))
    assert sorted(out.permutation) == list(range(6))


def test_mismatch_singleton_batch_rejected():
    z1, cond = _mismatch_inputs([0])
    with pytest.raises(NumericError, match=">= 2"):
        mismatch_pairing(z1, cond, [0], np.random.default_rng(5))


def test_mismatch_modal_modes_rebuild_condition():
    rng = np.random.default_rng(6)
    net = init_velocity_net(rng, d_model=4, d_cond=6, d_audio=3, d_text=3, d_s=8)
    class_ids = [0, 1, 0, 1]
    audio = rng.standard_normal((4, 5, 3))
    text = rng.standard_normal((4, 5, 3))
    z1, cond = _mismatch_inputs(class_ids, seed=7)
    out = mismatch_pairing(z1, cond, class_ids, np.random.default_rng(8),
                           mode="permute-text", audio=audio, text=text, net=net)
    assert np.array_equal(out.latents, z1[out.permutation])
    from cfmlab.flow import build_condition_batch

    expected = build_condition_batch(audio, text[out.permutation], net).data
    assert np.allclose(out.conditions, expected)
