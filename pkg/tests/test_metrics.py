import math

import mpmath
import numpy as np
import pytest

from cfmlab.alignment import composite_latent
from cfmlab.codec import (
    PART_JOINTS,
    PART_ORDER,
    MotionClip,
    encode_part,
    init_part_codec,
)
from cfmlab.metrics import (
    FeatureSet,
    MetricReport,
    OnsetTrack,
    _psd_sqrt,
    beat_consistency,
    diversity,
    extract_kinematic_peaks,
    fgd,
    motion_features,
)
from cfmlab.numerics import NumericError


# ----------------------------------------------------------------------- types

def test_feature_set_validation():
    FeatureSet(np.zeros((3, 2)))
    with pytest.raises(NumericError):
        FeatureSet(np.zeros(3))
    with pytest.raises(NumericError):
        FeatureSet(np.array([[np.nan, 0.0]]))
    with pytest.raises(NumericError):
        FeatureSet(np.zeros((2, 2)), provenance="synthetic")


def test_onset_track_validation():
    OnsetTrack([0.1, 0.5, 0.9], duration=1.0)
    OnsetTrack([], duration=1.0)
    with pytest.raises(NumericError, match="strictly increasing"):
        OnsetTrack([0.5, 0.5], duration=1.0)
    with pytest.raises(NumericError, match="within"):
        OnsetTrack([0.5, 1.5], duration=1.0)
    with pytest.raises(NumericError, match="duration"):
        OnsetTrack([0.1], duration=0.0)


def test_metric_report_clamps_tiny_negative_fgd():
    rep = MetricReport(fgd=-5e-9, bc=0.5, diversity=1.0, config_hash="h",
                       n_real=4, n_gen=4)
    assert rep.fgd == 0.0


def test_metric_report_rejects_bad_fields():
    with pytest.raises(NumericError):
        MetricReport(fgd=-1e-6, bc=0.5, diversity=1.0, config_hash="h",
                     n_real=2, n_gen=2)
    with pytest.raises(NumericError):
        MetricReport(fgd=0.0, bc=1.5, diversity=1.0, config_hash="h",
                     n_real=2, n_gen=2)
    with pytest.raises(NumericError):
        MetricReport(fgd=0.0, bc=0.5, diversity=-1.0, config_hash="h",
                     n_real=2, n_gen=2)


def test_metric_report_json_roundtrip():
    rep = MetricReport(fgd=1.25, bc=0.75, diversity=3.5, config_hash="abc",
                       n_real=48, n_gen=48)
    again = MetricReport.from_json(rep.to_json())
    assert again == rep
    import json

    payload = json.loads(rep.to_json())
    assert set(payload) == {"fgd", "bc", "diversity", "n_real", "n_gen",
                            "config_hash"}


# ------------------------------------------------------------------------- fgd

def test_fgd_equal_variance_unit_mean_shift_is_one():
    # two-point sets share the sample variance exactly, so only the squared
    # mean difference survives
    a = np.array([[-0.3], [0.3]])
    b = np.array([[0.7], [1.3]])
    assert abs(fgd(a, b) - 1.0) <= 1e-9


def test_fgd_variance_mismatch_case_is_one():
    # stats (0, 1) vs (0, 4): 0 + 1 + 4 - 2*sqrt(4) = 1
    d = math.sqrt(0.5)
    a = np.array([[-d], [d]])
    b = np.array([[-2 * d], [2 * d]])
    assert abs(fgd(a, b) - 1.0) <= 1e-9


def test_fgd_self_distance_is_zero():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, 5))
    assert fgd(a, a) <= 1e-8


def test_fgd_symmetry():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((16, 4))
    b = 0.5 * rng.standard_normal((12, 4)) + 0.3
    assert abs(fgd(a, b) - fgd(b, a)) <= 1e-8


def _fgd_mpmath_oracle(a, b):
    mpmath.mp.dps = 60
    n_a, d = a.shape
    n_b = b.shape[0]
    am = mpmath.matrix(a.tolist())
    bm = mpmath.matrix(b.tolist())
    mu_a = [mpmath.fsum(am[i, j] for i in range(n_a)) / n_a for j in range(d)]
    mu_b = [mpmath.fsum(bm[i, j] for i in range(n_b)) / n_b for j in range(d)]

    def cov(m, mu, n):
        out = mpmath.zeros(d, d)
        for i in range(d):
            for j in range(d):
                out[i, j] = mpmath.fsum(
                    (m[k, i] - mu[i]) * (m[k, j] - mu[j]) for k in range(n)
                ) / (n - 1)
        return out

    cov_a, cov_b = cov(am, mu_a, n_a), cov(bm, mu_b, n_b)
    root = mpmath.sqrtm(cov_a * cov_b)
    mean_term = mpmath.fsum((x - y) ** 2 for x, y in zip(mu_a, mu_b))
    trace = lambda m: mpmath.fsum(m[i, i] for i in range(d))
    return float(mean_term + trace(cov_a) + trace(cov_b)
                 - 2 * mpmath.re(trace(root)))


def test_fgd_matches_extended_precision_oracle_noncommuting():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((10, 2)) @ np.array([[1.0, 0.7], [0.0, 0.5]])
    b = rng.standard_normal((9, 2)) @ np.array([[0.4, 0.0], [1.1, 0.9]]) + 0.2
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    assert np.max(np.abs(cov_a @ cov_b - cov_b @ cov_a)) > 1e-3
    assert abs(fgd(a, b) - _fgd_mpmath_oracle(a, b)) <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_fgd_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((14, 4))
    b = rng.standard_normal((11, 4)) * 1.3 + 0.4
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert abs(fgd(a @ q, b @ q) - fgd(a, b)) <= 1e-6


def test_fgd_input_validation():
    with pytest.raises(NumericError, match="at least 2"):
        fgd(np.zeros((1, 3)), np.zeros((4, 3)))
    with pytest.raises(NumericError, match="dims differ"):
        fgd(np.zeros((4, 3)), np.zeros((4, 2)))


def test_psd_sqrt_clamps_tiny_negative_eigenvalues():
    mat = np.diag([1.0, -1e-10])
    root = _psd_sqrt(mat)
    assert np.allclose(root, np.diag([1.0, 0.0]))


def test_psd_sqrt_rejects_indefinite_matrix():
    with pytest.raises(NumericError, match="eigenvalue"):
        _psd_sqrt(np.diag([1.0, -1.0]))


def test_psd_sqrt_squares_back():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((5, 5))
    mat = m @ m.T
    root = _psd_sqrt(mat)
    assert np.allclose(root @ root, mat, atol=1e-10)


# -------------------------------------------------------------- kinematic peaks

def _clip_from_speed(speed, part="hand"):
    """Build a 1-joint-dominant clip whose summed speed sequence equals
    `speed` (one joint moves monotonically by the requested amounts)."""
    j = PART_JOINTS[part]
    frames = np.zeros((len(speed) + 1, j))
    frames[1:, 0] = np.cumsum(speed)
    return {part: MotionClip(part, frames)}


def test_constant_motion_has_no_peaks():
    clip = {"hand": MotionClip("hand", np.ones((12, PART_JOINTS["hand"])))}
    track = extract_kinematic_peaks(clip)
    assert track.times.size == 0
    assert track.duration == 12 / 15.0


def test_single_triangular_bump_peaks_at_apex():
    speed = np.array([0, 0, 1, 2, 3, 2, 1, 0, 0], dtype=float)
    track = extract_kinematic_peaks(_clip_from_speed(speed))
    assert track.times.size == 1
    assert track.times[0] == pytest.approx(4 / 15.0)


def test_planted_peaks_recovered_within_one_frame():
    rng = np.random.default_rng(4)
    planted = [8, 20, 33, 47]
    speed = np.zeros(63)
    for f in planted:
        for k in range(-3, 4):
            if 0 <= f + k < 63:
                speed[f + k] += 2.0 * 0.5 * (1 + math.cos(math.pi * k / 3.0))
    speed += 0.05 * rng.random(63)
    track = extract_kinematic_peaks(_clip_from_speed(speed))
    assert track.times.size == len(planted)
    for t, f in zip(track.times, planted):
        assert abs(t - f / 15.0) <= 1.0 / 15.0 + 1e-12


def test_peaks_summed_across_parts():
    speed_hand = np.array([0, 0, 5, 0, 0, 0, 0, 0], dtype=float)
    speed_face = np.array([0, 0, 0, 0, 0, 5, 0, 0], dtype=float)
    clips = {**_clip_from_speed(speed_hand, "hand"),
             **_clip_from_speed(speed_face, "face")}
    track = extract_kinematic_peaks(clips)
    assert track.times == pytest.approx([2 / 15.0, 5 / 15.0])


def test_min_separation_suppresses_adjacent_peaks():
    speed = np.array([0, 0, 3, 0, 4, 0, 0, 0], dtype=float)
    track = extract_kinematic_peaks(_clip_from_speed(speed), min_separation=3)
    assert track.times == pytest.approx([4 / 15.0])


def test_too_short_clip_rejected():
    clip = {"hand": MotionClip("hand", np.zeros((2, PART_JOINTS["hand"])))}
    with pytest.raises(NumericError, match="at least 3 frames"):
        extract_kinematic_peaks(clip)


def test_mismatched_part_lengths_rejected():
    clips = {"hand": MotionClip("hand", np.zeros((8, 24))),
             "face": MotionClip("face", np.zeros((6, 16)))}
    with pytest.raises(NumericError, match="disagree"):
        extract_kinematic_peaks(clips)


# ------------------------------------------------------------ beat consistency

def test_bc_coincident_peaks_is_exactly_one():
    peaks = OnsetTrack([0.2, 0.5, 0.8], duration=1.0)
    assert beat_consistency(peaks, peaks, sigma=0.1) == 1.0


def test_bc_sigma_sqrt2_offset_is_exp_minus_one():
    sigma = 0.1
    onset = OnsetTrack([0.5], duration=2.0)
    peak = OnsetTrack([0.5 + sigma * math.sqrt(2.0)], duration=2.0)
    assert beat_consistency(peak, onset, sigma=sigma) == pytest.approx(
        math.exp(-1.0), abs=1e-12)


def test_bc_random_tracks_match_double_loop():
    rng = np.random.default_rng(5)
    peaks = OnsetTrack(np.sort(rng.uniform(0, 10, size=7)), duration=10.0)
    onsets = OnsetTrack(np.sort(rng.uniform(0, 10, size=5)), duration=10.0)
    sigma = 0.25
    expected = 0.0
    for p in peaks.times:
        best = min((p - a) ** 2 for a in onsets.times)
        expected += math.exp(-best / (2 * sigma * sigma))
    expected /= len(peaks.times)
    assert beat_consistency(peaks, onsets, sigma=sigma) == pytest.approx(
        expected, abs=1e-12)


def test_bc_empty_motion_is_zero_and_empty_audio_errors():
    onsets = OnsetTrack([0.5], duration=1.0)
    assert beat_consistency(OnsetTrack([], duration=1.0), onsets) == 0.0
    with pytest.raises(NumericError, match="empty"):
        beat_consistency(onsets, OnsetTrack([], duration=1.0))


def test_bc_rejects_nonpositive_sigma():
    onsets = OnsetTrack([0.5], duration=1.0)
    with pytest.raises(NumericError, match="sigma"):
        beat_consistency(onsets, onsets, sigma=0.0)


def test_bc_monotone_in_offset():
    onsets = OnsetTrack([1.0], duration=4.0)
    values = [beat_consistency(OnsetTrack([1.0 + off], duration=4.0), onsets)
              for off in np.linspace(0.0, 1.0, 11)]
    assert all(x >= y - 1e-15 for x, y in zip(values, values[1:]))
    assert all(0.0 <= v <= 1.0 for v in values)


# ------------------------------------------------------------------- diversity

def test_diversity_identical_samples_is_zero():
    feats = np.tile([1.0, 2.0, 3.0], (6, 1))
    assert diversity(FeatureSet(feats)) == 0.0


def test_diversity_two_samples_is_their_distance():
    a = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert diversity(a) == pytest.approx(5.0, abs=1e-12)


def test_diversity_matches_brute_force():
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((50, 8))
    total, count = 0.0, 0
    for i in range(50):
        for j in range(i + 1, 50):
            total += float(np.linalg.norm(feats[i] - feats[j]))
            count += 1
    assert diversity(feats) == pytest.approx(total / count, abs=1e-12)


def test_diversity_translation_invariant_and_scales():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((12, 3))
    base = diversity(feats)
    assert diversity(feats + 100.0) == pytest.approx(base, abs=1e-9)
    assert diversity(feats * 4.0) == pytest.approx(4.0 * base, rel=1e-12)


def test_diversity_needs_two_samples():
    with pytest.raises(NumericError, match="at least 2"):
        diversity(np.zeros((1, 3)))


# ------------------------------------------------------------ feature extractor

def test_motion_features_match_manual_pipeline():
    rng = np.random.default_rng(8)
    codecs = {p: init_part_codec(rng, p, downsample=4, d_g=3) for p in PART_ORDER}
    clips = []
    for _ in range(3):
        clips.append({p: MotionClip(p, rng.standard_normal((16, PART_JOINTS[p])))
                      for p in PART_ORDER})
    feats = motion_features(clips, codecs, scale=2.0)
    assert feats.features.shape == (3, 12)
    latents = {p: encode_part(clips[0][p], codecs[p]) for p in PART_ORDER}
    manual = composite_latent(latents, 2.0).sequence.mean(axis=0)
    assert np.allclose(feats.features[0], manual, atol=1e-12)


def test_motion_features_deterministic_and_tagged():
    rng = np.random.default_rng(9)
    codecs = {p: init_part_codec(rng, p, downsample=4, d_g=2) for p in PART_ORDER}
    clips = [{p: MotionClip(p, np.ones((8, PART_JOINTS[p]))) for p in PART_ORDER}
             for _ in range(2)]
    a = motion_features(clips, codecs, provenance="generated")
    b = motion_features(clips, codecs, provenance="generated")
    assert np.array_equal(a.features, b.features)
    assert a.provenance == "generated"


def test_motion_features_missing_part_rejected():
    rng = np.random.default_rng(10)
    codecs = {p: init_part_codec(rng, p, downsample=4, d_g=2) for p in PART_ORDER}
    clips = [{"hand": MotionClip("hand", np.zeros((8, 24)))}]
    with pytest.raises(NumericError, match="missing parts"):
        motion_features(clips, codecs)
