"""Evaluation metrics: Fréchet gesture distance, beat consistency, diversity.

Features for the distributional metrics live in the frozen stage-1 space:
each clip's parts are encoded, concatenated into the composite latent, and
mean-pooled over time, so real and generated motion are compared in the same
space the generator is trained to hit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks
from scipy.spatial.distance import pdist

from .alignment import composite_latent
from .codec import PART_ORDER, encode_part
from .numerics import NumericError, no_grad

__all__ = [
    "FeatureSet",
    "OnsetTrack",
    "MetricReport",
    "fgd",
    "extract_kinematic_peaks",
    "beat_consistency",
    "diversity",
    "motion_features",
]

PROVENANCES = ("real", "generated")


@dataclass
class FeatureSet:
    features: np.ndarray  # (N, d_f)
    provenance: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise NumericError(f"features must be (N, d_f), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise NumericError("non-finite feature values")
        if self.provenance not in PROVENANCES:
            raise NumericError(f"provenance must be one of {PROVENANCES}")

    @property
    def n(self):
        return self.features.shape[0]


@dataclass
class OnsetTrack:
    times: np.ndarray  # strictly increasing, seconds
    duration: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.duration = float(self.duration)
        if self.times.ndim != 1:
            raise NumericError(f"onset times must be 1-D, got shape {self.times.shape}")
        if not self.duration > 0:
            raise NumericError(f"clip duration must be positive, got {self.duration}")
        if np.any(np.diff(self.times) <= 0):
            raise NumericError("onset times must be strictly increasing")
        if self.times.size and (self.times[0] < 0 or self.times[-1] > self.duration):
            raise NumericError("onset times must lie within [0, duration]")


@dataclass
class MetricReport:
    fgd: float
    bc: float
    diversity: float
    config_hash: str
    n_real: int
    n_gen: int

    def __post_init__(self):
        self.fgd = float(self.fgd)
        if self.fgd < -1e-8:
            raise NumericError(f"fgd {self.fgd} below numerical slack")
        self.fgd = max(self.fgd, 0.0)
        self.bc = float(self.bc)
        if not 0.0 <= self.bc <= 1.0:
            raise NumericError(f"beat consistency {self.bc} outside [0, 1]")
        self.diversity = float(self.diversity)
        if self.diversity < 0.0:
            raise NumericError(f"diversity {self.diversity} negative")

    def to_json(self):
        return json.dumps(
            {"fgd": self.fgd, "bc": self.bc, "diversity": self.diversity,
             "n_real": self.n_real, "n_gen": self.n_gen,
             "config_hash": self.config_hash},
            sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        return cls(fgd=payload["fgd"], bc=payload["bc"],
                   diversity=payload["diversity"],
                   config_hash=payload["config_hash"],
                   n_real=payload["n_real"], n_gen=payload["n_gen"])


# ------------------------------------------------------------------------ fgd

def _as_features(x, min_n=2):
    feats = x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)
    if feats.ndim != 2:
        raise NumericError(f"features must be (N, d_f), got shape {feats.shape}")
    if feats.shape[0] < min_n:
        raise NumericError(
            f"need at least {min_n} samples for distributional metrics, got {feats.shape[0]}")
    if not np.all(np.isfinite(feats)):
        raise NumericError("non-finite feature values")
    return feats


def _psd_sqrt(mat, tol=1e-8):
    """Square root of a symmetric PSD matrix by eigendecomposition; tiny
    negative eigenvalues (> -tol) are clamped, anything below is an error."""
    vals, vecs = np.linalg.eigh(mat)
    if np.any(vals < -tol):
        raise NumericError(
            f"matrix square root failed: eigenvalue {vals.min():.3e} < -{tol:g}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fgd(real, gen):
    """||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}) with sample
    covariances (1/(N-1)); the cross term is computed through the symmetric
    product S_r^{1/2} S_g S_r^{1/2} so the eigendecomposition stays real."""
    a = _as_features(real)
    b = _as_features(gen)
    if a.shape[1] != b.shape[1]:
        raise NumericError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = 0.5 * (inner + inner.T)
    vals = np.linalg.eigvalsh(inner)
    # rank-deficient covariances put many eigenvalues at the noise floor,
    # where sqrt amplifies them to ~d * sqrt(||inner|| * eps); the slack must
    # cover that, so it is relative to the problem scale, not absolute
    scale = max(1.0, float(np.trace(cov_a) + np.trace(cov_b)))
    if np.any(vals < -1e-6 * max(1.0, float(vals.max(initial=0.0)))):
        raise NumericError(
            f"matrix square root failed: eigenvalue {vals.min():.3e} too negative")
    trace_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    if value < -1e-6 * scale:
        raise NumericError(f"fgd evaluated to {value}, below numerical slack")
    return max(value, 0.0)


# ------------------------------------------------------------- kinematic peaks

def extract_kinematic_peaks(motion, threshold_std=0.5, min_separation=3):
    """Local maxima of the per-frame joint-speed norm summed over parts.

    Speed index i is the transition frame i -> i+1 and is reported as time
    i / fps; peaks must clear mean + threshold_std * std and sit at least
    min_separation speed samples apart.
    """
    clips = motion.parts if hasattr(motion, "parts") else motion
    if not clips:
        raise NumericError("no motion clips to extract peaks from")
    counts = {c.frames.shape[0] for c in clips.values()}
    rates = {c.fps for c in clips.values()}
    if len(counts) != 1 or len(rates) != 1:
        raise NumericError("parts disagree on frame count or fps")
    n_frames, fps = counts.pop(), rates.pop()
    if n_frames < 3:
        raise NumericError(f"need at least 3 frames to extract peaks, got {n_frames}")
    speed = np.zeros(n_frames - 1)
    for clip in clips.values():
        speed += np.linalg.norm(np.diff(clip.frames, axis=0), axis=1)
    height = speed.mean() + threshold_std * speed.std()
    idx, _ = find_peaks(speed, height=height, distance=min_separation)
    return OnsetTrack(times=idx / fps, duration=n_frames / fps)


# ------------------------------------------------------------ beat consistency

def beat_consistency(motion_peaks, audio_onsets, sigma=0.1):
    """Mean Gaussian affinity of each motion peak to its nearest audio onset."""
    if not sigma > 0:
        raise NumericError(f"kernel width sigma must be positive, got {sigma}")
    if audio_onsets.times.size == 0:
        raise NumericError("audio onset track is empty")
    if motion_peaks.times.size == 0:
        return 0.0
    delta = motion_peaks.times[:, None] - audio_onsets.times[None, :]
    nearest_sq = np.min(delta * delta, axis=1)
    return float(np.mean(np.exp(-nearest_sq / (2.0 * sigma * sigma))))


# ------------------------------------------------------------------- diversity

def diversity(samples):
    """Mean L2 distance over all unordered sample pairs."""
    feats = _as_features(samples)
    return float(np.mean(pdist(feats)))


# ------------------------------------------------------------ feature extractor

def motion_features(clips, codecs, scale=2.0, provenance="real"):
    """Frozen stage-1 feature space: encode each part, build the composite
    latent, mean-pool over time; one d_G row per clip."""
    rows = []
    with no_grad():
        for item in clips:
            parts_map = item.parts if hasattr(item, "parts") else item
            missing = [p for p in PART_ORDER if p not in parts_map]
            if missing:
                raise NumericError(f"clip missing parts for feature extraction: {missing}")
            latents = {p: encode_part(parts_map[p], codecs[p]) for p in PART_ORDER}
            comp = composite_latent(latents, scale)
            rows.append(comp.sequence.mean(axis=0))
    if not rows:
        raise NumericError("no clips given to motion_features")
    return FeatureSet(np.asarray(rows), provenance=provenance)
