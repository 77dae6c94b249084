"""Procedural (audio, text, motion) triples with controllable gesture classes.

Each class owns near-orthogonal text/audio anchor vectors and a motion
template: per-part sinusoidal sway plus raised-cosine velocity strokes fired
at planted onset times, with a class-specific part-amplitude signature (class
0 hand-dominant, class 1 upper-dominant, ...), so cross-part structure
carries the class identity. Audio features mark every onset with a pulse on
their last channel, which is what ties generated motion back to the beat.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import PART_JOINTS, PART_ORDER, MotionClip
from .flow import NEGATIVE_MODES, make_incongruent_batch, sample_derangement
from .numerics import NumericError

__all__ = [
    "SPLITS",
    "GestureClass",
    "SyntheticUtterance",
    "DatasetConfig",
    "Dataset",
    "make_gesture_classes",
    "generate_utterance",
    "build_dataset",
    "save_dataset",
    "load_dataset",
    "mismatch_pairing",
]

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
STROKE_HALF_WIDTH = 3   # raised-cosine velocity bump spans 6 frames
STROKE_AMPLITUDE = 2.0
BASE_SWAY_AMPLITUDE = 0.3
PULSE_AMPLITUDE = 1.5   # onset marker on the last audio channel
POSITION_DECAY = 0.95   # per-frame relaxation toward the rest pose


@dataclass
class GestureClass:
    id: int
    freqs: dict           # part -> base sway frequency (Hz)
    part_weights: dict    # part -> stroke amplitude weight
    phases: dict          # part -> (J,) per-joint phase offsets
    stroke_dirs: dict     # part -> (J,) unit stroke direction
    text_anchor: np.ndarray
    audio_anchor: np.ndarray

    def __post_init__(self):
        if self.id < 0:
            raise NumericError(f"class id must be non-negative, got {self.id}")
        self.text_anchor = np.asarray(self.text_anchor, dtype=np.float64)
        self.audio_anchor = np.asarray(self.audio_anchor, dtype=np.float64)
        for anchor, name in ((self.text_anchor, "text"), (self.audio_anchor, "audio")):
            if abs(float(np.linalg.norm(anchor)) - 1.0) > 1e-9:
                raise NumericError(f"{name} anchor must be unit norm")


@dataclass
class SyntheticUtterance:
    class_id: int
    audio: np.ndarray    # (L, d_a) latent-rate features
    text: np.ndarray     # (L, d_t)
    motion: dict         # part -> MotionClip
    onsets: np.ndarray   # planted onset times, seconds
    seed: int

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        self.onsets = np.asarray(self.onsets, dtype=np.float64)
        missing = [p for p in PART_ORDER if p not in self.motion]
        if missing:
            raise NumericError(f"utterance missing motion parts: {missing}")
        if self.onsets.size and np.any(np.diff(self.onsets) <= 0):
            raise NumericError("planted onsets must be strictly increasing")


@dataclass
class DatasetConfig:
    n_classes: int = 3
    n_clips: int = 512
    n_frames: int = 64
    fps: float = 15.0
    d_audio: int = 16
    d_text: int = 16
    downsample: int = 4
    noise: float = 0.05
    n_onsets: int = 4
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.n_classes < 1:
            raise NumericError(f"n_classes: need at least one class, got {self.n_classes}")
        if self.n_clips < self.n_classes:
            raise NumericError(
                f"n_clips: must be >= n_classes, got {self.n_clips} < {self.n_classes}")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) \
                or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise NumericError(f"ratios: split ratios must be 3 non-negatives "
                               f"summing to 1, got {self.ratios}")
        if self.noise < 0:
            raise NumericError(f"noise: level must be non-negative, got {self.noise}")
        if self.n_frames % self.downsample != 0:
            raise NumericError(
                f"n_frames: {self.n_frames} not divisible by downsample {self.downsample}")


@dataclass
class Dataset:
    config: DatasetConfig
    classes: list
    splits: dict  # split -> list[SyntheticUtterance]


# -------------------------------------------------------------------- classes

def make_gesture_classes(rng, n_classes=3, d_text=16, d_audio=16):
    """Classes with orthonormal anchors (pairwise cosine 0 < 0.5 by
    construction) and distinct part-amplitude signatures."""
    if n_classes > min(d_text, d_audio):
        raise NumericError(
            f"cannot fit {n_classes} orthogonal anchors in dim "
            f"{min(d_text, d_audio)}")
    qt, _ = np.linalg.qr(rng.standard_normal((d_text, n_classes)))
    qa, _ = np.linalg.qr(rng.standard_normal((d_audio, n_classes)))
    classes = []
    for c in range(n_classes):
        weights = {p: 0.4 for p in PART_ORDER}
        weights[PART_ORDER[c % len(PART_ORDER)]] = 2.0
        freqs = {p: float(rng.uniform(0.5, 1.5)) for p in PART_ORDER}
        phases = {p: rng.uniform(0.0, 2.0 * math.pi, PART_JOINTS[p])
                  for p in PART_ORDER}
        dirs = {}
        for p in PART_ORDER:
            v = rng.standard_normal(PART_JOINTS[p])
            dirs[p] = v / np.linalg.norm(v)
        classes.append(GestureClass(
            id=c, freqs=freqs, part_weights=weights, phases=phases,
            stroke_dirs=dirs, text_anchor=qt[:, c], audio_anchor=qa[:, c]))
    cosines = np.abs(qt.T @ qt - np.eye(n_classes))
    if cosines.size and cosines.max() >= 0.5:
        raise NumericError("class anchors insufficiently separated")
    return classes


# ------------------------------------------------------------------ utterance

def _plant_onsets(rng, n_frames, n_onsets):
    """Jittered-grid onset frames: at least 3 apart (so peak extraction with
    its default separation can recover every one) and clear of the clip ends."""
    lo, hi = STROKE_HALF_WIDTH + 1, n_frames - STROKE_HALF_WIDTH - 3
    span = hi - lo
    if n_onsets < 1 or span < 3 * n_onsets:
        raise NumericError(f"clip of {n_frames} frames too short for {n_onsets} onsets")
    spacing = span / n_onsets
    jitter = min(2, max(0, int((spacing - 3.0) / 2.0)))
    frames = np.asarray(
        [int(round(lo + spacing * (i + 0.5))) + int(rng.integers(-jitter, jitter + 1))
         for i in range(n_onsets)], dtype=np.int64)
    if np.any(np.diff(frames) < 3):
        raise NumericError("planted onsets landed too close together")
    return frames


def generate_utterance(seed, gclass, noise, n_frames=64, fps=15.0,
                       downsample=4, n_onsets=4):
    """Deterministic (seed, class, noise) -> one congruent triple.

    Strokes are planted in velocity space so the summed joint-speed apex
    lands exactly on each onset frame; audio features carry a pulse on their
    last channel at the matching latent step.
    """
    if noise < 0:
        raise NumericError(f"noise level must be non-negative, got {noise}")
    rng = np.random.default_rng(seed)
    onset_frames = _plant_onsets(rng, n_frames, n_onsets)
    times = np.arange(n_frames - 1, dtype=np.float64) / fps

    motion = {}
    for part in PART_ORDER:
        j = PART_JOINTS[part]
        sway = (BASE_SWAY_AMPLITUDE / math.sqrt(j)) * np.sin(
            2.0 * math.pi * gclass.freqs[part] * times[:, None]
            + gclass.phases[part][None, :])
        vel = sway.copy()
        # every stroke of a class pushes along that class's signature
        # direction, so repeated beats read as the same gesture
        direction = gclass.stroke_dirs[part]
        for f in onset_frames:
            for k in range(-STROKE_HALF_WIDTH, STROKE_HALF_WIDTH + 1):
                if 0 <= f + k < n_frames - 1:
                    bump = 0.5 * (1.0 + math.cos(math.pi * k / STROKE_HALF_WIDTH))
                    vel[f + k] += (STROKE_AMPLITUDE * gclass.part_weights[part]
                                   * bump * direction)
        frames = np.zeros((n_frames, j))
        frames[0] = 0.2 * rng.standard_normal(j)
        # leaky integration: joints relax toward rest between strokes instead
        # of drifting without bound
        for t in range(1, n_frames):
            frames[t] = POSITION_DECAY * frames[t - 1] + vel[t - 1]
        frames += noise * rng.standard_normal((n_frames, j))
        motion[part] = MotionClip(part, frames, fps=fps)

    n_latent = n_frames // downsample
    audio = np.tile(gclass.audio_anchor, (n_latent, 1))
    text = np.tile(gclass.text_anchor, (n_latent, 1))
    audio += noise * rng.standard_normal(audio.shape)
    text += noise * rng.standard_normal(text.shape)
    for f in onset_frames:
        audio[f // downsample, -1] += PULSE_AMPLITUDE

    return SyntheticUtterance(
        class_id=gclass.id, audio=audio, text=text, motion=motion,
        onsets=onset_frames / fps, seed=int(seed))


# -------------------------------------------------------------------- dataset

def _split_sizes(n, ratios):
    """Largest-remainder apportionment, so sizes always sum to n."""
    exact = [r * n for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    remainders = sorted(range(3), key=lambda i: exact[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[remainders[i]] += 1
    return dict(zip(SPLITS, sizes))


def build_dataset(config):
    """Class-balanced, disjoint, seed-deterministic train/val/test splits."""
    rng = np.random.default_rng(config.seed)
    classes = make_gesture_classes(rng, config.n_classes, config.d_text,
                                   config.d_audio)
    clip_seeds = rng.integers(0, 2**32, size=config.n_clips)
    clips = [
        generate_utterance(int(clip_seeds[i]), classes[i % config.n_classes],
                           config.noise, n_frames=config.n_frames,
                           fps=config.fps, downsample=config.downsample,
                           n_onsets=config.n_onsets)
        for i in range(config.n_clips)
    ]
    sizes = _split_sizes(config.n_clips, config.ratios)
    splits, start = {}, 0
    for split in SPLITS:
        splits[split] = clips[start:start + sizes[split]]
        start += sizes[split]
    return Dataset(config=config, classes=classes, splits=splits)


def _stack_split(split, clips):
    tensors = {
        f"data/{split}/class": np.array([u.class_id for u in clips], dtype=np.float64),
        f"data/{split}/seed": np.array([u.seed for u in clips], dtype=np.float64),
        f"data/{split}/audio": np.stack([u.audio for u in clips]),
        f"data/{split}/text": np.stack([u.text for u in clips]),
        f"data/{split}/onsets": np.stack([u.onsets for u in clips]),
    }
    for part in PART_ORDER:
        tensors[f"data/{split}/motion/{part}"] = np.stack(
            [u.motion[part].frames for u in clips])
    return tensors


def save_dataset(dataset, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    manifest = {
        "classes": cfg.n_classes,
        "n_clips": cfg.n_clips,
        "dims": {"d_audio": cfg.d_audio, "d_text": cfg.d_text,
                 "n_frames": cfg.n_frames, "downsample": cfg.downsample,
                 "n_onsets": cfg.n_onsets, "noise": cfg.noise,
                 "ratios": list(cfg.ratios)},
        "fps": cfg.fps,
        "seed": cfg.seed,
        "split_sizes": {s: len(dataset.splits[s]) for s in SPLITS},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")

    class_tensors = {
        "classes/text_anchor": np.stack([c.text_anchor for c in dataset.classes]),
        "classes/audio_anchor": np.stack([c.audio_anchor for c in dataset.classes]),
        "classes/freqs": np.array(
            [[c.freqs[p] for p in PART_ORDER] for c in dataset.classes]),
        "classes/part_weights": np.array(
            [[c.part_weights[p] for p in PART_ORDER] for c in dataset.classes]),
    }
    for part in PART_ORDER:
        class_tensors[f"classes/phases/{part}"] = np.stack(
            [c.phases[part] for c in dataset.classes])
        class_tensors[f"classes/stroke_dirs/{part}"] = np.stack(
            [c.stroke_dirs[part] for c in dataset.classes])
    save_checkpoint(out_dir / "classes.bin", class_tensors)

    for split in SPLITS:
        save_checkpoint(out_dir / f"{split}.bin",
                        _stack_split(split, dataset.splits[split]))
    return out_dir


def load_dataset(in_dir):
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    dims = manifest["dims"]
    config = DatasetConfig(
        n_classes=manifest["classes"], n_clips=manifest["n_clips"],
        n_frames=dims["n_frames"], fps=manifest["fps"],
        d_audio=dims["d_audio"], d_text=dims["d_text"],
        downsample=dims["downsample"], noise=dims["noise"],
        n_onsets=dims["n_onsets"], ratios=tuple(dims["ratios"]),
        seed=manifest["seed"])

    ct = load_checkpoint(in_dir / "classes.bin")
    classes = []
    for c in range(config.n_classes):
        classes.append(GestureClass(
            id=c,
            freqs={p: float(ct["classes/freqs"][c, i])
                   for i, p in enumerate(PART_ORDER)},
            part_weights={p: float(ct["classes/part_weights"][c, i])
                          for i, p in enumerate(PART_ORDER)},
            phases={p: ct[f"classes/phases/{p}"][c] for p in PART_ORDER},
            stroke_dirs={p: ct[f"classes/stroke_dirs/{p}"][c] for p in PART_ORDER},
            text_anchor=ct["classes/text_anchor"][c],
            audio_anchor=ct["classes/audio_anchor"][c]))

    splits = {}
    for split in SPLITS:
        t = load_checkpoint(in_dir / f"{split}.bin")
        clips = []
        for i in range(t[f"data/{split}/class"].shape[0]):
            motion = {p: MotionClip(p, t[f"data/{split}/motion/{p}"][i],
                                    fps=config.fps) for p in PART_ORDER}
            clips.append(SyntheticUtterance(
                class_id=int(t[f"data/{split}/class"][i]),
                audio=t[f"data/{split}/audio"][i],
                text=t[f"data/{split}/text"][i],
                motion=motion,
                onsets=t[f"data/{split}/onsets"][i],
                seed=int(t[f"data/{split}/seed"][i])))
        splits[split] = clips
    return Dataset(config=config, classes=classes, splits=splits)


# ------------------------------------------------------------------ negatives

def _repaired_cross_class_derangement(rng, class_ids):
    """One attempt at an all-cross-class derangement: draw a derangement,
    then swap away same-class assignments. Each swap keeps both positions
    cross-class, which also rules out fixed points, so the result is always
    a valid derangement even when some violations remain (e.g. when one
    class holds a majority of the batch). Returns (perm, violations)."""
    n = class_ids.shape[0]
    perm = sample_derangement(rng, n)
    for _ in range(4 * n):
        bad = np.flatnonzero(class_ids[perm] == class_ids)
        if bad.size == 0:
            return perm, 0
        i = int(rng.choice(bad))
        # a valid partner j gives i a cross-class target and keeps its own
        candidates = np.flatnonzero(
            (class_ids[perm] != class_ids[i]) & (class_ids[perm[i]] != class_ids))
        candidates = candidates[candidates != i]
        if candidates.size == 0:
            break
        j = int(rng.choice(candidates))
        perm[i], perm[j] = perm[j], perm[i]
    return perm, int(np.sum(class_ids[perm] == class_ids))


def mismatch_pairing(z1, cond, class_ids, rng, mode="permute-pair", audio=None,
                     text=None, net=None, max_tries=10):
    """Class-aware incongruent batch: resample (with repair) until every
    mismatched item comes from a different class, up to max_tries draws,
    else accept the best derangement seen; then delegate to the flow-level
    pairing."""
    if mode not in NEGATIVE_MODES:
        raise NumericError(f"unknown negative mode {mode!r}; expected {NEGATIVE_MODES}")
    class_ids = np.asarray(class_ids)
    n = class_ids.shape[0]
    if n < 2:
        raise NumericError("mismatch pairing needs batch size >= 2")
    if np.unique(class_ids).size == 1:
        logger.warning("all-same-class batch: falling back to a plain derangement")
        perm = sample_derangement(rng, n)
    else:
        perm, violations = _repaired_cross_class_derangement(rng, class_ids)
        for _ in range(max_tries - 1):
            if violations == 0:
                break
            candidate, v = _repaired_cross_class_derangement(rng, class_ids)
            if v < violations:
                perm, violations = candidate, v
    return make_incongruent_batch(z1, cond, rng, mode=mode, audio=audio,
                                  text=text, net=net, perm=perm)
