"""Inference: ODE integration over holistic latents and latent-to-motion decode.

Sampling draws z0 from a seeded standard normal, integrates the learned
velocity field from t=0 to t=1 with a fixed-step explicit scheme, projects the
result toward the quantizer's input manifold, splits it back into per-part
latents (inverting the composite concatenation), quantizes each region with
its codebook stack, and decodes the dequantized latents to motion frames.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import CompositeLatent
from .codec import (
    PART_ORDER,
    PartLatent,
    decode_part,
    rvq_dequantize,
    rvq_quantize,
)
from .flow import VelocityNet, velocity_forward
from .numerics import NumericError, Tensor, matmul, no_grad

__all__ = [
    "SCHEMES",
    "OdeConfig",
    "GeneratedMotion",
    "ManifoldProjection",
    "init_manifold_projection",
    "integrate_ode",
    "project_to_codebook_manifold",
    "split_regions",
    "quantize_regions",
    "generate",
    "write_motion_csv",
    "write_sidecar",
]

SCHEMES = ("euler", "midpoint")


@dataclass
class OdeConfig:
    n: int = 10
    scheme: str = "euler"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise NumericError(f"ODE step count must be >= 1, got {self.n}")
        if self.scheme not in SCHEMES:
            raise NumericError(
                f"unknown ODE scheme {self.scheme!r}; expected one of {SCHEMES}")

    def hash(self):
        blob = json.dumps({"n": self.n, "scheme": self.scheme, "seed": self.seed},
                          sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class GeneratedMotion:
    parts: dict      # part -> MotionClip
    latent: np.ndarray   # (L, d_G) holistic latent after projection
    codes: dict      # part -> CodeSequence
    seed: int
    config_hash: str

    def __post_init__(self):
        missing = [p for p in PART_ORDER if p not in self.parts]
        if missing:
            raise NumericError(f"generated motion missing parts: {missing}")
        counts = {self.parts[p].frames.shape[0] for p in PART_ORDER}
        if len(counts) != 1:
            raise NumericError(f"generated parts disagree on frame count: {sorted(counts)}")
        self.latent = np.asarray(self.latent, dtype=np.float64)

    @property
    def n_frames(self):
        return self.parts[PART_ORDER[0]].frames.shape[0]


@dataclass
class ManifoldProjection:
    weight: Tensor  # (d_G, d_G), identity at init

    def parameters(self):
        return [self.weight]

    def named_tensors(self):
        return {"proj/weight": self.weight}

    @classmethod
    def from_named_tensors(cls, tensors):
        try:
            return cls(weight=Tensor(np.array(tensors["proj/weight"]), requires_grad=True))
        except KeyError as exc:
            raise NumericError(f"missing projection tensor in checkpoint: {exc}") from exc


def init_manifold_projection(d_model=32):
    return ManifoldProjection(weight=Tensor(np.eye(d_model), requires_grad=True))


# ---------------------------------------------------------------- integration

def _as_field(net):
    if isinstance(net, VelocityNet):
        def field(z, t, cond):
            with no_grad():
                return velocity_forward(net, Tensor(z), t, cond).data
        return field
    if callable(net):
        return net
    raise NumericError("integrate_ode needs a VelocityNet or a callable field")


def integrate_ode(net, z0, cond, config):
    """Fixed-step explicit integration of dz/dt = v(z, t, cond) from 0 to 1.

    `net` is a VelocityNet or any callable (z, t, cond) -> dz/dt with the
    same shape as z. Straight (constant-velocity) paths are integrated
    exactly by both schemes for any step count.
    """
    field = _as_field(net)
    z = np.array(z0, dtype=np.float64)
    h = 1.0 / config.n
    for k in range(config.n):
        t = k * h
        if config.scheme == "euler":
            z = z + h * np.asarray(field(z, t, cond))
        else:
            zmid = z + 0.5 * h * np.asarray(field(z, t, cond))
            z = z + h * np.asarray(field(zmid, t + 0.5 * h, cond))
        if not np.all(np.isfinite(z)):
            raise NumericError(
                f"non-finite state after ODE step {k + 1} of {config.n} "
                f"({config.scheme})")
    return z


def project_to_codebook_manifold(latent, proj):
    """Linear d_G -> d_G map nudging integrated latents toward the quantizer's
    input distribution; identity-initialized, so a fresh head is a passthrough."""
    z = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=np.float64))
    w = proj.weight if isinstance(proj, ManifoldProjection) else proj
    w = w if isinstance(w, Tensor) else Tensor(w)
    if z.shape[-1] != w.shape[0]:
        raise NumericError(f"latent dim {z.shape[-1]} != projection dim {w.shape[0]}")
    return matmul(z, w)


# ------------------------------------------------------------- decoding chain

def split_regions(latent, dims, scale=1.0):
    """Invert the composite: slice channels in the fixed part order and
    multiply by the scale the composite divided by.

    `dims` maps part -> d_g; `latent` may be a CompositeLatent (which carries
    its own scale) or a plain (L, d_G) array.
    """
    if isinstance(latent, CompositeLatent):
        scale = latent.scale
        seq = latent.sequence
    else:
        seq = np.asarray(latent.data if isinstance(latent, Tensor) else latent,
                         dtype=np.float64)
    if seq.ndim != 2:
        raise NumericError(f"holistic latent must be (L, d_G), got {seq.shape}")
    missing = [p for p in PART_ORDER if p not in dims]
    if missing:
        raise NumericError(f"missing part dims for split: {missing}")
    widths = [int(dims[p]) for p in PART_ORDER]
    if seq.shape[1] != sum(widths):
        raise NumericError(
            f"latent dim {seq.shape[1]} != sum of part dims {sum(widths)}")
    out, offset = {}, 0
    for part, width in zip(PART_ORDER, widths):
        out[part] = PartLatent(part, seq[:, offset:offset + width] * scale)
        offset += width
    return out


def quantize_regions(parts, stacks):
    """Quantize each region's latent against its own codebook stack."""
    out = {}
    for part in PART_ORDER:
        if part not in parts:
            raise NumericError(f"missing part {part!r} in region latents")
        if part not in stacks:
            raise NumericError(f"missing codebook stack for part {part!r}")
        _, codes, _ = rvq_quantize(parts[part], stacks[part])
        out[part] = codes
    return out


def generate(net, stacks, decoders, cond, config, proj=None, scale=2.0,
             fps=15.0, config_hash=None):
    """Full sampling chain: seeded z0 -> integrate -> project -> split ->
    quantize -> dequantize -> decode each part. Deterministic given seed."""
    d_model = net.d_model if isinstance(net, VelocityNet) else sum(
        decoders[p].d_g for p in PART_ORDER)
    length = _cond_length(cond)
    rng = np.random.default_rng(config.seed)
    z0 = rng.standard_normal((length, d_model))

    z1 = integrate_ode(net, z0, cond, config)
    if proj is not None:
        with no_grad():
            z1 = project_to_codebook_manifold(z1, proj).data
    dims = {p: decoders[p].d_g for p in PART_ORDER}
    regions = split_regions(z1, dims, scale=scale)
    codes = quantize_regions(regions, stacks)
    parts = {}
    with no_grad():
        for part in PART_ORDER:
            dequantized = rvq_dequantize(codes[part], stacks[part])
            parts[part] = decode_part(dequantized, decoders[part], fps=fps)
    return GeneratedMotion(parts=parts, latent=z1, codes=codes, seed=config.seed,
                           config_hash=config_hash or config.hash())


def _cond_length(cond):
    seq = getattr(cond, "sequence", cond)
    seq = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    if seq.ndim != 2:
        raise NumericError(f"condition must be (L, d_O), got shape {seq.shape}")
    return seq.shape[0]


# ------------------------------------------------------------------ output io

def write_motion_csv(motion, path):
    """One row per (part, frame, channel), parts in fixed order; float values
    use shortest round-trip repr so identical runs produce identical bytes."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["part", "frame", "channel", "value"])
        for part in PART_ORDER:
            frames = motion.parts[part].frames
            for f in range(frames.shape[0]):
                for c in range(frames.shape[1]):
                    writer.writerow([part, f, c, repr(float(frames[f, c]))])
    return path


def write_sidecar(motion, path, condition_id):
    path = Path(path)
    payload = {
        "seed": int(motion.seed),
        "config_hash": motion.config_hash,
        "condition_id": condition_id,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path
