"""Conditional velocity field and the contrastive flow-matching objective.

The generator learns v(z_t, t, cond) over composite motion latents. Training
pairs a straight-line interpolant (constant target velocity z1 - z0) with a
repulsion term against the velocity toward a mismatched latent, built by
deranging the batch. The network is a single TCAM block (motion tokens query
the fused audio/text condition) followed by two residual neighbour-context
MLP blocks (each step mixes with its two temporal neighbours — gesture
strokes live at that scale) and a linear head; the attention output
projection starts at zero so the block is an exact residual passthrough at
init.

Motion tokens and condition both receive parameter-free sinusoidal temporal
position embeddings before cross-attention: attention is otherwise a
set operation over frames, and beat-locked motion needs the network to know
which condition frame belongs to which motion frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    NumericError,
    Tensor,
    concat,
    gelu,
    matmul,
    mean,
    mse,
    softmax,
    uniform_init,
    zeros_init,
)

__all__ = [
    "ConditionSeq",
    "FlowSample",
    "VelocityNet",
    "NegativePairing",
    "init_velocity_net",
    "build_condition",
    "build_condition_batch",
    "interpolate",
    "interpolate_batch",
    "target_velocity",
    "negative_velocity",
    "sinusoidal_time_embedding",
    "temporal_position_embedding",
    "tcam_fuse",
    "velocity_forward",
    "sample_derangement",
    "make_incongruent_batch",
    "cfm_loss",
]

NEGATIVE_MODES = ("permute-pair", "permute-text", "permute-audio")


@dataclass
class ConditionSeq:
    sequence: np.ndarray  # (L, d_O)

    def __post_init__(self):
        self.sequence = np.asarray(self.sequence, dtype=np.float64)
        if self.sequence.ndim != 2:
            raise NumericError(f"condition must be (L, d_O), got {self.sequence.shape}")
        if not np.all(np.isfinite(self.sequence)):
            raise NumericError("non-finite condition sequence")


@dataclass
class FlowSample:
    z0: np.ndarray
    z1: np.ndarray
    t: float
    zt: np.ndarray


@dataclass
class NegativePairing:
    permutation: np.ndarray   # derangement of batch indices
    conditions: np.ndarray    # (B, L, d_O) mismatched conditions
    latents: np.ndarray       # (B, L, d_G) mismatched data latents


@dataclass
class VelocityNet:
    p: Tensor        # (d_G,) body-structure embedding, broadcast over frames
    time_w: Tensor   # (16, d_G)
    time_b: Tensor   # (d_G,)
    cond_w: Tensor   # (d_a + d_t, d_O)
    cond_b: Tensor   # (d_O,)
    align_w: Tensor  # (d_O, d_G), zero-init: frame-aligned condition residual
    tcam_q: Tensor   # (d_G, d_s)
    tcam_k: Tensor   # (d_O, d_s)
    tcam_v: Tensor   # (d_O, d_s)
    tcam_o: Tensor   # (d_s, d_s), zero-init
    conv1_w: Tensor  # (3 * d_s, d_s) neighbour-context mixer
    conv1_b: Tensor  # (d_s,)
    conv2_w: Tensor  # (3 * d_s, d_s)
    conv2_b: Tensor  # (d_s,)
    out_w: Tensor    # (d_s, d_G)
    out_b: Tensor    # (d_G,)

    @property
    def d_model(self):
        return self.tcam_q.shape[0]

    @property
    def d_cond(self):
        return self.tcam_k.shape[0]

    @property
    def d_s(self):
        return self.tcam_q.shape[1]

    def parameters(self):
        return [self.p, self.time_w, self.time_b, self.cond_w, self.cond_b,
                self.align_w,
                self.tcam_q, self.tcam_k, self.tcam_v, self.tcam_o,
                self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b,
                self.out_w, self.out_b]

    _FIELD_NAMES = ("p", "time_w", "time_b", "cond_w", "cond_b", "align_w",
                    "tcam_q", "tcam_k", "tcam_v", "tcam_o",
                    "conv1_w", "conv1_b", "conv2_w", "conv2_b",
                    "out_w", "out_b")

    def named_tensors(self):
        return {f"flow/{n}": t for n, t in zip(self._FIELD_NAMES, self.parameters())}

    @classmethod
    def from_named_tensors(cls, tensors):
        try:
            vals = [Tensor(np.array(tensors[f"flow/{n}"]), requires_grad=True)
                    for n in cls._FIELD_NAMES]
        except KeyError as exc:
            raise NumericError(f"missing flow tensor in checkpoint: {exc}") from exc
        return cls(*vals)


def init_velocity_net(rng, d_model=32, d_cond=32, d_audio=16, d_text=16, d_s=64,
                      time_dim=16):
    return VelocityNet(
        p=uniform_init(rng, (d_model,), fan_in=d_model),
        time_w=uniform_init(rng, (time_dim, d_model), fan_in=time_dim),
        time_b=zeros_init((d_model,)),
        cond_w=uniform_init(rng, (d_audio + d_text, d_cond), fan_in=d_audio + d_text),
        cond_b=zeros_init((d_cond,)),
        align_w=zeros_init((d_cond, d_model)),
        tcam_q=uniform_init(rng, (d_model, d_s), fan_in=d_model),
        tcam_k=uniform_init(rng, (d_cond, d_s), fan_in=d_cond),
        tcam_v=uniform_init(rng, (d_cond, d_s), fan_in=d_cond),
        tcam_o=zeros_init((d_s, d_s)),
        conv1_w=uniform_init(rng, (3 * d_s, d_s), fan_in=3 * d_s),
        conv1_b=zeros_init((d_s,)),
        conv2_w=uniform_init(rng, (3 * d_s, d_s), fan_in=3 * d_s),
        conv2_b=zeros_init((d_s,)),
        out_w=uniform_init(rng, (d_s, d_model), fan_in=d_s),
        out_b=zeros_init((d_model,)),
    )


# ----------------------------------------------------------------- condition

def build_condition_batch(audio, text, net):
    """Channel-concat audio (…, L, d_a) and text (…, L, d_t), project to d_O."""
    a = audio if isinstance(audio, Tensor) else Tensor(audio)
    t = text if isinstance(text, Tensor) else Tensor(text)
    if a.shape[:-1] != t.shape[:-1]:
        raise NumericError(f"audio/text length mismatch: {a.shape} vs {t.shape}")
    return matmul(concat([a, t], axis=-1), net.cond_w) + net.cond_b


def build_condition(audio, text, net):
    out = build_condition_batch(np.asarray(audio, dtype=np.float64),
                                np.asarray(text, dtype=np.float64), net)
    return ConditionSeq(out.data)


# --------------------------------------------------------------- interpolant

def interpolate_batch(z0, z1, t):
    """(1 - t) * z0 + t * z1 with per-example t broadcast over (L, d)."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise NumericError(f"interpolate shape mismatch {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise NumericError("interpolation time t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (z0.ndim - t.ndim))
    return (1.0 - tb) * z0 + tb * z1


def interpolate(z0, z1, t):
    t = float(t)
    return FlowSample(z0=np.asarray(z0, dtype=np.float64),
                      z1=np.asarray(z1, dtype=np.float64),
                      t=t, zt=interpolate_batch(z0, z1, t))


def target_velocity(z0, z1):
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise NumericError(f"target_velocity shape mismatch {z0.shape} vs {z1.shape}")
    return z1 - z0


def negative_velocity(z0, z1_mismatched):
    return target_velocity(z0, z1_mismatched)


# ------------------------------------------------------------------ network

def sinusoidal_time_embedding(t, dim=16):
    """Scalar flow time -> (…, dim) sin/cos features, frequencies 1..1000."""
    if dim % 2 != 0:
        raise NumericError("time embedding dim must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def temporal_position_embedding(length, dim):
    """Standard parameter-free transformer position encoding, (length, dim)."""
    if dim % 2 != 0:
        raise NumericError("position embedding dim must be even")
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = pos * freqs
    emb = np.empty((length, dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb


def _attention(q, k, v, out_w, d_s):
    scores = matmul(q, k.mT) * Tensor(1.0 / math.sqrt(d_s))
    attn = softmax(scores, axis=-1)
    return q + matmul(matmul(attn, v), out_w), attn


def _neighbor_shift(length, step):
    """(L, L) selection matrix picking row i+step, clamped at the edges."""
    sel = np.zeros((length, length))
    rows = np.arange(length)
    sel[rows, np.clip(rows + step, 0, length - 1)] = 1.0
    return sel


def tcam_fuse(x, cond, net, return_attn=False):
    """Cross-attention: motion tokens (…, L, d_G) query the condition
    (…, L_c, d_O); residual on the projected query path."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    ct = cond.sequence if isinstance(cond, ConditionSeq) else cond
    ct = ct if isinstance(ct, Tensor) else Tensor(ct)
    if xt.shape[:-2] != ct.shape[:-2]:
        raise NumericError(f"tcam batch shape mismatch {xt.shape} vs {ct.shape}")
    q = matmul(xt, net.tcam_q)
    k = matmul(ct, net.tcam_k)
    v = matmul(ct, net.tcam_v)
    out, attn = _attention(q, k, v, net.tcam_o, net.d_s)
    if return_attn:
        return out, attn
    return out


def velocity_forward(net, zt, t, cond):
    """Predict the velocity field at interpolant zt, time t, condition cond.

    Accepts (L, d_G) + scalar t or batched (B, L, d_G) + per-example t (B,).
    """
    x = zt if isinstance(zt, Tensor) else Tensor(np.asarray(zt, dtype=np.float64))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    c = cond.sequence if isinstance(cond, ConditionSeq) else cond
    c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))
    if c.ndim == 2:
        c = c.reshape(1, *c.shape)
    b, l, d_model = x.shape
    if c.shape[0] != b:
        raise NumericError(f"condition batch {c.shape[0]} != latent batch {b}")
    if d_model != net.d_model:
        raise NumericError(f"latent dim {d_model} != network dim {net.d_model}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)).copy()
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise NumericError("flow time t must lie in [0, 1]")

    temb = matmul(Tensor(sinusoidal_time_embedding(t_arr, net.time_w.shape[0])),
                  net.time_w) + net.time_b                       # (B, d_G)
    pe_x = Tensor(temporal_position_embedding(l, d_model))
    pe_c = Tensor(temporal_position_embedding(c.shape[-2], net.d_cond))
    tokens = x + net.p + temb.reshape(b, 1, d_model) + pe_x
    if c.shape[-2] == l:
        # frame-aligned conditions get a direct per-step residual so timing
        # cues reach the matching motion frame without relying on attention
        # to discover the diagonal; unaligned conditions use attention alone
        tokens = tokens + matmul(c, net.align_w)
    h = tcam_fuse(tokens, c + pe_c, net)
    prev_sel = Tensor(_neighbor_shift(l, -1))
    next_sel = Tensor(_neighbor_shift(l, +1))
    for w, bias in ((net.conv1_w, net.conv1_b), (net.conv2_w, net.conv2_b)):
        ctx = concat([matmul(prev_sel, h), h, matmul(next_sel, h)], axis=-1)
        h = h + gelu(matmul(ctx, w) + bias)
    out = matmul(h, net.out_w) + net.out_b
    if single:
        return out.reshape(l, d_model)
    return out


# ----------------------------------------------------------------- negatives

def sample_derangement(rng, n):
    """Uniform fixed-point-free permutation by rejection sampling."""
    if n < 2:
        raise NumericError("derangement needs batch size >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def make_incongruent_batch(z1, cond, rng, mode="permute-pair", audio=None,
                           text=None, net=None, perm=None):
    """Derange the batch to build mismatched (condition, latent) negatives.

    permute-pair moves whole (audio, text) pairs with their latents;
    permute-text / permute-audio rebuild the condition with only one modality
    deranged (the mismatched latent is the deranged example's in all modes).
    Callers may pass a precomputed derangement via `perm`.
    """
    if mode not in NEGATIVE_MODES:
        raise NumericError(f"unknown negative mode {mode!r}; expected {NEGATIVE_MODES}")
    z1 = np.asarray(z1, dtype=np.float64)
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=np.float64)
    if perm is None:
        perm = sample_derangement(rng, z1.shape[0])
    else:
        perm = np.asarray(perm, dtype=np.int64)
        if perm.shape != (z1.shape[0],) or np.any(np.sort(perm) != np.arange(z1.shape[0])):
            raise NumericError("perm must be a permutation of the batch indices")
        if np.any(perm == np.arange(z1.shape[0])):
            raise NumericError("perm must have no fixed points")
    if mode == "permute-pair":
        cond_neg = cond[perm]
    else:
        if audio is None or text is None or net is None:
            raise NumericError(f"mode {mode!r} needs audio, text and net to rebuild conditions")
        audio = np.asarray(audio, dtype=np.float64)
        text = np.asarray(text, dtype=np.float64)
        if mode == "permute-text":
            cond_neg = build_condition_batch(audio, text[perm], net).data
        else:
            cond_neg = build_condition_batch(audio[perm], text, net).data
    return NegativePairing(permutation=perm, conditions=cond_neg, latents=z1[perm])


# --------------------------------------------------------------------- loss

def cfm_loss(v_pred, v_pos, v_neg, lam):
    """mean ||v_pred - v_pos||^2 - lam * mean ||v_pred - v_neg||^2.

    lam = 0 reduces to the plain flow-matching objective (identical code
    path, bit-identical result); lam >= 1 makes the objective unbounded
    below and is rejected.
    """
    if not 0.0 <= lam < 1.0:
        raise NumericError(f"contrast weight must satisfy 0 <= lam < 1, got {lam}")
    vp = v_pred if isinstance(v_pred, Tensor) else Tensor(v_pred)
    pos = v_pos.data if isinstance(v_pos, Tensor) else np.asarray(v_pos)
    if pos.shape != vp.shape:
        raise NumericError(f"cfm_loss shape mismatch {pos.shape} vs {vp.shape}")
    loss = mse(vp, Tensor(pos))
    if lam == 0.0:
        return loss
    neg = v_neg.data if isinstance(v_neg, Tensor) else np.asarray(v_neg)
    if neg.shape != vp.shape:
        raise NumericError(f"cfm_loss negative shape mismatch {neg.shape} vs {vp.shape}")
    return loss - Tensor(lam) * mse(vp, Tensor(neg))
