"""Command-line entry point: dataset export, the two training stages,
generation, evaluation, and the gradient self-check.

Exit codes: 0 success, 2 usage/config errors, 3 numerical failures.
Every command is deterministic given (config, seed).
"""

from __future__ import annotations

import os


def _propagate_thread_cap():
    cap = os.environ.get("CFMLAB_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
            os.environ.setdefault(var, cap)


_propagate_thread_cap()  # before numpy spins up its thread pools

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .alignment import (
    ProjectionHeads,
    clip_loss,
    cosine_alignment_loss_batch,
    fused_target_batch,
    init_projection_heads,
    project_and_normalize_batch,
    temporal_pool_batch,
)
from .checkpoint import CheckpointError, load_checkpoint
from .codec import (
    PART_ORDER,
    CodebookStack,
    PartCodecParams,
    commitment_loss,
    decode_part_batch,
    encode_part_batch,
    init_codebook_stack,
    init_part_codec,
    rvq_quantize_batch,
)
from .config import (
    ConfigError,
    config_from_dict,
    config_hash,
    config_to_dict,
    validate_config,
)
from .evaluate import condition_for_clip, evaluate_run
from .flow import (
    NEGATIVE_MODES,
    VelocityNet,
    build_condition_batch,
    cfm_loss,
    init_velocity_net,
    interpolate_batch,
    velocity_forward,
)
from .numerics import NumericError, Tensor, mse, no_grad
from .numerics.gradcheck import check_gradients
from .numerics.tensor import inject_backward_fault
from .sampler import (
    ManifoldProjection,
    OdeConfig,
    generate,
    init_manifold_projection,
    project_to_codebook_manifold,
    write_motion_csv,
    write_sidecar,
)
from .synthdata import build_dataset, generate_utterance, save_dataset
from .training import (
    check_codec_dims,
    save_stage1_checkpoint,
    save_stage2_checkpoint,
    train_codec,
    train_generator,
)

__all__ = ["main"]


def _load_cfg(args):
    payload = {}
    if getattr(args, "config", None):
        try:
            payload = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}")
        if not isinstance(payload, dict):
            raise ConfigError("config root must be an object")
    if getattr(args, "seed", None) is not None:
        payload = {**payload, "seed": args.seed}
    return config_from_dict(payload)


def _out_dir(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_record(path, record, cfg):
    payload = json.loads(record.to_json())
    payload["config"] = config_to_dict(cfg)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return Path(path)


def _merged_checkpoints(paths):
    if not paths:
        raise ConfigError("at least one --checkpoint is required")
    merged = {}
    for p in paths:
        merged.update(load_checkpoint(p))
    return merged


def _stage1_from(merged):
    codecs = {p: PartCodecParams.from_named_tensors(merged, p) for p in PART_ORDER}
    stacks = {p: CodebookStack.from_named_tensors(merged, p) for p in PART_ORDER}
    return codecs, stacks


# ------------------------------------------------------------------- commands

def cmd_make_data(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    ds = build_dataset(cfg.dataset)
    save_dataset(ds, out)
    print(out / "manifest.json")
    return 0


def cmd_train_codec(args):
    cfg = _load_cfg(args)
    out = _out_dir(args)
    ds = build_dataset(cfg.dataset)
    codecs, stacks, record = train_codec(cfg, ds)
    ckpt = save_stage1_checkpoint(out / "codec.bin", codecs, stacks)
    record.checkpoints = [str(ckpt)]
    rec_path = _write_record(out / "codec_record.json", record, cfg)
    print(ckpt)
    print(rec_path)
    return 0


def cmd_train_generator(args):
    cfg = _load_cfg(args)
    if args.lam is not None:
        cfg.flow.lam = args.lam
    if args.mode is not None:
        cfg.flow.mode = args.mode
    validate_config(cfg)
    codecs, stacks = _stage1_from(_merged_checkpoints(args.checkpoint))
    check_codec_dims(cfg, codecs, stacks)
    out = _out_dir(args)
    ds = build_dataset(cfg.dataset)
    net, heads, proj, record = train_generator(cfg, ds, codecs, stacks)
    ckpt = save_stage2_checkpoint(out / "generator.bin", net, heads, proj)
    record.checkpoints = [str(ckpt)]
    rec_path = _write_record(out / "generator_record.json", record, cfg)
    print(ckpt)
    print(rec_path)
    return 0


def _condition_for(args, cfg, ds):
    """Condition source: a held-out test clip (--clip-id) or a fresh
    utterance of a class (--class-id). Returns (utterance, condition_id)."""
    if args.clip_id is not None and args.class_id is not None:
        raise ConfigError("--clip-id and --class-id are mutually exclusive")
    if args.class_id is not None:
        if not 0 <= args.class_id < cfg.dataset.n_classes:
            raise ConfigError(
                f"class id {args.class_id} out of range [0, {cfg.dataset.n_classes})")
        seed = int(np.random.default_rng([cfg.seed, 6, args.class_id]).integers(2**31))
        u = generate_utterance(seed, ds.classes[args.class_id],
                               noise=cfg.dataset.noise,
                               n_frames=cfg.dataset.n_frames,
                               fps=cfg.dataset.fps,
                               downsample=cfg.dataset.downsample,
                               n_onsets=cfg.dataset.n_onsets)
        return u, f"class:{args.class_id}"
    clip_id = args.clip_id if args.clip_id is not None else 0
    test = ds.splits["test"]
    if not 0 <= clip_id < len(test):
        raise ConfigError(f"clip id {clip_id} out of range [0, {len(test)})")
    return test[clip_id], f"clip:{clip_id}"


def cmd_generate(args):
    cfg = _load_cfg(args)
    merged = _merged_checkpoints(args.checkpoint)
    codecs, stacks = _stage1_from(merged)
    check_codec_dims(cfg, codecs, stacks)
    net = VelocityNet.from_named_tensors(merged)
    heads = ProjectionHeads.from_named_tensors(merged)
    proj = ManifoldProjection.from_named_tensors(merged)
    out = _out_dir(args)
    ds = build_dataset(cfg.dataset)
    u, condition_id = _condition_for(args, cfg, ds)
    cond = condition_for_clip(u.audio, u.text, net, heads)
    run_hash = config_hash(cfg)
    seeds = np.random.default_rng([cfg.seed, 5]).integers(0, 2**31,
                                                          size=args.count)
    for i, s in enumerate(seeds):
        ode = OdeConfig(n=cfg.sampler.steps, scheme=cfg.sampler.scheme,
                        seed=int(s))
        motion = generate(net, stacks, codecs, cond, ode, proj=proj,
                          scale=cfg.sacm.scale, fps=cfg.dataset.fps,
                          config_hash=run_hash)
        csv_path = write_motion_csv(motion, out / f"gen_{i:03d}.csv")
        sidecar = write_sidecar(motion, out / f"gen_{i:03d}.json", condition_id)
        print(csv_path)
        print(sidecar)
    return 0


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    merged = _merged_checkpoints(args.checkpoint)
    codecs, stacks = _stage1_from(merged)
    check_codec_dims(cfg, codecs, stacks)
    net = heads = proj = None
    if not args.self_eval:
        net = VelocityNet.from_named_tensors(merged)
        heads = ProjectionHeads.from_named_tensors(merged)
        proj = ManifoldProjection.from_named_tensors(merged)
    ds = build_dataset(cfg.dataset)
    if len(ds.splits["test"]) < 2:
        raise ConfigError(
            f"dataset.ratios: test split has {len(ds.splits['test'])} clips, need >= 2")
    report, details = evaluate_run(cfg, ds, codecs, stacks, net=net,
                                   heads=heads, proj=proj,
                                   self_eval=args.self_eval)
    out = _out_dir(args)
    report_path = out / "report.json"
    report_path.write_text(report.to_json())
    (out / "details.json").write_text(
        json.dumps(details, sort_keys=True, indent=2) + "\n")
    print(report_path)
    return 0


# ------------------------------------------------------------------ gradcheck

def _gradcheck_suite():
    """Small end-to-end finite-difference checks, one per differentiable
    subsystem; sizes are tiny so the whole sweep stays under a second."""
    rng = np.random.default_rng(1234)
    checks = []

    codec = init_part_codec(rng, "face", downsample=4, d_g=2, hidden=6)
    stack = init_codebook_stack(rng, "face", n_codes=4, depth=2, d_g=2)
    frames = rng.standard_normal((2, 8, 16))
    # straight-through gradients equal the true gradients of a surrogate in
    # which quantization is a constant offset, so that is what we difference
    with no_grad():
        z_init = encode_part_batch(frames, codec)
    q0, _, _ = rvq_quantize_batch(z_init.data, stack.stages)
    offset = q0 - z_init.data

    def codec_loss():
        z = encode_part_batch(frames, codec)
        recon = decode_part_batch(z + Tensor(offset), codec)
        return mse(recon, Tensor(frames)) + Tensor(0.25) * commitment_loss(z, q0)

    checks.append(("stage1/reconstruction+commitment", codec_loss,
                   codec.named_tensors(), 1e-3))

    heads = init_projection_heads(rng, d_text=5, d_audio=6, d_motion=8, d=4)
    text = rng.standard_normal((3, 4, 5))
    audio = rng.standard_normal((3, 4, 6))
    motion = rng.standard_normal((3, 4, 8))

    def sem():
        te = project_and_normalize_batch(text, heads.text)
        ae = project_and_normalize_batch(audio, heads.audio)
        me = project_and_normalize_batch(motion, heads.motion)
        l_cos = cosine_alignment_loss_batch(fused_target_batch(te, ae, 0.5), me)
        l_clp = clip_loss(temporal_pool_batch(me), temporal_pool_batch(ae),
                          temporal_pool_batch(te), 0.1)
        return l_cos + Tensor(0.1) * l_clp

    checks.append(("sacm/cosine+clip", sem, heads.named_tensors(), 1e-4))

    net = init_velocity_net(rng, d_model=4, d_cond=6, d_audio=3, d_text=3,
                            d_s=6, time_dim=4)
    proj = init_manifold_projection(4)
    z0 = rng.standard_normal((2, 4, 4))
    z1 = rng.standard_normal((2, 4, 4))
    z1n = z1[[1, 0]]
    a_feat = rng.standard_normal((2, 4, 3))
    t_feat = rng.standard_normal((2, 4, 3))
    t = rng.uniform(0.2, 0.8, size=2)

    def flow():
        cond = build_condition_batch(a_feat, t_feat, net)
        zt = interpolate_batch(z0, z1, t)
        v = velocity_forward(net, Tensor(zt), t, cond)
        l_cfm = cfm_loss(v, z1 - z0, z1n - z0, 0.05)
        z1_hat = Tensor(zt) + Tensor((1.0 - t)[:, None, None]) * v
        l_proj = mse(project_to_codebook_manifold(z1_hat, proj), Tensor(z1))
        return l_cfm + Tensor(0.1) * l_proj

    flow_params = dict(net.named_tensors())
    flow_params.update(proj.named_tensors())
    checks.append(("flow/cfm+projection", flow, flow_params, 1e-3))
    return checks


def cmd_gradcheck(args):
    failures = 0
    for name, loss_fn, params, tol in _gradcheck_suite():
        if args.inject_fault:
            with inject_backward_fault(args.inject_fault):
                errs = check_gradients(loss_fn, params)
        else:
            errs = check_gradients(loss_fn, params)
        worst = max(errs.values())
        status = "PASS" if worst < tol else "FAIL"
        if status == "FAIL":
            failures += 1
        print(f"{name}: max rel err {worst:.3e} (tol {tol:.0e}) {status}")
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 3
    print("all gradient checks passed")
    return 0


# --------------------------------------------------------------------- parser

def _build_parser():
    parser = argparse.ArgumentParser(prog="cfmlab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the global seed")
        if out:
            p.add_argument("--out", help="output directory (default: cwd)")

    p = sub.add_parser("make-data", help="export the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-codec", help="stage 1: part codecs + RVQ")
    common(p)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-generator",
                       help="stage 2: velocity field + alignment heads")
    common(p)
    p.add_argument("--checkpoint", action="append", default=[],
                   help="stage-1 checkpoint (repeatable)")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="override flow.lam (contrastive weight)")
    p.add_argument("--mode", choices=NEGATIVE_MODES,
                   help="override the mismatch mode")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("generate", help="sample motion for one condition")
    common(p)
    p.add_argument("--checkpoint", action="append", default=[],
                   help="stage-1 / stage-2 checkpoints (repeatable)")
    p.add_argument("--clip-id", type=int, help="held-out test clip index")
    p.add_argument("--class-id", type=int, help="gesture class index")
    p.add_argument("--count", type=int, default=1,
                   help="number of samples to draw")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="FGD / BC / diversity on the test split")
    common(p)
    p.add_argument("--checkpoint", action="append", default=[],
                   help="stage-1 / stage-2 checkpoints (repeatable)")
    p.add_argument("--self-eval", action="store_true",
                   help="score the real test clips against themselves")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--inject-fault", metavar="OP",
                   help="negate OP's backward rule (harness self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    cap = os.environ.get("CFMLAB_THREADS")
    if cap is not None:
        try:
            if int(cap) < 1:
                raise ValueError
        except ValueError:
            print(f"error: CFMLAB_THREADS must be a positive integer, got {cap!r}",
                  file=sys.stderr)
            return 2
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "count", 1) < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
