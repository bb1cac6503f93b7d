"""Command-line entry point: ``pressure-motion <subcommand> [--config C] [--seed S] [--out DIR]``.

Every run writes ``manifest.json`` in its output directory with the config
digest, seed, package version and sha256 of every file it produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .storage import (
    CheckpointBundle, atomic_write_bytes, atomic_write_json, check_resume, export_joints, file_digest,
    load_checkpoint, output_root, read_joints_table, read_split, save_checkpoint,
)

log = logging.getLogger("pressure_motion")


class CLIError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _run_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.seed = args.seed
    return run


def _out_dir(args) -> str:
    out = args.out or output_root(os.path.join("runs", args.command))
    os.makedirs(out, exist_ok=True)
    return out


def _manifest(out: str, args, run: RunConfig, extra: dict | None = None) -> None:
    outputs = {}
    for d, _, files in os.walk(out):
        for fn in sorted(files):
            p = os.path.join(d, fn)
            rel = os.path.relpath(p, out)
            if rel != "manifest.json" and not fn.startswith("."):
                outputs[rel] = file_digest(p)
    atomic_write_json(os.path.join(out, "manifest.json"), {
        "command": args.command, "version": __version__, "seed": run.seed, "config_digest": run.digest(),
        "config": run.to_dict(), "outputs": dict(sorted(outputs.items())), **(extra or {}),
    })


def _records(data: str, split: str):
    if not data:
        raise CLIError("--data is required")
    recs = read_split(data, split)
    if not recs:
        raise CLIError(f"split {split!r} in {data} is empty")
    return recs


def _same_model(run: RunConfig, bundle: CheckpointBundle, what: str) -> None:
    stored = RunConfig.from_dict(bundle.config)
    for section in ("model",):
        if getattr(stored, section) != getattr(run, section):
            raise CLIError(f"{what} was trained with a different '{section}' section")
    if stored.data.mat_height != run.data.mat_height or stored.data.mat_width != run.data.mat_width:
        raise CLIError(f"{what} expects {stored.data.mat_height}x{stored.data.mat_width} mats")


def _load_traj(run: RunConfig, path: str):
    from .features import TrajNet, freeze
    b = load_checkpoint(path, require=("traj_net",))
    _same_model(run, b, path)
    net = TrajNet(run.traj_net_config())
    net.load_state_dict(b.weights["traj_net"])
    return freeze(net)


def _load_backbone(run: RunConfig, path: str):
    from .diffusion import Denoiser, MotionNormalizer
    from .features import freeze
    b = load_checkpoint(path, require=("backbone", "normalizer"))
    _same_model(run, b, path)
    if b.schedule != run.schedule().to_dict():
        raise CLIError(f"{path} was trained with a different noise schedule")
    model = Denoiser(run.denoiser_config())
    model.load_state_dict(b.weights["backbone"])
    norm = MotionNormalizer()
    norm.load_state_dict(b.weights["normalizer"])
    return freeze(model), norm


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, run, out):
    from .synth import build_dataset
    counts = build_dataset(run.data_config(), os.path.join(out, "dataset"))
    print(f"wrote {counts} to {os.path.join(out, 'dataset')}")
    return {"counts": counts}


def cmd_pretrain_traj(args, run, out):
    from .features import ClipBank, evaluate_f_traj, pretrain_f_traj
    bank = ClipBank(_records(args.data, "train"), run.data.clip_len, run.data.clip_stride)
    net, curve = pretrain_f_traj(None, run.traj_train_config(), run.traj_net_config(), seed=run.seed, bank=bank)
    save_checkpoint(CheckpointBundle({"traj_net": net.state_dict()}, {"traj_net": True},
                                     run.schedule().to_dict(), run.to_dict()), os.path.join(out, "traj.pt"))
    atomic_write_bytes(os.path.join(out, "traj_curve.csv"),
                       ("step,loss\n" + "".join(f"{i + 1},{v:.8g}\n" for i, v in enumerate(curve))).encode())
    val = read_split(args.data, "val")
    metrics = {}
    if val:
        metrics = evaluate_f_traj(net, ClipBank(val, run.data.clip_len, run.data.clip_len))
        print(f"val key-joint error {metrics['key_joint_error']:.4f} m")
    return {"val": metrics}


def cmd_pretrain_backbone(args, run, out):
    from .diffusion import HashTextEncoder, MotionNormalizer, pretrain_backbone
    from .experiment import encode_captions
    from .features import ClipBank
    bank = ClipBank(_records(args.data, "train"), run.data.clip_len, run.data.clip_stride)
    norm = MotionNormalizer.fit(bank.poses)
    text = encode_captions(HashTextEncoder(), bank.captions)
    model, curve = pretrain_backbone(norm.normalize(bank.poses), text, run.schedule(), run.denoiser_config(),
                                     run.backbone_train_config(), seed=run.seed, log=log.info)
    save_checkpoint(CheckpointBundle({"backbone": model.state_dict(), "normalizer": norm.state_dict()},
                                     {"backbone": True, "normalizer": True}, run.schedule().to_dict(),
                                     run.to_dict()), os.path.join(out, "backbone.pt"))
    atomic_write_bytes(os.path.join(out, "backbone_curve.csv"),
                       ("step,loss\n" + "".join(f"{i + 1},{v:.8g}\n" for i, v in enumerate(curve))).encode())
    return {"final_loss": float(np.mean(curve[-50:]))}


def _model_bundle(run, state, traj_net, mode) -> CheckpointBundle:
    weights = {"traj_net": traj_net.state_dict(), "backbone": state.backbone.state_dict(),
               "normalizer": state.normalizer.state_dict(), "branch": state.branch.state_dict(),
               "shift_net": state.shift_net.state_dict()}
    frozen = {"traj_net": True, "backbone": True, "normalizer": True, "branch": False, "shift_net": False}
    extra = {"mode": mode, "step": state.step, "optimizer": state.optimizer.state_dict(),
             "generator": state.generator.get_state(), "drop_count": state.drop_count,
             "item_count": state.item_count, "curve": state.curve}
    return CheckpointBundle(weights, frozen, run.schedule().to_dict(), run.to_dict(), extra=extra)


def cmd_train(args, run, out):
    from .diffusion import HashTextEncoder
    from .experiment import build_training_data
    from .features import ClipBank
    from .training import init_state, run_training
    if not (args.traj and args.backbone):
        raise CLIError("train needs --traj and --backbone checkpoints")
    traj_net = _load_traj(run, args.traj)
    backbone, norm = _load_backbone(run, args.backbone)
    bank = ClipBank(_records(args.data, "train"), run.data.clip_len, run.data.clip_stride)
    data, _ = build_training_data(bank, traj_net, HashTextEncoder(), norm)
    cfg = run.train_config()
    state = init_state(backbone, norm, run.schedule(), cfg, seed=run.seed, shift_cfg=run.shift_net_config())
    if args.resume:
        b = load_checkpoint(args.resume, require=("branch", "shift_net"))
        check_resume(b, run.to_dict())
        if b.extra.get("mode") != args.mode:
            raise CLIError(f"checkpoint was trained in mode {b.extra.get('mode')!r}, not {args.mode!r}")
        state.branch.load_state_dict(b.weights["branch"])
        state.shift_net.load_state_dict(b.weights["shift_net"])
        state.optimizer.load_state_dict(b.extra["optimizer"])
        state.generator.set_state(b.extra["generator"])
        state.step, state.curve = b.extra["step"], list(b.extra["curve"])
        state.drop_count, state.item_count = b.extra["drop_count"], b.extra["item_count"]
        cfg.steps = max(0, cfg.steps - state.step)
    ckpt = os.path.join(out, "model.pt")
    run_training(state, data, cfg, args.mode, out_dir=out,
                 checkpoint_fn=lambda s: save_checkpoint(_model_bundle(run, s, traj_net, args.mode), ckpt))
    save_checkpoint(_model_bundle(run, state, traj_net, args.mode), ckpt)
    rate = state.drop_count / max(state.item_count, 1)
    print(f"{args.mode}: {state.step} steps, final total {state.curve[-1]['total']:.4f}, text dropout {rate:.3f}")
    return {"mode": args.mode, "steps": state.step, "text_drop_rate": rate}


def _load_model(run, path):
    from .control import ControlBranch
    from .diffusion import Denoiser, MotionNormalizer
    from .features import ShiftNet, TrajNet, freeze
    from .training import TrainState
    b = load_checkpoint(path, require=("traj_net", "backbone", "normalizer", "branch", "shift_net"))
    stored = RunConfig.from_dict(b.config)
    traj = TrajNet(stored.traj_net_config())
    traj.load_state_dict(b.weights["traj_net"])
    bb = Denoiser(stored.denoiser_config())
    bb.load_state_dict(b.weights["backbone"])
    freeze(bb)
    norm = MotionNormalizer()
    norm.load_state_dict(b.weights["normalizer"])
    branch = ControlBranch(bb)
    branch.load_state_dict(b.weights["branch"])
    shift = ShiftNet(stored.shift_net_config())
    shift.load_state_dict(b.weights["shift_net"])
    state = TrainState(bb, branch, shift, norm, stored.schedule(), None, torch.Generator())
    return stored, freeze(traj), state, b.extra.get("mode", "full")


def cmd_sample(args, run, out):
    from .diffusion import HashTextEncoder
    from .experiment import make_heldout, sample_heldout, trajectory_features
    from .motion_repr import recover_global_joints
    if not args.checkpoint:
        raise CLIError("sample needs --checkpoint")
    stored, traj_net, state, mode = _load_model(run, args.checkpoint)
    held = make_heldout(_records(args.data, args.split), stored.data.clip_len, HashTextEncoder(),
                        stored.eval.caption_level)
    held.traj = trajectory_features(traj_net, held.pressure)
    poses = sample_heldout(state, held, mode, stored.sampling.cfg_scale, seed=run.seed,
                           control_scale=stored.sampling.control_scale)
    joints = recover_global_joints(poses.double()).numpy()
    os.makedirs(os.path.join(out, "joints"), exist_ok=True)
    for name, j in zip(held.names, joints):
        export_joints(j, os.path.join(out, "joints", f"{name}.csv"))
    atomic_write_bytes(os.path.join(out, "poses.f32"), poses.numpy().astype("<f4").tobytes())
    atomic_write_json(os.path.join(out, "samples.json"),
                      {"mode": mode, "names": held.names, "shape": list(poses.shape), "split": args.split})
    print(f"sampled {len(held)} clips ({mode}) into {out}")
    return {"mode": mode, "count": len(held)}


def cmd_eval(args, run, out):
    from .diffusion import HashTextEncoder
    from .evaluation import format_table
    from .experiment import evaluate_poses, make_heldout
    if not (args.pred or args.gt_as_pred):
        raise CLIError("eval needs --pred DIR or --gt-as-pred")
    held = make_heldout(_records(args.data, args.split), run.data.clip_len, HashTextEncoder(),
                        run.eval.caption_level)
    if args.gt_as_pred:
        method, poses = "GT", held.poses
    else:
        with open(os.path.join(args.pred, "samples.json")) as f:
            info = json.load(f)
        if info["names"] != held.names:
            raise CLIError(f"{args.pred} was sampled from a different split or clip length")
        raw = np.fromfile(os.path.join(args.pred, "poses.f32"), dtype="<f4")
        poses = torch.from_numpy(raw.reshape(info["shape"]).astype(np.float32))
        method = info["mode"]
        for name, p in zip(held.names, poses):
            table = read_joints_table(os.path.join(args.pred, "joints", f"{name}.csv"))
            if table.shape[0] != p.shape[0]:
                raise CLIError(f"joint table for {name} has {table.shape[0]} rows, expected {p.shape[0]}")
    evaluator = None
    if args.features:
        from .evaluation import train_evaluator
        from .experiment import encode_captions
        from .features import ClipBank
        bank = ClipBank(read_split(args.data, "train"), run.data.clip_len, run.data.clip_stride)
        evaluator = train_evaluator(bank.poses, encode_captions(HashTextEncoder(), bank.captions),
                                    run.evaluator_config(), seed=run.seed)
    report = evaluate_poses(poses, held, evaluator, run)
    print(format_table({method: report}))
    atomic_write_bytes(os.path.join(out, "metrics.json"), (report.to_json(method) + "\n").encode())
    return {"method": method}


def cmd_selftest(args, run, out):
    from .selftest import run as run_checks
    failures = run_checks()
    if failures:
        raise CLIError(f"{failures} selftest check(s) failed")
    return {"failures": 0}


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain-traj": cmd_pretrain_traj, "pretrain-backbone": cmd_pretrain_backbone,
    "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pressure-motion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config (defaults to the reference hyperparameters)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("pretrain-traj", "pretrain-backbone", "train", "sample", "eval"):
            p.add_argument("--data", help="dataset root written by gen-data")
        if name == "train":
            p.add_argument("--mode", choices=("full", "text_only", "regression"), default="full")
            p.add_argument("--traj", help="checkpoint from pretrain-traj")
            p.add_argument("--backbone", help="checkpoint from pretrain-backbone")
            p.add_argument("--resume", help="model.pt to continue from")
        if name in ("sample", "eval"):
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "sample":
            p.add_argument("--checkpoint", help="model.pt from train")
        if name == "eval":
            p.add_argument("--pred", help="output directory of sample")
            p.add_argument("--gt-as-pred", action="store_true", help="score ground truth against itself")
            p.add_argument("--features", action="store_true", help="train the toy evaluator for FID / R-precision")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = _run_config(args)
        out = _out_dir(args)
        extra = COMMANDS[args.command](args, run, out)
        _manifest(out, args, run, extra)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as e:
        if args.verbose:
            log.exception("failed")
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
