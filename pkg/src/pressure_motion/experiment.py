"""End-to-end desk pipeline shared by the CLI, scripts and acceptance suite.

Stages: data -> trajectory regressor -> text-to-motion backbone -> control
branch per mode -> sampling on held-out clips -> metrics.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig
from .diffusion import Denoiser, HashTextEncoder, MotionNormalizer, pretrain_backbone
from .evaluation import Evaluator, MetricReport, embed_motions, embed_texts, evaluate_set, train_evaluator
from .features import ClipBank, TrajNet, f_traj_forward, pretrain_f_traj
from .motion_repr import SL_CONTACT, recover_global_joints
from .pressure import Calibration
from .storage import CheckpointBundle
from .synth import SequenceRecord, generate_splits
from .training import TrainState, TrainingData, generate, init_state, run_training

log = logging.getLogger(__name__)


def encode_captions(encoder: HashTextEncoder, captions: list[list[str]]) -> torch.Tensor:
    """(C, K, 512) embeddings for K caption levels per clip."""
    with torch.no_grad():
        return torch.stack([encoder(list(c))[0] for c in captions])


def trajectory_features(net: TrajNet, pressure: torch.Tensor, batch: int = 64) -> torch.Tensor:
    return torch.cat([f_traj_forward(pressure[i:i + batch], net).traj for i in range(0, len(pressure), batch)])


@dataclass
class HeldOut:
    """One fixed-length clip per held-out record, with everything metrics need."""

    names: list[str]
    poses: torch.Tensor        # (S, L, 263) raw
    joints: np.ndarray         # (S, L, 22, 3)
    pressure: torch.Tensor     # (S, L, H, W)
    calibs: list[Calibration]
    text: torch.Tensor         # (S, 512) caption at the evaluation level
    traj: torch.Tensor | None = None

    def __len__(self):
        return len(self.names)


def make_heldout(records: list[SequenceRecord], clip_len: int, encoder: HashTextEncoder, level: int = 0) -> HeldOut:
    bank = ClipBank(records, clip_len, stride=10 ** 9)  # first window only
    keep = [k for k, (_, s) in enumerate(bank.index) if s == 0]
    poses = bank.poses[keep]
    joints = recover_global_joints(poses.double()).numpy()
    calibs = []
    for k in keep:
        rec = bank.records[bank.index[k][0]]
        calibs.append(Calibration(rec.calib.scale, tuple(bank.offsets[k].double().tolist())))
    caps = [bank.captions[k][level] for k in keep]
    with torch.no_grad():
        text = encoder(caps)[0]
    return HeldOut([bank.records[bank.index[k][0]].name for k in keep], poses, joints, bank.pressure(keep),
                   calibs, text)


@dataclass
class Pipeline:
    """Trained components of one desk run."""

    run: RunConfig
    splits: dict
    encoder: HashTextEncoder
    bank: ClipBank
    traj_net: TrajNet
    traj_curve: list
    normalizer: MotionNormalizer
    data: TrainingData
    backbone: Denoiser
    backbone_curve: list
    states: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def build_training_data(bank: ClipBank, traj_net: TrajNet, encoder: HashTextEncoder,
                        normalizer: MotionNormalizer | None = None):
    normalizer = normalizer or MotionNormalizer.fit(bank.poses)
    all_ids = list(range(len(bank)))
    pressure = torch.cat([bank.pressure(all_ids[i:i + 64]) for i in range(0, len(bank), 64)])
    traj = trajectory_features(traj_net, pressure)
    text = encode_captions(encoder, bank.captions)
    data = TrainingData(normalizer.normalize(bank.poses), text, traj, bank.pressure)
    return data, normalizer


def prepare(run: RunConfig, splits: dict | None = None, records: list[SequenceRecord] | None = None) -> Pipeline:
    """Generate data (unless given) and pretrain the frozen components."""
    timings = {}
    t0 = time.time()
    if splits is None and records is None:
        splits = generate_splits(run.data_config())
    if records is None:
        records = splits["train"]
    timings["data"] = time.time() - t0

    t0 = time.time()
    bank = ClipBank(records, run.data.clip_len, run.data.clip_stride)
    traj_net, traj_curve = pretrain_f_traj(None, run.traj_train_config(), run.traj_net_config(), seed=run.seed,
                                           bank=bank)
    timings["traj"] = time.time() - t0

    t0 = time.time()
    encoder = HashTextEncoder()
    data, normalizer = build_training_data(bank, traj_net, encoder)
    sched = run.schedule()
    backbone, bb_curve = pretrain_backbone(data.poses_norm, data.text, sched, run.denoiser_config(),
                                           run.backbone_train_config(), seed=run.seed, log=log.info)
    timings["backbone"] = time.time() - t0
    return Pipeline(run, splits or {"train": records}, encoder, bank, traj_net, traj_curve, normalizer, data,
                    backbone, bb_curve, timings=timings)


def train_mode(p: Pipeline, mode: str, steps: int | None = None, seed: int | None = None,
               out_dir: str | None = None) -> TrainState:
    cfg = p.run.train_config()
    if steps is not None:
        cfg.steps = steps
    t0 = time.time()
    state = init_state(p.backbone, p.normalizer, p.run.schedule(), cfg,
                       seed=p.run.seed if seed is None else seed, shift_cfg=p.run.shift_net_config())
    run_training(state, p.data, cfg, mode, out_dir=out_dir)
    p.states[mode] = state
    p.timings[f"train_{mode}"] = time.time() - t0
    return state


def sample_heldout(state: TrainState, held: HeldOut, mode: str, cfg_scale: float, seed: int,
                   control_scale: str = "unit", batch: int = 64) -> torch.Tensor:
    outs = []
    for i in range(0, len(held), batch):
        sl = slice(i, i + batch)
        outs.append(generate(state, held.text[sl], held.traj[sl], held.pressure[sl], mode, cfg_scale,
                             seed + i, control_scale))
    return torch.cat(outs)


def evaluate_poses(poses: torch.Tensor, held: HeldOut, evaluator: Evaluator | None, run: RunConfig) -> MetricReport:
    joints = recover_global_joints(poses.double()).numpy()
    contacts = (poses[..., SL_CONTACT] > 0.5).numpy()
    pred_feats = gt_feats = text_feats = None
    if evaluator is not None:
        pred_feats = embed_motions(evaluator, poses)
        gt_feats = embed_motions(evaluator, held.poses)
        text_feats = embed_texts(evaluator, held.text)
    return evaluate_set(list(joints), list(held.joints), list(held.pressure.numpy()), held.calibs, list(contacts),
                        pred_feats, gt_feats, text_feats, run.cop_config(), run.eval.skate_vel)


def fit_evaluator(p: Pipeline) -> Evaluator:
    return train_evaluator(p.bank.poses, p.data.text, p.run.evaluator_config(), seed=p.run.seed)


def bundle(p: Pipeline, state: TrainState | None = None, extra: dict | None = None) -> CheckpointBundle:
    weights = {"traj_net": p.traj_net.state_dict(), "backbone": p.backbone.state_dict(),
               "normalizer": p.normalizer.state_dict()}
    frozen = {"traj_net": True, "backbone": True, "normalizer": True}
    if state is not None:
        weights.update(branch=state.branch.state_dict(), shift_net=state.shift_net.state_dict())
        frozen.update(branch=False, shift_net=False)
    return CheckpointBundle(weights, frozen, p.run.schedule().to_dict(), p.run.to_dict(), extra=extra or {})


# ------------------------------------------------------------------ desk runs

def run_desk(run: RunConfig, modes=("text_only", "full", "regression"), out_dir: str | None = None,
             sample_seed: int = 7, before_training=None) -> dict:
    """Train every mode on the synthetic train split and score all of them on held-out clips.

    text_only needs no training (its branch is masked), so it samples from
    an untouched state. Returns the pipeline, held-out set, evaluator,
    per-method reports and raw samples. ``before_training(pipeline)`` is
    called once the frozen components exist.
    """
    import os

    splits = generate_splits(run.data_config())
    p = prepare(run, splits)
    held = make_heldout(splits["val"] + splits["test"], run.data.clip_len, p.encoder, run.eval.caption_level)
    held.traj = trajectory_features(p.traj_net, held.pressure)
    t0 = time.time()
    evaluator = fit_evaluator(p)
    p.timings["evaluator"] = time.time() - t0
    reports = {"GT": evaluate_poses(held.poses, held, evaluator, run)}
    if before_training is not None:
        before_training(p)
    samples = {}
    for mode in modes:
        steps = 0 if mode == "text_only" else None
        sub = os.path.join(out_dir, mode) if out_dir else None
        state = train_mode(p, mode, steps=steps, out_dir=sub)
        t0 = time.time()
        samples[mode] = sample_heldout(state, held, mode, run.sampling.cfg_scale, sample_seed,
                                       run.sampling.control_scale)
        p.timings[f"sample_{mode}"] = time.time() - t0
        reports[mode] = evaluate_poses(samples[mode], held, evaluator, run)
    return {"pipeline": p, "held": held, "evaluator": evaluator, "reports": reports, "samples": samples}


@dataclass
class Probe:
    """Fixed (clip, t, noise, caption) tuples for measuring the training loss without sampling noise."""

    ids: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    text: torch.Tensor


def make_probe(data: TrainingData, T: int, ts=(0.1, 0.3, 0.5, 0.7, 0.9), seed: int = 0) -> Probe:
    g = torch.Generator().manual_seed(seed)
    n = len(data)
    ids = torch.arange(n).repeat(len(ts))
    t = torch.tensor([max(1, min(T, round(f * T))) for f in ts for _ in range(n)])
    eps = torch.randn((len(ids),) + tuple(data.poses_norm.shape[1:]), generator=g)
    return Probe(ids, t, eps, data.text[ids, 0])


def probe_loss(state: TrainState, data: TrainingData, probe: Probe, mode: str = "full", batch: int = 32) -> dict:
    """Mean (total, l_diff, l_cons) of the loss on the probe set, in eval mode."""
    from .training import LossWeights, batch_losses

    state.branch.eval()
    state.shift_net.eval()
    w = LossWeights()
    acc = np.zeros(3)
    with torch.no_grad():
        for i in range(0, len(probe.ids), batch):
            ids = probe.ids[i:i + batch]
            b = {"x0": data.poses_norm[ids], "t": probe.t[i:i + batch], "eps": probe.eps[i:i + batch],
                 "text": probe.text[i:i + batch], "traj": data.traj[ids], "pressure": data.pressure(ids.tolist()),
                 "present": None}
            total, l_diff, l_cons, _, _ = batch_losses(state, b, mode, w)
            acc += len(ids) * np.array([total.item(), l_diff.item(), l_cons.item()])
    acc /= len(probe.ids)
    return {"total": acc[0], "l_diff": acc[1], "l_cons": acc[2]}


def overfit_config(run: RunConfig, batch_size: int = 8) -> RunConfig:
    """Copy of ``run`` sized for the eight-sequence overfit: short pretraining, small batches."""
    out = RunConfig.from_dict(run.to_dict())
    out.data.n_sequences = 12
    out.training.traj_steps = 300
    out.training.backbone_steps = 600
    out.training.batch_size = batch_size
    return out


def overfit_experiment(run: RunConfig, n_sequences: int = 8, max_steps: int = 2000, check_every: int = 250,
                       target_ratio: float = 0.10, sample_seed: int = 3) -> dict:
    """Fit the control branch to a handful of sequences and report probe-loss ratio and reconstruction MPJPE.

    Training stops at the first check where the probe loss is at or below
    ``target_ratio`` of its initial value, or after ``max_steps``.
    """
    from .evaluation import joint_errors
    from .training import run_training

    splits = generate_splits(run.data_config())
    records = splits["train"][:n_sequences]
    if len(records) < n_sequences:
        raise ValueError(f"only {len(records)} training records available")
    p = prepare(run, records=records)
    cfg = p.run.train_config()
    state = init_state(p.backbone, p.normalizer, p.run.schedule(), cfg, seed=run.seed,
                       shift_cfg=p.run.shift_net_config())
    probe = make_probe(p.data, p.run.schedule().T, seed=run.seed)
    history = [(0, probe_loss(state, p.data, probe))]
    initial = history[0][1]["total"]
    t0 = time.time()
    while state.step < max_steps:
        cfg.steps = min(check_every, max_steps - state.step)
        run_training(state, p.data, cfg, "full")
        history.append((state.step, probe_loss(state, p.data, probe)))
        if history[-1][1]["total"] <= target_ratio * initial:
            break
    p.timings["overfit"] = time.time() - t0

    held = make_heldout(records, run.data.clip_len, p.encoder, level=0)
    held.traj = trajectory_features(p.traj_net, held.pressure)
    poses = sample_heldout(state, held, "full", run.sampling.cfg_scale, sample_seed, run.sampling.control_scale)
    joints = recover_global_joints(poses.double()).numpy()
    mpjpe = float(np.mean([joint_errors(a, b)[0] for a, b in zip(joints, held.joints)]))
    return {"pipeline": p, "state": state, "history": history, "initial": initial,
            "ratio": history[-1][1]["total"] / initial, "steps": state.step, "mpjpe": mpjpe}
