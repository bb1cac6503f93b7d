"""Losses, the control-branch training step and run modes (full, text_only, regression)."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .control import ControlBranch, control_strength, guided_predict_x0
from .diffusion import Denoiser, MotionNormalizer, NoiseSchedule, q_sample, sample_cfg
from .features import ShiftNet, ShiftNetConfig, is_frozen, temporal_diff_torch
from .motion_repr import KEY_JOINTS, N_JOINTS, recover_global_joints

log = logging.getLogger(__name__)

MODES = ("full", "text_only", "regression")


@dataclass(frozen=True)
class LossWeights:
    diff: float = 1.0
    cons: float = 5.0

    def __post_init__(self):
        if self.diff < 0 or self.cons < 0:
            raise ValueError("loss weights must be non-negative")


def diffusion_loss(x0: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    if x0.shape != x0_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x0_hat.shape)}")
    return torch.mean((x0_hat - x0) ** 2)


def key_joint_mask(frames: int, present: torch.Tensor | None = None, batch: int | None = None) -> torch.Tensor:
    """(B?, N, 22) mask with ones at the key joints on frames where control is present."""
    m = torch.zeros(frames, N_JOINTS)
    m[:, list(KEY_JOINTS)] = 1.0
    if present is not None:
        m = m * torch.as_tensor(present, dtype=m.dtype).reshape(-1, frames, 1)
    elif batch is not None:
        m = m.expand(batch, frames, N_JOINTS)
    return m


def consistency_loss(traj: torch.Tensor, x0_hat: torch.Tensor, mask: torch.Tensor):
    """Mask-weighted mean Euclidean distance between trajectory key joints and the recovered ones.

    ``x0_hat`` is in raw (denormalised) feature units. Returns (loss, degenerate)
    where degenerate means the mask was empty and the loss is defined as 0.
    """
    if traj.shape[:-1] != x0_hat.shape[:-1]:
        raise ValueError(f"frame counts differ: {tuple(traj.shape)} vs {tuple(x0_hat.shape)}")
    mask = mask.to(x0_hat.dtype).expand(*x0_hat.shape[:-1], N_JOINTS)
    sigma = mask[..., list(KEY_JOINTS)]
    total = sigma.sum()
    if float(total) == 0.0:
        return x0_hat.sum() * 0.0, True
    e = traj[..., :15].reshape(*traj.shape[:-1], len(KEY_JOINTS), 3)
    r = recover_global_joints(x0_hat)[..., list(KEY_JOINTS), :]
    dist = torch.linalg.vector_norm(e.to(r.dtype) - r, dim=-1)
    return (sigma * dist).sum() / total, False


def total_loss(l_diff, l_cons, w: LossWeights = LossWeights()):
    return w.diff * l_diff + w.cons * l_cons


# ------------------------------------------------------------------ data

@dataclass
class TrainingData:
    """Fixed-length training clips with everything the step needs precomputed.

    poses_norm: (C, L, 263) normalised motion; text: (C, K, 512) caption embeddings;
    traj: (C, L, 39) frozen trajectory features; pressure(ids) -> (B, L, H, W).
    """

    poses_norm: torch.Tensor
    text: torch.Tensor
    traj: torch.Tensor
    pressure: object
    present: torch.Tensor | None = None

    def __len__(self):
        return self.poses_norm.shape[0]


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 1e-2
    lambda_diff: float = 1.0
    lambda_cons: float = 5.0
    text_drop: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 100
    ckpt_every: int = 0


@dataclass
class TrainState:
    backbone: Denoiser
    branch: ControlBranch
    shift_net: ShiftNet
    normalizer: MotionNormalizer
    sched: NoiseSchedule
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    drop_count: int = 0
    item_count: int = 0
    curve: list = field(default_factory=list)


def init_state(backbone: Denoiser, normalizer: MotionNormalizer, sched: NoiseSchedule, cfg: TrainConfig,
               seed: int = 0, shift_cfg: ShiftNetConfig | None = None) -> TrainState:
    if not is_frozen(backbone):
        raise ValueError("the backbone must be frozen before control training")
    torch.manual_seed(seed)
    branch = ControlBranch(backbone)
    shift_net = ShiftNet(shift_cfg)
    params = list(branch.parameters()) + list(shift_net.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return TrainState(backbone, branch, shift_net, normalizer, sched, opt,
                      torch.Generator().manual_seed(seed + 17))


def shift_features(shift_net: ShiftNet, maps: torch.Tensor) -> torch.Tensor:
    return shift_net(maps, temporal_diff_torch(maps))


def draw_batch(data: TrainingData, state: TrainState, cfg: TrainConfig, mode: str) -> dict:
    g = state.generator
    b = cfg.batch_size
    ids = torch.randint(len(data), (b,), generator=g)
    level = torch.randint(data.text.shape[1], (b,), generator=g)
    text = data.text[ids, level].clone()
    drop = torch.rand(b, generator=g) < cfg.text_drop
    text[drop] = 0.0
    if mode == "regression":
        t = torch.full((b,), state.sched.T, dtype=torch.long)
    else:
        t = torch.randint(1, state.sched.T + 1, (b,), generator=g)
    x0 = data.poses_norm[ids]
    eps = torch.randn(x0.shape, generator=g)
    return {"ids": ids, "text": text, "drop": drop, "t": t, "x0": x0, "eps": eps,
            "traj": data.traj[ids], "pressure": data.pressure(ids.tolist()),
            "present": None if data.present is None else data.present[ids]}


def batch_losses(state: TrainState, batch: dict, mode: str, weights: LossWeights):
    x0 = batch["x0"]
    x_t = q_sample(x0, batch["t"], batch["eps"], state.sched)
    text_only = mode == "text_only"
    shift = None if text_only else shift_features(state.shift_net, batch["pressure"])
    x0_hat, r = guided_predict_x0(x_t, batch["t"], batch["text"], batch["traj"], shift,
                                  state.backbone, state.branch, mask_branch=text_only)
    l_diff = diffusion_loss(x0, x0_hat)
    if not bool(torch.isfinite(x0_hat).all()):
        nan = x0_hat.new_tensor(float("nan"))
        return nan, l_diff, nan, r, False
    mask = key_joint_mask(x0.shape[1], batch["present"], batch=x0.shape[0])
    l_cons, degenerate = consistency_loss(batch["traj"], state.normalizer.denormalize(x0_hat), mask)
    return total_loss(l_diff, l_cons, weights), l_diff, l_cons, r, degenerate


def train_step(state: TrainState, data: TrainingData, cfg: TrainConfig, mode: str = "full",
               nan_dir: str | None = None) -> dict:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    batch = draw_batch(data, state, cfg, mode)
    state.branch.train()
    state.shift_net.train()
    weights = LossWeights(cfg.lambda_diff, cfg.lambda_cons)
    loss, l_diff, l_cons, r, degenerate = batch_losses(state, batch, mode, weights)
    if not torch.isfinite(loss):
        if nan_dir:
            os.makedirs(nan_dir, exist_ok=True)
            torch.save({k: v for k, v in batch.items() if isinstance(v, torch.Tensor)},
                       os.path.join(nan_dir, f"nan_batch_step{state.step}.pt"))
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        state.optimizer.step()
    state.step += 1
    state.drop_count += int(batch["drop"].sum())
    state.item_count += len(batch["drop"])
    rec = {"step": state.step, "l_diff": l_diff.item(), "l_cons": l_cons.item(), "total": loss.item(),
           "r_max": r.detach().abs().max().item(), "degenerate": degenerate}
    state.curve.append(rec)
    return rec


def write_curve(curve: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "l_diff", "l_cons", "total"])
        for r in curve:
            w.writerow([r["step"], f"{r['l_diff']:.8g}", f"{r['l_cons']:.8g}", f"{r['total']:.8g}"])


def read_curve(path: str) -> list[dict]:
    with open(path) as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]


def run_training(state: TrainState, data: TrainingData, cfg: TrainConfig, mode: str = "full",
                 out_dir: str | None = None, checkpoint_fn=None) -> TrainState:
    """Run ``cfg.steps`` steps; writes curve.csv (and checkpoints via ``checkpoint_fn``) under out_dir."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    nan_dir = os.path.join(out_dir, "nan") if out_dir else None
    for _ in range(cfg.steps):
        rec = train_step(state, data, cfg, mode, nan_dir)
        if cfg.log_every and rec["step"] % cfg.log_every == 0:
            log.info("%s step %d total %.4f diff %.4f cons %.4f", mode, rec["step"], rec["total"],
                     rec["l_diff"], rec["l_cons"])
        if checkpoint_fn and cfg.ckpt_every and rec["step"] % cfg.ckpt_every == 0:
            checkpoint_fn(state)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_curve(state.curve, os.path.join(out_dir, "curve.csv"))
    return state


def moving_average(x, k: int = 50) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        return np.array([x.mean()]) if len(x) else x
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[k:] - c[:-k]) / k


# ------------------------------------------------------------------ sampling

def generate(state: TrainState, text: torch.Tensor, traj: torch.Tensor | None, pressure: torch.Tensor | None,
             mode: str = "full", cfg_scale: float = 5.0, seed: int = 0, control_scale: str = "unit") -> torch.Tensor:
    """Sample motions (raw feature units) for a batch of conditions.

    full / regression use the control branch; regression takes a single step
    from t = T. ``control_scale`` is "unit" (r' added as trained) or "tau"
    (r' multiplied by the per-step control strength).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if control_scale not in ("unit", "tau"):
        raise ValueError("control_scale must be 'unit' or 'tau'")
    length = traj.shape[1] if traj is not None else pressure.shape[1]
    state.branch.eval()
    state.shift_net.eval()
    backbone = state.backbone
    if mode == "text_only":
        def predict(x, t, c):
            return backbone(x, t, c)
    else:
        with torch.no_grad():
            shift = shift_features(state.shift_net, pressure)

        def predict(x, t, c):
            scale = 1.0
            if control_scale == "tau":
                scale = control_strength(t, length, state.sched).to(x.dtype).reshape(-1, 1, 1)
            return guided_predict_x0(x, t, c, traj, shift, backbone, state.branch, scale=scale)[0]
    x = sample_cfg(predict, text, state.sched, length, cfg_scale, seed, single_step=(mode == "regression"))
    return state.normalizer.denormalize(x)
