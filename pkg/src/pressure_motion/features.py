"""Pressure encoders: a frozen trajectory regressor and a trainable posture-shift encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .motion_repr import KEY_JOINTS, TRAJ_DIM, crop_pose, extract_trajectory_targets
from .pressure import grid_positional_encoding, temporal_diff

log = logging.getLogger(__name__)

SHIFT_DIM = 256
# x/z columns of the five key-joint positions inside the 39-dim layout
_POS_X = [3 * k for k in range(len(KEY_JOINTS))]
_POS_Z = [3 * k + 2 for k in range(len(KEY_JOINTS))]


class TrajectoryFeatures(NamedTuple):
    traj: torch.Tensor     # (B, N, 39), motion frame
    offset: torch.Tensor   # (B, 2), mat frame -> motion frame
    mat: torch.Tensor      # (B, N, 39), mat frame


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    module.frozen = True
    return module


def is_frozen(module: nn.Module) -> bool:
    return bool(getattr(module, "frozen", False))


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.c1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.c2(F.relu(self.c1(x))))


@dataclass
class TrajNetConfig:
    height: int = 64
    width: int = 64
    mat_scale: float = 0.06
    channels: tuple[int, int, int] = (8, 16, 32)
    input_pool: int = 2
    hidden: int = 256
    heads: int = 4
    pressure_scale: float = 10.0


class TrajNet(nn.Module):
    """Per-frame residual CNN -> GRU -> self-attention -> linear head (39)."""

    def __init__(self, cfg: TrajNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or TrajNetConfig()
        c1, c2, c3 = cfg.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.ReLU(), _ResBlock(c1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(), _ResBlock(c2),
            nn.Conv2d(c2, c3, 3, stride=1, padding=1), nn.ReLU(),
        )
        fh, fw = -(-cfg.height // (4 * cfg.input_pool)), -(-cfg.width // (4 * cfg.input_pool))
        self.frame_proj = nn.Linear(c3 * fh * fw + 3 * c3, cfg.hidden)
        self.gru = nn.GRU(cfg.hidden, cfg.hidden, batch_first=True)
        self.attn = nn.MultiheadAttention(cfg.hidden, cfg.heads, batch_first=True)
        self.norm = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, TRAJ_DIM)
        ys = torch.linspace(-1, 1, -(-cfg.height // cfg.input_pool))
        xs = torch.linspace(-1, 1, -(-cfg.width // cfg.input_pool))
        self.register_buffer("coords", torch.stack(torch.meshgrid(xs, ys, indexing="xy"), 0), persistent=False)
        centre = torch.zeros(TRAJ_DIM)
        centre[_POS_X] = (cfg.width - 1) / 2 * cfg.mat_scale
        centre[_POS_Z] = (cfg.height - 1) / 2 * cfg.mat_scale
        self.register_buffer("centre", centre, persistent=False)

    def frame_features(self, maps: torch.Tensor) -> torch.Tensor:
        b, n, h, w = maps.shape
        x = maps.reshape(b * n, 1, h, w) / self.cfg.pressure_scale
        if self.cfg.input_pool > 1:
            x = F.avg_pool2d(x, self.cfg.input_pool, ceil_mode=True)
        x = torch.cat([x, self.coords.expand(b * n, 2, *x.shape[-2:])], 1)
        f = self.encoder(x)                                   # (BN, C, h', w')
        bn, c, fh, fw = f.shape
        # spatial soft-argmax keeps sub-pixel position information explicit
        att = torch.softmax(f.flatten(2), dim=-1).reshape(bn, c, fh, fw)
        gy = torch.linspace(-1, 1, fh, dtype=f.dtype)
        gx = torch.linspace(-1, 1, fw, dtype=f.dtype)
        kx = (att.sum(2) * gx).sum(-1)
        ky = (att.sum(3) * gy).sum(-1)
        mass = torch.log1p(maps.reshape(bn, -1).sum(-1, keepdim=True) / self.cfg.pressure_scale).expand(bn, c)
        feats = torch.cat([f.flatten(1), kx, ky, mass], 1)
        return F.relu(self.frame_proj(feats)).reshape(b, n, -1)

    def forward(self, maps: torch.Tensor) -> TrajectoryFeatures:
        if maps.ndim != 4:
            raise ValueError(f"pressure must be (B, N, H, W), got {tuple(maps.shape)}")
        if maps.shape[-2:] != (self.cfg.height, self.cfg.width):
            raise ValueError(f"pressure maps are {tuple(maps.shape[-2:])} but the weights expect "
                             f"{(self.cfg.height, self.cfg.width)}")
        h = self.frame_features(maps)
        h, _ = self.gru(h)
        a, _ = self.attn(h, h, h, need_weights=False)
        h = self.norm(h + a)
        mat = self.head(h) + self.centre
        # frame 0 of every clip has its root on the motion origin
        offset = -mat[:, 0, [0, 2]]
        shift = torch.zeros_like(mat)
        shift[..., _POS_X] = offset[:, None, 0:1].expand(-1, mat.shape[1], len(_POS_X))
        shift[..., _POS_Z] = offset[:, None, 1:2].expand(-1, mat.shape[1], len(_POS_Z))
        return TrajectoryFeatures(mat + shift, offset, mat)


def f_traj_forward(maps, net: TrajNet) -> TrajectoryFeatures:
    """Inference helper: accepts (N, H, W) or (B, N, H, W), numpy or torch."""
    x = torch.as_tensor(np.asarray(maps) if not isinstance(maps, torch.Tensor) else maps, dtype=torch.float32)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(x)
    net.train(was_training)
    if squeeze:
        out = TrajectoryFeatures(out.traj[0], out.offset[0], out.mat[0])
    return out


# ---------------------------------------------------------------- pretraining

@dataclass
class TrajTrainConfig:
    steps: int = 1500
    batch_size: int = 16
    clip_len: int = 40
    lr: float = 1e-3
    weight_decay: float = 1e-4
    offset_weight: float = 1.0
    log_every: int = 50


def clip_targets(pose: np.ndarray, start: int, length: int) -> np.ndarray:
    return extract_trajectory_targets(crop_pose(pose, start, length))


class ClipBank:
    """Fixed-length clips cut from records, with trajectory targets and mat offsets.

    Clips start every ``stride`` frames; the last window is aligned to the end.
    """

    def __init__(self, records, clip_len: int, stride: int | None = None):
        self.clip_len = clip_len
        stride = stride or clip_len
        self.records = [r for r in records if r.frames >= clip_len]
        if not self.records:
            raise ValueError(f"no record has at least {clip_len} frames")
        index, targets, offsets, poses = [], [], [], []
        for i, rec in enumerate(self.records):
            starts = list(range(0, rec.frames - clip_len + 1, stride))
            if starts[-1] != rec.frames - clip_len:
                starts.append(rec.frames - clip_len)
            pose = rec.pose.astype(np.float64)
            for s in starts:
                index.append((i, s))
                cp = crop_pose(pose, s, clip_len)
                poses.append(cp)
                targets.append(extract_trajectory_targets(cp))
                root = rec.joints[s, 0].astype(np.float64)
                offsets.append(np.array(rec.calib.offset) - root[[0, 2]])
        self.index = index
        self.poses = torch.tensor(np.stack(poses), dtype=torch.float32)
        self.targets = torch.tensor(np.stack(targets), dtype=torch.float32)
        self.offsets = torch.tensor(np.stack(offsets), dtype=torch.float32)
        self.captions = [self.records[i].captions for i, _ in index]

    def __len__(self):
        return len(self.index)

    def pressure(self, ids) -> torch.Tensor:
        return torch.stack([
            torch.from_numpy(self.records[self.index[k][0]].pressure[self.index[k][1]:self.index[k][1] + self.clip_len])
            for k in ids
        ]).float()

    def calib_offset(self, k: int) -> np.ndarray:
        return self.offsets[k].numpy().astype(np.float64)


def traj_loss(out: TrajectoryFeatures, targets: torch.Tensor, offsets: torch.Tensor,
              offset_weight: float = 1.0) -> torch.Tensor:
    return F.mse_loss(out.traj, targets) + offset_weight * F.mse_loss(out.offset, offsets)


def key_joint_error(out: TrajectoryFeatures, targets: torch.Tensor) -> float:
    """Mean Euclidean error (m) over the five key-joint positions."""
    p = out.traj[..., :15].reshape(*out.traj.shape[:-1], 5, 3)
    g = targets[..., :15].reshape(*targets.shape[:-1], 5, 3)
    return float(torch.linalg.vector_norm(p - g, dim=-1).mean())


def pretrain_f_traj(records, cfg: TrajTrainConfig | None = None, net_cfg: TrajNetConfig | None = None,
                    seed: int = 0, bank: ClipBank | None = None):
    """Fit the trajectory regressor on training clips. Returns (frozen net, loss curve)."""
    cfg = cfg or TrajTrainConfig()
    if not records and bank is None:
        raise ValueError("cannot pretrain on an empty split")
    bank = bank or ClipBank(records, cfg.clip_len, stride=max(1, cfg.clip_len // 4))
    torch.manual_seed(seed)
    net = TrajNet(net_cfg)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.steps, pct_start=0.1)
    gen = torch.Generator().manual_seed(seed)
    curve = []
    net.train()
    for step in range(cfg.steps):
        ids = torch.randint(len(bank), (min(cfg.batch_size, len(bank)),), generator=gen).tolist()
        out = net(bank.pressure(ids))
        loss = traj_loss(out, bank.targets[ids], bank.offsets[ids], cfg.offset_weight)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"trajectory pretraining diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sched.step()
        curve.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("traj step %d loss %.5f", step, loss.item())
    return freeze(net), curve


def evaluate_f_traj(net: TrajNet, bank: ClipBank, batch_size: int = 32) -> dict:
    losses, errs, counts = [], [], []
    for i in range(0, len(bank), batch_size):
        ids = list(range(i, min(i + batch_size, len(bank))))
        out = f_traj_forward(bank.pressure(ids), net)
        losses.append(float(traj_loss(out, bank.targets[ids], bank.offsets[ids])))
        errs.append(key_joint_error(out, bank.targets[ids]))
        counts.append(len(ids))
    w = np.array(counts) / sum(counts)
    return {"loss": float(np.dot(w, losses)), "key_joint_error": float(np.dot(w, errs))}


# ---------------------------------------------------------------- shift encoder

@dataclass
class ShiftNetConfig:
    height: int = 64
    width: int = 64
    enc_dim: int = 16
    branch_channels: int = 8
    mid_channels: int = 16
    kernels: tuple[int, ...] = (3, 5, 7)
    input_pool: int = 2
    pressure_scale: float = 10.0


class ShiftNet(nn.Module):
    """Multi-scale convolution over (P, dP, e) followed by a per-frame linear map to 256.

    Inputs are average-pooled first (footprints are several pixels wide). The
    grid code e is identical for every frame, so its contribution to the
    first (linear) convolution is computed once per call and broadcast; this is
    the same function as convolving the channel concatenation.
    """

    def __init__(self, cfg: ShiftNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ShiftNetConfig()
        bc = cfg.branch_channels
        self.branches = nn.ModuleList(
            nn.Conv2d(2 + cfg.enc_dim, bc, k, stride=2, padding=k // 2) for k in cfg.kernels)
        self.mid = nn.Conv2d(bc * len(cfg.kernels), cfg.mid_channels, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(8)
        self.proj = nn.Linear(cfg.mid_channels * 64, SHIFT_DIM)
        gh, gw = -(-cfg.height // cfg.input_pool), -(-cfg.width // cfg.input_pool)
        enc = torch.tensor(grid_positional_encoding(gh, gw, cfg.enc_dim), dtype=torch.float32)
        self.register_buffer("grid", enc.permute(2, 0, 1).contiguous(), persistent=False)

    def forward(self, maps: torch.Tensor, dmaps: torch.Tensor, grid: torch.Tensor | None = None) -> torch.Tensor:
        if maps.shape != dmaps.shape or maps.ndim != 4:
            raise ValueError(f"P and dP must share a (B, N, H, W) shape, got {tuple(maps.shape)} and {tuple(dmaps.shape)}")
        b, n, h, w = maps.shape
        if (h, w) != (self.cfg.height, self.cfg.width):
            raise ValueError(f"pressure maps are {(h, w)} but the weights expect {(self.cfg.height, self.cfg.width)}")
        x = torch.stack([maps, dmaps], 2).reshape(b * n, 2, h, w) / self.cfg.pressure_scale
        if self.cfg.input_pool > 1:
            x = F.avg_pool2d(x, self.cfg.input_pool, ceil_mode=True)
        grid = self.grid if grid is None else grid
        if grid.shape != (self.cfg.enc_dim,) + tuple(x.shape[-2:]):
            raise ValueError(f"grid encoding must be {(self.cfg.enc_dim,) + tuple(x.shape[-2:])}, got {tuple(grid.shape)}")
        outs = []
        for conv in self.branches:
            y = F.conv2d(x, conv.weight[:, :2], None, conv.stride, conv.padding)
            e = F.conv2d(grid[None], conv.weight[:, 2:], conv.bias, conv.stride, conv.padding)
            outs.append(F.relu(y + e))
        y = F.relu(self.mid(torch.cat(outs, 1)))
        y = self.pool(y).flatten(1)
        return self.proj(y).reshape(b, n, SHIFT_DIM)


def f_shift_forward(maps, net: ShiftNet, dmaps=None) -> torch.Tensor:
    """Inference helper on a single (N, H, W) sequence; dP is derived when omitted."""
    p = np.asarray(maps, dtype=np.float32)
    d = temporal_diff(p) if dmaps is None else np.asarray(dmaps, dtype=np.float32)
    with torch.no_grad():
        return net(torch.from_numpy(p)[None], torch.from_numpy(d)[None])[0]


def temporal_diff_torch(maps: torch.Tensor) -> torch.Tensor:
    """dP along the frame axis (dim -3) with a zero first frame."""
    return torch.cat([torch.zeros_like(maps[..., :1, :, :]), maps[..., 1:, :, :] - maps[..., :-1, :, :]], dim=-3)
