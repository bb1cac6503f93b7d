"""Pressure control branch: a trainable copy of the denoiser feeding adapter blocks.

The copy sees x_t plus a projection of the trajectory features. Each of its
layer outputs passes through a zero-initialised linear map and is added into a
chain of adapter blocks (self-attention, cross-attention to the shift features
and text, feed-forward). A zero-initialised head maps the chain to a 263-dim
residual that is added to the frozen backbone's x0 estimate.
"""

from __future__ import annotations

import copy

import torch
from torch import nn

from .diffusion import Denoiser, NoiseSchedule, sinusoidal_positions
from .features import SHIFT_DIM
from .motion_repr import FEAT_DIM, TRAJ_DIM


def _zero_linear(d_in: int, d_out: int) -> nn.Linear:
    lin = nn.Linear(d_in, d_out)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


class AdapterBlock(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.n1, self.n2, self.n3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, s: torch.Tensor, memory: torch.Tensor, zr: torch.Tensor, need_weights: bool = False):
        h = self.n1(s)
        s = s + self.drop(self.self_attn(h, h, h, need_weights=False)[0])
        h = self.n2(s)
        a, w = self.cross_attn(h, memory, memory, need_weights=need_weights, average_attn_weights=True)
        s = s + self.drop(a)
        s = s + self.drop(self.ff(self.n3(s)))
        return s + zr, w


class ControlBranch(nn.Module):
    def __init__(self, backbone: Denoiser, shift_dim: int = SHIFT_DIM):
        super().__init__()
        cfg = backbone.cfg
        d = cfg.latent
        self.controlnet = copy.deepcopy(backbone)
        self.controlnet.frozen = False
        for p in self.controlnet.parameters():
            p.requires_grad_(True)
        self.controlnet.train()
        self.traj_proj = nn.Linear(TRAJ_DIM, d)
        self.zero = nn.ModuleList(_zero_linear(d, d) for _ in range(cfg.layers))
        self.shift_proj = nn.Linear(shift_dim, d)
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.register_buffer("pos", sinusoidal_positions(cfg.max_len, d).float(), persistent=False)
        self.blocks = nn.ModuleList(AdapterBlock(d, cfg.heads, cfg.ff, cfg.dropout) for _ in range(cfg.layers))
        self.out = _zero_linear(d, FEAT_DIM)

    @property
    def depth(self) -> int:
        return len(self.zero)

    def controlnet_forward(self, x_t, t, text, traj) -> list[torch.Tensor]:
        if traj.shape[:2] != x_t.shape[:2]:
            raise ValueError(f"trajectory frames {tuple(traj.shape[:2])} do not match motion frames {tuple(x_t.shape[:2])}")
        _, layers = self.controlnet(x_t, t, text, token_add=self.traj_proj(traj), return_layers=True)
        return layers

    def adapter_forward(self, zr: list[torch.Tensor], shift: torch.Tensor, text: torch.Tensor,
                        return_attention: bool = False):
        if len(zr) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} residual levels, got {len(zr)}")
        n = shift.shape[1]
        mem = self.shift_proj(shift) + self.pos[:n].to(shift.dtype)
        mem = torch.cat([mem, self.text_proj(text)[:, None]], 1)
        s = zr[0]
        attn = []
        for block, z in zip(self.blocks, zr):
            s, w = block(s, mem, z, need_weights=return_attention)
            attn.append(w)
        r = self.out(s)
        return (r, attn) if return_attention else r

    def forward(self, x_t, t, text, traj, shift) -> torch.Tensor:
        r = self.controlnet_forward(x_t, t, text, traj)
        zr = [z(h) for z, h in zip(self.zero, r)]
        return self.adapter_forward(zr, shift, text)


def guided_predict_x0(x_t, t, text, traj, shift, backbone: Denoiser, branch: ControlBranch,
                      scale: float | torch.Tensor = 1.0, mask_branch: bool = False):
    """x0 estimate of the frozen backbone plus the (optionally scaled) control residual.

    Returns (x0', r') so callers can log the residual.
    """
    base = backbone(x_t, t, text)
    if mask_branch:
        r = torch.zeros_like(base)
    else:
        r = branch(x_t, t, text, traj, shift)
    return base + scale * r, r


def control_strength(t, length: int, sched: NoiseSchedule):
    """20 * min(Sigma_t, 0.01) / L."""
    if length < 1:
        raise ValueError("length must be positive")
    t = torch.as_tensor(t)
    if bool((t < 1).any()) or bool((t > sched.T).any()):
        raise ValueError(f"t must lie in [1, {sched.T}]")
    var = torch.as_tensor(sched.posterior_var, dtype=torch.float64)[t.long() - 1]
    return 20.0 * torch.clamp(var, max=0.01) / length
