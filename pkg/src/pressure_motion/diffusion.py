"""DDPM machinery, a toy text encoder and the transformer denoiser (x0-prediction)."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .motion_repr import FEAT_DIM

TEXT_DIM = 512
MAX_LEN = 196


# ------------------------------------------------------------------ schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by t - 1 for t = 1..T."""

    betas: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02
    rescale: bool = False

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        ab = np.cumprod(alphas)
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        var = b * (1.0 - ab_prev) / (1.0 - ab)
        var[0] = b[0]
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", ab)
        object.__setattr__(self, "alpha_bars_prev", ab_prev)
        object.__setattr__(self, "posterior_var", var)
        object.__setattr__(self, "coef_x0", b * np.sqrt(ab_prev) / (1.0 - ab))
        object.__setattr__(self, "coef_xt", (1.0 - ab_prev) * np.sqrt(alphas) / (1.0 - ab))

    @property
    def T(self) -> int:
        return len(self.betas)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "rescale": self.rescale}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["T"], d["beta_start"], d["beta_end"], d["rescale"])

    def gather(self, name: str, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Table value at 1-based t, shaped to broadcast over ``like`` (B, ...)."""
        table = torch.as_tensor(getattr(self, name), dtype=like.dtype)
        v = table[t.long() - 1]
        return v.reshape(-1, *([1] * (like.ndim - 1)))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, rescale: bool = False) -> NoiseSchedule:
    """Linear beta schedule. ``rescale`` stretches the endpoints by 1000/T so short chains still end near pure noise."""
    if T < 1:
        raise ValueError("T must be at least 1")
    lo, hi = (beta_start, beta_end)
    if rescale:
        k = 1000.0 / T
        lo, hi = lo * k, min(hi * k, 0.999)
    betas = np.linspace(lo, hi, T, dtype=np.float64) if T > 1 else np.array([lo], dtype=np.float64)
    return NoiseSchedule(betas, beta_start, beta_end, rescale)


def _check_t(t: torch.Tensor, sched: NoiseSchedule):
    if bool((t < 1).any()) or bool((t > sched.T).any()):
        raise ValueError(f"t must lie in [1, {sched.T}]")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and noise {tuple(eps.shape)} differ")
    t = torch.as_tensor(t).reshape(-1)
    if t.numel() == 1 and x0.ndim >= 1:
        t = t.expand(x0.shape[0] if x0.ndim > 2 else 1)
    _check_t(t, sched)
    like = x0 if x0.ndim > 2 else x0[None]
    ab = sched.gather("alpha_bars", t, like)
    out = ab.sqrt() * like + (1.0 - ab).sqrt() * (eps if eps.ndim > 2 else eps[None])
    return out if x0.ndim > 2 else out[0]


# ------------------------------------------------------------------ text

class HashTextEncoder(nn.Module):
    """Frozen toy encoder: hashed tokens -> seeded embedding table -> mean -> fixed projection to 512.

    The empty prompt maps to the all-zero null embedding.
    """

    def __init__(self, buckets: int = 4096, dim: int = 64, out_dim: int = TEXT_DIM, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.buckets = buckets
        self.register_buffer("table", torch.randn(buckets, dim, generator=g))
        self.register_buffer("proj", torch.randn(dim, out_dim, generator=g) / math.sqrt(dim))

    @staticmethod
    def tokens(prompt: str) -> list[str]:
        return "".join(ch.lower() if ch.isalnum() else " " for ch in prompt).split()

    def encode_one(self, prompt: str) -> tuple[torch.Tensor, bool]:
        toks = self.tokens(prompt)
        if not toks:
            return torch.zeros(self.proj.shape[1]), True
        ids = torch.tensor([zlib.crc32(t.encode()) % self.buckets for t in toks])
        return self.table[ids].mean(0) @ self.proj, False

    def forward(self, prompts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        embs, nulls = zip(*(self.encode_one(p) for p in prompts)) if prompts else ((), ())
        if not prompts:
            return torch.zeros(0, self.proj.shape[1]), torch.zeros(0, dtype=torch.bool)
        return torch.stack(embs), torch.tensor(nulls)


_DEFAULT_TEXT = None


def encode_text(prompt: str, encoder: HashTextEncoder | None = None) -> tuple[torch.Tensor, bool]:
    """Prompt -> (512-dim embedding, is_null)."""
    global _DEFAULT_TEXT
    if encoder is None:
        if _DEFAULT_TEXT is None:
            _DEFAULT_TEXT = HashTextEncoder()
        encoder = _DEFAULT_TEXT
    with torch.no_grad():
        return encoder.encode_one(prompt)


# ------------------------------------------------------------------ denoiser

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], -1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], -1)
    return emb


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


@dataclass
class DenoiserConfig:
    latent: int = 512
    layers: int = 4
    heads: int = 4
    ff: int = 1024
    dropout: float = 0.1
    max_len: int = MAX_LEN
    text_dim: int = TEXT_DIM


class Denoiser(nn.Module):
    """Transformer encoder over [condition token; frame tokens] predicting the clean motion."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        d = cfg.latent
        self.input_proj = nn.Linear(FEAT_DIM, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.text_proj = nn.Linear(cfg.text_dim, d)
        self.register_buffer("pos", sinusoidal_positions(cfg.max_len + 1, d).float(), persistent=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(d, cfg.heads, cfg.ff, cfg.dropout, activation="gelu", batch_first=True)
            for _ in range(cfg.layers))
        self.output_proj = nn.Linear(d, FEAT_DIM)

    def cond_token(self, t: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.cfg.latent).to(self.input_proj.weight.dtype))
        return temb + self.text_proj(text)

    def forward(self, x: torch.Tensor, t: torch.Tensor, text: torch.Tensor,
                token_add: torch.Tensor | None = None, return_layers: bool = False):
        if x.ndim != 3 or x.shape[-1] != FEAT_DIM:
            raise ValueError(f"x must be (B, L, {FEAT_DIM}), got {tuple(x.shape)}")
        b, n, _ = x.shape
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds the maximum {self.cfg.max_len}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        tokens = self.input_proj(x)
        if token_add is not None:
            tokens = tokens + token_add
        h = torch.cat([self.cond_token(t, text)[:, None], tokens], 1) + self.pos[: n + 1].to(tokens.dtype)
        h = self.drop(h)
        outs = []
        for layer in self.layers:
            h = layer(h)
            outs.append(h[:, 1:])
        y = self.output_proj(h[:, 1:])
        return (y, outs) if return_layers else y

    def predict_x0(self, x_t, t, text, controls=None):
        return self(x_t, t, text)


def denoiser_forward(x_t, t, text, model: Denoiser) -> torch.Tensor:
    """Single (L, 263) or batched inference call in eval mode without gradients."""
    squeeze = x_t.ndim == 2
    x = x_t[None] if squeeze else x_t
    txt = text[None] if text.ndim == 1 else text
    tt = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
    was = model.training
    model.eval()
    with torch.no_grad():
        y = model(x, tt, txt)
    model.train(was)
    return y[0] if squeeze else y


# ------------------------------------------------------------------ normalisation

class MotionNormalizer(nn.Module):
    """Per-feature z-scoring; frame 0 (initial heading, zero velocities) has its own statistics."""

    def __init__(self, mean: torch.Tensor | None = None, std: torch.Tensor | None = None):
        super().__init__()
        self.register_buffer("mean", torch.zeros(2, FEAT_DIM) if mean is None else mean.float())
        self.register_buffer("std", torch.ones(2, FEAT_DIM) if std is None else std.float())

    @classmethod
    def fit(cls, poses: torch.Tensor, min_std: float = 1e-2) -> "MotionNormalizer":
        """poses: (B, L, 263) clips all starting at their own frame 0."""
        p = torch.as_tensor(poses, dtype=torch.float64)
        first, rest = p[:, 0], p[:, 1:].reshape(-1, FEAT_DIM)
        mean = torch.stack([first.mean(0), rest.mean(0)])
        std = torch.stack([first.std(0, unbiased=False), rest.std(0, unbiased=False)]).clamp_min(min_std)
        return cls(mean, std)

    def _stats(self, n: int, like: torch.Tensor):
        idx = torch.ones(n, dtype=torch.long)
        idx[0] = 0
        return self.mean[idx].to(like.dtype), self.std[idx].to(like.dtype)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self._stats(x.shape[-2], x)
        return (x - m) / s

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        m, s = self._stats(x.shape[-2], x)
        return x * s + m


# ------------------------------------------------------------------ sampling

Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def sample_cfg(predict: Predictor, text: torch.Tensor, sched: NoiseSchedule, length: int,
               cfg_scale: float = 5.0, seed: int = 0, null_text: torch.Tensor | None = None,
               single_step: bool = False) -> torch.Tensor:
    """Ancestral DDPM sampling with classifier-free guidance on x0.

    ``predict(x_t, t, text)`` returns x0 estimates; controls, if any, are bound
    into the predictor so both guidance branches see them. With cfg_scale == 1
    the unconditional branch is skipped. ``single_step`` returns the guided
    x0 estimate at t = T without iterating.
    """
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be non-negative")
    text = text[None] if text.ndim == 1 else text
    b = text.shape[0]
    null_text = torch.zeros_like(text) if null_text is None else null_text.expand_as(text)
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(b, length, FEAT_DIM, generator=gen)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            tt = torch.full((b,), t, dtype=torch.long)
            if cfg_scale == 1.0:
                x0 = predict(x, tt, text)
            else:
                u = predict(x, tt, null_text)
                c = predict(x, tt, text)
                x0 = u + cfg_scale * (c - u)
            if single_step:
                return x0
            mean = float(sched.coef_x0[t - 1]) * x0 + float(sched.coef_xt[t - 1]) * x
            if t > 1:
                noise = torch.randn(x.shape, generator=gen)
                x = mean + math.sqrt(sched.posterior_var[t - 1]) * noise
            else:
                x = mean
    return x


# ------------------------------------------------------------------ pretraining

@dataclass
class BackboneTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    weight_decay: float = 1e-4
    text_drop: float = 0.1
    log_every: int = 100


def pretrain_backbone(poses_norm: torch.Tensor, text: torch.Tensor, sched: NoiseSchedule,
                      model_cfg: DenoiserConfig, cfg: BackboneTrainConfig | None = None, seed: int = 0,
                      log: Callable[[str], None] | None = None):
    """Text-to-motion training of the denoiser on normalised clips. Returns (frozen model, loss curve).

    ``text`` is (C, 512) or (C, K, 512) with K caption levels per clip.
    """
    cfg = cfg or BackboneTrainConfig()
    if len(poses_norm) == 0:
        raise ValueError("cannot pretrain on an empty split")
    torch.manual_seed(seed)
    model = Denoiser(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(seed + 1)
    curve = []
    model.train()
    for step in range(cfg.steps):
        ids = torch.randint(len(poses_norm), (cfg.batch_size,), generator=gen)
        x0 = poses_norm[ids]
        if text.ndim == 3:  # (C, K, 512): one caption level per item
            c = text[ids, torch.randint(text.shape[1], (len(ids),), generator=gen)].clone()
        else:
            c = text[ids].clone()
        drop = torch.rand(len(ids), generator=gen) < cfg.text_drop
        c[drop] = 0.0
        t = torch.randint(1, sched.T + 1, (len(ids),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        pred = model(q_sample(x0, t, eps, sched), t, c)
        loss = torch.mean((pred - x0) ** 2)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        curve.append(loss.item())
        if log and cfg.log_every and step % cfg.log_every == 0:
            log(f"backbone step {step} loss {loss.item():.4f}")
    from .features import freeze
    return freeze(model), curve
