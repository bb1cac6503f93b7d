"""Metrics: CoP error, foot skating, joint errors, trajectory error, FID, R-precision, and a toy evaluator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from scipy import linalg
from torch import nn
from torch.nn import functional as F

from .features import freeze
from .motion_repr import CONTACT_JOINTS, FEAT_DIM, LOWER_BODY, foot_displacement
from .pressure import Calibration, cop_to_world, pixel_cop_sequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoPConfig:
    tau: float = 0.05
    joints: tuple[int, ...] = CONTACT_JOINTS

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("CoP temperature must be positive")


def cop_weights(joints: np.ndarray, cfg: CoPConfig = CoPConfig()) -> np.ndarray:
    """Softmax of -height/tau over the foot joints, (N, K)."""
    y = np.asarray(joints, dtype=np.float64)[:, list(cfg.joints), 1]
    z = -y / cfg.tau
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def motion_cop(joints: np.ndarray, cfg: CoPConfig = CoPConfig()) -> np.ndarray:
    """(N, 3) weighted ground projection of the foot joints (y = 0)."""
    j = np.asarray(joints, dtype=np.float64)[:, list(cfg.joints)]
    w = cop_weights(joints, cfg)
    cop = np.einsum("nk,nkd->nd", w, j)
    cop[:, 1] = 0.0
    return cop


def cop_distances(pressure: np.ndarray, joints: np.ndarray, calib: Calibration,
                  cfg: CoPConfig = CoPConfig()) -> np.ndarray:
    """Per-contact-frame distances between pressure CoP and motion CoP."""
    pressure = np.asarray(pressure)
    joints = np.asarray(joints)
    if pressure.shape[0] != joints.shape[0]:
        raise ValueError(f"frame counts differ: {pressure.shape[0]} vs {joints.shape[0]}")
    cop_px, contact = pixel_cop_sequence(pressure)
    world = cop_to_world(cop_px[contact], calib)
    return np.linalg.norm(world - motion_cop(joints, cfg)[contact], axis=-1)


def cop_error(pressure: np.ndarray, joints: np.ndarray, calib: Calibration,
              cfg: CoPConfig = CoPConfig()) -> float | None:
    """Mean over contact frames; None when no frame has contact."""
    d = cop_distances(pressure, joints, calib, cfg)
    return float(d.mean()) if d.size else None


def skating_flags(joints: np.ndarray, contacts: np.ndarray, vel_thresh: float = 0.005):
    """(in-contact mask, violation mask) over (frame, foot) pairs."""
    joints = np.asarray(joints)
    contacts = np.asarray(contacts) > 0.5
    if contacts.shape != (joints.shape[0], len(CONTACT_JOINTS)):
        raise ValueError(f"contacts must be (N, 4), got {contacts.shape}")
    disp = foot_displacement(joints)
    return contacts, contacts & (disp > vel_thresh)


def foot_skating(joints: np.ndarray, contacts: np.ndarray, vel_thresh: float = 0.005) -> float:
    c, v = skating_flags(joints, contacts, vel_thresh)
    n = int(c.sum())
    return float(v.sum()) / n if n else 0.0


def joint_errors(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    d = np.linalg.norm(pred - gt, axis=-1)
    return float(d.mean()), float(d[..., list(LOWER_BODY)].mean())


def trajectory_error_ratio(preds, gts, threshold: float = 0.5) -> float:
    if len(preds) == 0 or len(preds) != len(gts):
        raise ValueError("need equally many (and at least one) predicted and reference sequences")
    bad = 0
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        dev = np.linalg.norm(p[:, 0, [0, 2]] - g[:, 0, [0, 2]], axis=-1)
        bad += bool((dev > threshold).any())
    return bad / len(preds)


def fid(feats_a: np.ndarray, feats_b: np.ndarray, jitter: float = 1e-6) -> float:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("features contain non-finite values")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if _near_singular(cov_a, jitter) or _near_singular(cov_b, jitter):
        eye = np.eye(cov_a.shape[0])
        cov_a, cov_b = cov_a + jitter * eye, cov_b + jitter * eye
    # tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), which is symmetric PSD
    sa = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(sa @ cov_b @ sa)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(cross))
    return max(d, 0.0)


def _near_singular(cov: np.ndarray, tol: float) -> bool:
    w = linalg.eigvalsh((cov + cov.T) / 2)
    return bool(w.min() <= tol * max(w.max(), 1.0))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def r_precision(motion_feats, text_feats, k: int = 3) -> float:
    m = torch.as_tensor(np.asarray(motion_feats), dtype=torch.float64)
    t = torch.as_tensor(np.asarray(text_feats), dtype=torch.float64)
    if m.shape != t.shape:
        raise ValueError("motion and text features must be paired")
    if m.shape[0] < k:
        raise ValueError(f"batch of {m.shape[0]} is smaller than k = {k}")
    sim = F.normalize(m, dim=-1) @ F.normalize(t, dim=-1).T
    own = sim.diagonal()[:, None]
    rank = (sim > own).sum(1)  # ties count in the motion's favour
    return float((rank < k).double().mean())


def batched_r_precision(motion_feats, text_feats, batch: int = 32, k: int = 3) -> float:
    """Mean R-precision over consecutive batches of a fixed size (tail dropped)."""
    n = (len(motion_feats) // batch) * batch
    if n == 0:
        raise ValueError(f"need at least {batch} pairs")
    scores = [r_precision(motion_feats[i:i + batch], text_feats[i:i + batch], k) for i in range(0, n, batch)]
    return float(np.mean(scores))


# ------------------------------------------------------------------ evaluator

class Evaluator(nn.Module):
    """Paired motion / caption encoders producing unit vectors of width 512."""

    def __init__(self, hidden: int = 256, dim: int = 512, text_dim: int = 512):
        super().__init__()
        self.register_buffer("mean", torch.zeros(FEAT_DIM))
        self.register_buffer("std", torch.ones(FEAT_DIM))
        self.motion_in = nn.Linear(FEAT_DIM, hidden)
        self.gru = nn.GRU(hidden, hidden, batch_first=True, bidirectional=True)
        self.motion_out = nn.Linear(4 * hidden, dim)
        self.text_mlp = nn.Sequential(nn.Linear(text_dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def encode_motion(self, poses: torch.Tensor) -> torch.Tensor:
        x = (poses.float() - self.mean) / self.std
        # the initial heading is arbitrary; the evaluator should not key on it
        x = x.clone()
        x[:, 0, 0] = 0.0
        h, _ = self.gru(F.gelu(self.motion_in(x)))
        feat = torch.cat([h.mean(1), h.max(1).values], -1)
        return F.normalize(self.motion_out(feat), dim=-1)

    def encode_text(self, text: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.text_mlp(text.float()), dim=-1)


@dataclass
class EvaluatorConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 0.1


def train_evaluator(poses: torch.Tensor, text: torch.Tensor, cfg: EvaluatorConfig | None = None,
                    seed: int = 0) -> Evaluator:
    """Contrastive (InfoNCE) training on raw clips (C, L, 263) and caption embeddings (C, K, 512)."""
    cfg = cfg or EvaluatorConfig()
    if len(poses) == 0:
        raise ValueError("cannot train the evaluator on an empty split")
    torch.manual_seed(seed)
    ev = Evaluator()
    flat = poses.reshape(-1, FEAT_DIM).float()
    ev.mean.copy_(flat.mean(0))
    ev.std.copy_(flat.std(0).clamp_min(1e-2))
    opt = torch.optim.AdamW(ev.parameters(), lr=cfg.lr, weight_decay=1e-4)
    gen = torch.Generator().manual_seed(seed + 3)
    b = min(cfg.batch_size, len(poses))
    for step in range(cfg.steps):
        ids = torch.randperm(len(poses), generator=gen)[:b]
        level = torch.randint(text.shape[1], (b,), generator=gen)
        m = ev.encode_motion(poses[ids])
        t = ev.encode_text(text[ids, level])
        logits = m @ t.T / cfg.temperature
        target = torch.arange(b)
        loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 250 == 0:
            log.info("evaluator step %d loss %.4f", step, loss.item())
    return freeze(ev)


def embed_motions(ev: Evaluator, poses: torch.Tensor, batch: int = 256) -> np.ndarray:
    with torch.no_grad():
        return torch.cat([ev.encode_motion(poses[i:i + batch]) for i in range(0, len(poses), batch)]).numpy()


def embed_texts(ev: Evaluator, text: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return ev.encode_text(text).numpy()


# ------------------------------------------------------------------ reports

@dataclass
class MetricReport:
    fid: float | None = None
    foot_skating: float | None = None
    cop_error_m: float | None = None
    lmpjpe_m: float | None = None
    mpjpe_m: float | None = None
    traj_error_ratio: float | None = None
    r_precision_top3: float | None = None

    def __post_init__(self):
        for name in ("foot_skating", "traj_error_ratio", "r_precision_top3"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} is not a ratio")
        for name in ("fid", "cop_error_m", "lmpjpe_m", "mpjpe_m"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} = {v} is negative")

    def to_json(self, method: str) -> str:
        return json.dumps({"method": method, **asdict(self)}, sort_keys=False)


_COLUMNS = [("FID", "fid", 3), ("Foot Skating", "foot_skating", 4), ("CoP Error", "cop_error_m", 4),
            ("LMPJPE", "lmpjpe_m", 4), ("MPJPE", "mpjpe_m", 4), ("Traj Err (>50cm)", "traj_error_ratio", 3),
            ("R-prec Top-3", "r_precision_top3", 3)]


def format_table(reports: dict[str, MetricReport]) -> str:
    head = ["Method"] + [c for c, _, _ in _COLUMNS]
    rows = [head]
    for method, rep in reports.items():
        row = [method]
        for _, key, digits in _COLUMNS:
            v = getattr(rep, key)
            row.append("-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def evaluate_set(pred_joints, gt_joints, pressures, calibs, pred_contacts, pred_feats=None, gt_feats=None,
                 text_feats=None, cop_cfg: CoPConfig = CoPConfig(), vel_thresh: float = 0.005) -> MetricReport:
    """Aggregate metrics over a set of sequences.

    CoP distances and skating pairs are pooled over all frames of the set;
    joint errors are averaged per sequence.
    """
    cop_d, skate_c, skate_v, mp, lmp = [], 0, 0, [], []
    for pj, gj, pr, cal, pc in zip(pred_joints, gt_joints, pressures, calibs, pred_contacts):
        cop_d.append(cop_distances(pr, pj, cal, cop_cfg))
        c, v = skating_flags(pj, pc, vel_thresh)
        skate_c += int(c.sum())
        skate_v += int(v.sum())
        a, b = joint_errors(pj, gj)
        mp.append(a)
        lmp.append(b)
    cop_all = np.concatenate(cop_d) if cop_d else np.zeros(0)
    rep = MetricReport(
        foot_skating=skate_v / skate_c if skate_c else 0.0,
        cop_error_m=float(cop_all.mean()) if cop_all.size else None,
        mpjpe_m=float(np.mean(mp)), lmpjpe_m=float(np.mean(lmp)),
        traj_error_ratio=trajectory_error_ratio(pred_joints, gt_joints),
    )
    if pred_feats is not None and gt_feats is not None:
        rep.fid = fid(pred_feats, gt_feats)
    if pred_feats is not None and text_feats is not None and len(pred_feats) >= 32:
        rep.r_precision_top3 = batched_r_precision(pred_feats, text_feats)
    return rep


def report_fields() -> list[str]:
    return [f.name for f in fields(MetricReport)]
