"""Fast built-in oracle checks, run by ``pressure-motion selftest``.

Each check compares a library routine against an independent slow
implementation or a closed form. Runs in a few seconds on a CPU.
"""

from __future__ import annotations

import math
import tempfile
import traceback
from typing import Callable

import numpy as np
import torch

CHECKS: list[tuple[str, Callable[[], None]]] = []


def check(name: str):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn
    return deco


def _close(a, b, tol, what):
    if not abs(a - b) <= tol:
        raise AssertionError(f"{what}: {a!r} vs {b!r} (tol {tol})")


@check("schedule products and endpoints")
def _schedule():
    from .diffusion import make_schedule
    s = make_schedule(1000)
    _close(s.alpha_bars[0], 0.9999, 1e-15, "alpha_bar_1")
    acc = 1.0
    for t in range(1000):
        acc *= 1.0 - s.betas[t]
        _close(s.alpha_bars[t], acc, 1e-12, f"alpha_bar_{t + 1}")
    if not np.all(np.diff(s.alpha_bars) < 0):
        raise AssertionError("alpha_bar not decreasing")


@check("6D rotation decode vs Gram-Schmidt by hand")
def _rot6d():
    from .motion_repr import rotation_from_6d
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = rng.normal(size=6)
        a1, a2 = d[:3], d[3:]
        b1 = a1 / math.sqrt(sum(v * v for v in a1))
        u2 = a2 - sum(x * y for x, y in zip(b1, a2)) * b1
        b2 = u2 / math.sqrt(sum(v * v for v in u2))
        b3 = np.array([b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]])
        want = np.stack([b1, b2, b3], axis=1)
        _close(float(np.abs(rotation_from_6d(d) - want).max()), 0.0, 1e-12, "6D decode")


@check("motion round-trip on a synthetic walk")
def _roundtrip():
    from .motion_repr import encode_motion, recover_global_joints
    from .synth import MotionRecipe, synthesize
    joints, rots, _, _ = synthesize(MotionRecipe("walk", 60, seed=1))
    err = float(np.abs(recover_global_joints(encode_motion(joints, rots)) - joints).max())
    _close(err, 0.0, 1e-4, "round-trip error")


@check("pixel CoP vs double loop")
def _cop():
    from .pressure import pixel_cop
    m = np.random.default_rng(1).random((9, 13))
    tot = sx = sz = 0.0
    for r in range(m.shape[0]):
        for c in range(m.shape[1]):
            tot += m[r, c]
            sx += c * m[r, c]
            sz += r * m[r, c]
    x, z = pixel_cop(m)
    _close(x, sx / tot, 1e-9, "cop x")
    _close(z, sz / tot, 1e-9, "cop z")


@check("diffusion loss vs brute-force sum")
def _dloss():
    from .training import diffusion_loss
    g = torch.Generator().manual_seed(0)
    a = torch.randn(2, 3, 263, generator=g, dtype=torch.float64)
    b = torch.randn(2, 3, 263, generator=g, dtype=torch.float64)
    want = sum((u - v) ** 2 for u, v in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel()
    _close(diffusion_loss(a, b).item(), want, 1e-9, "diffusion loss")


@check("Frechet distance closed forms")
def _fid():
    from .evaluation import fid
    a = np.array([[-1.0], [1.0]]) / math.sqrt(2)
    b = 1.0 + np.array([[-1.0], [1.0]]) * math.sqrt(2)
    _close(fid(a, b), 2.0, 1e-6, "1-D case")
    x = np.random.default_rng(0).normal(size=(50, 8))
    _close(fid(x, x), 0.0, 1e-6, "self distance")


@check("zero-initialised branch leaves sampling unchanged")
def _zero_init():
    from .control import ControlBranch, guided_predict_x0
    from .diffusion import Denoiser, DenoiserConfig, make_schedule, sample_cfg
    from .features import freeze
    torch.manual_seed(0)
    bb = freeze(Denoiser(DenoiserConfig(latent=32, layers=2, heads=2, ff=64, dropout=0.0, max_len=16)))
    br = ControlBranch(bb)
    text = torch.randn(1, 512)
    traj, shift = torch.randn(1, 8, 39), torch.randn(1, 8, 256)
    sched = make_schedule(5)
    a = sample_cfg(bb, text, sched, 8, seed=3)
    b = sample_cfg(lambda x, t, c: guided_predict_x0(x, t, c, traj, shift, bb, br)[0], text, sched, 8, seed=3)
    if not torch.equal(a, b):
        raise AssertionError("controlled and plain samples differ")


@check("dataset and checkpoint round-trips")
def _io():
    from .storage import CheckpointBundle, load_checkpoint, read_dataset, save_checkpoint, tree_digest, write_dataset
    from .synth import MotionRecipe, generate_record
    rec = generate_record(MotionRecipe("squat", 40, seed=2), name="s0")
    with tempfile.TemporaryDirectory() as d:
        write_dataset({"train": [rec]}, d + "/ds")
        before = tree_digest(d + "/ds")
        back = read_dataset(d + "/ds")["train"][0]
        if tree_digest(d + "/ds") != before:
            raise AssertionError("reader modified files")
        for f in ("pose", "joints", "pressure"):
            if getattr(back, f).tobytes() != getattr(rec, f).tobytes():
                raise AssertionError(f"{f} payload changed")
        w = {"m": {"w": torch.randn(3, 3)}}
        save_checkpoint(CheckpointBundle(w, {"m": True}, {"T": 5}, {"seed": 0}), d + "/c.pt")
        got = load_checkpoint(d + "/c.pt")
        if not torch.equal(got.weights["m"]["w"], w["m"]["w"]) or got.frozen != {"m": True}:
            raise AssertionError("checkpoint changed")


def run(verbose: bool = True) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
            status = "ok"
        except Exception as e:  # report and continue
            failures += 1
            status = f"FAIL ({type(e).__name__}: {e})"
            if verbose:
                traceback.print_exc()
        if verbose:
            print(f"[selftest] {name}: {status}")
    return failures
