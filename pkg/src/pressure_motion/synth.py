"""Synthetic motion/pressure world standing in for captured data.

Motions are built procedurally from a small body driver (root path, heading,
foot placements, arm swing) with analytic two-bone leg IK, so feet planted on
the ground are exactly stationary. Pressure is rendered from the foot joints
that are in contact: each deposits an isotropic Gaussian footprint and the
body weight is shared by a softmax over the contacting joints' heights.
"""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .motion_repr import (
    CONTACT_JOINTS, DEFAULT_SKELETON, FPS, L_ANKLE, L_FOOT, N_JOINTS, R_ANKLE, R_FOOT,
    Skeleton, detect_foot_contacts, encode_motion, rot_y_np, _wrap,
)
from .pressure import Calibration

log = logging.getLogger(__name__)

KINDS = ("stand", "sway", "walk", "turn", "jump", "squat")
GRAVITY = 9.81
MIN_FRAMES, MAX_FRAMES = 40, 160


@dataclass(frozen=True)
class MotionRecipe:
    kind: str
    duration: int = 80
    seed: int = 0
    mass_kg: float = 70.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}; expected one of {KINDS}")
        if not MIN_FRAMES <= self.duration <= MAX_FRAMES:
            raise ValueError(f"duration must be within {MIN_FRAMES}-{MAX_FRAMES} frames")
        if not self.mass_kg > 0:
            raise ValueError("mass must be positive")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


@dataclass
class SequenceRecord:
    name: str
    pose: np.ndarray          # (N, 263) float32
    joints: np.ndarray        # (N, 22, 3) float32
    pressure: np.ndarray      # (N, H, W) float32
    calib: Calibration
    captions: list[str]
    mass_kg: float
    height_m: float
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return self.pose.shape[0]


# ------------------------------------------------------------------ body driver

def _rot_x(a):
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    z, o = np.zeros_like(a), np.ones_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _min_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched smallest rotation taking unit vectors a onto b, (..., 3) -> (..., 3, 3)."""
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    v = np.cross(a, b)
    c = np.sum(a * b, axis=-1)
    vx = np.zeros(v.shape + (3,))
    vx[..., 0, 1], vx[..., 0, 2] = -v[..., 2], v[..., 1]
    vx[..., 1, 0], vx[..., 1, 2] = v[..., 2], -v[..., 0]
    vx[..., 2, 0], vx[..., 2, 1] = -v[..., 1], v[..., 0]
    k = 1.0 / np.clip(1.0 + c, 1e-12, None)
    return np.eye(3) + vx + (vx @ vx) * k[..., None, None]


@dataclass
class _Driver:
    root: np.ndarray       # (N, 3)
    yaw: np.ndarray        # (N,)
    lean: np.ndarray       # (N,)
    ankles: np.ndarray     # (N, 2, 3) left, right
    foot_yaw: np.ndarray   # (N, 2)
    pitch: np.ndarray      # (N, 2) heel lift
    swing: np.ndarray      # (N, 2) shoulder swing, positive = forward
    bend: np.ndarray       # (N, 2) elbow flexion


_UPPER = (3, 6, 9, 12, 13, 14, 15, 16, 17)
_LEGS = ((1, 4, 7, 10), (2, 5, 8, 11))        # hip, knee, ankle, foot per side
_ARMS = ((16, 18, 20), (17, 19, 21))          # shoulder, elbow, wrist per side


def _pose_body(skel: Skeleton, d: _Driver) -> tuple[np.ndarray, np.ndarray, int]:
    """Driver -> (joints (N,22,3), global rotations (N,22,3,3), unreachable-frame count)."""
    rest = skel.rest_positions()
    n = d.root.shape[0]
    joints = np.zeros((n, N_JOINTS, 3))
    rots = np.tile(np.eye(3), (n, N_JOINTS, 1, 1))
    r_yaw = rot_y_np(d.yaw)
    r_body = r_yaw @ _rot_x(d.lean)

    joints[:, 0] = d.root
    rots[:, 0] = r_yaw
    for j in _UPPER:
        joints[:, j] = d.root + np.einsum("nij,j->ni", r_body, rest[j] - rest[0])
        rots[:, j] = r_body

    for side, (sh, el, wr) in enumerate(_ARMS):
        r_upper = r_body @ _rot_x(-d.swing[:, side])
        r_fore = r_body @ _rot_x(-d.swing[:, side] - d.bend[:, side])
        joints[:, el] = joints[:, sh] + np.einsum("nij,j->ni", r_upper, rest[el] - rest[sh])
        joints[:, wr] = joints[:, el] + np.einsum("nij,j->ni", r_fore, rest[wr] - rest[el])
        rots[:, sh], rots[:, el], rots[:, wr] = r_upper, r_fore, r_fore

    unreachable = 0
    for side, (hp, kn, an, ft) in enumerate(_LEGS):
        hip = d.root + np.einsum("nij,j->ni", r_yaw, rest[hp] - rest[0])
        l1 = np.linalg.norm(rest[kn] - rest[hp])
        l2 = np.linalg.norm(rest[an] - rest[kn])
        target = d.ankles[:, side]
        vec = target - hip
        dist = np.linalg.norm(vec, axis=-1)
        too_far = dist > l1 + l2 - 1e-6
        unreachable += int(too_far.sum())
        dist_c = np.clip(dist, abs(l1 - l2) + 1e-6, l1 + l2 - 1e-6)
        dirn = vec / dist[:, None]
        ankle = hip + dirn * dist_c[:, None]
        a = (l1 ** 2 - l2 ** 2 + dist_c ** 2) / (2 * dist_c)
        h = np.sqrt(np.clip(l1 ** 2 - a ** 2, 0.0, None))
        r_foot = rot_y_np(d.foot_yaw[:, side])
        pole = r_foot[:, :, 2]
        pole = pole - np.sum(pole * dirn, -1, keepdims=True) * dirn
        pole /= np.linalg.norm(pole, axis=-1, keepdims=True)
        knee = hip + a[:, None] * dirn + h[:, None] * pole
        r_ankle = r_foot @ _rot_x(d.pitch[:, side])
        toe = ankle + np.einsum("nij,j->ni", r_ankle, rest[ft] - rest[an])
        joints[:, hp], joints[:, kn], joints[:, an], joints[:, ft] = hip, knee, ankle, toe

        # leg segments: rotation = foot heading x minimal swing of the rest bone
        for jt, child, start, end in ((hp, kn, hip, knee), (kn, an, knee, ankle)):
            inv = np.swapaxes(r_foot, -1, -2)
            cur = np.einsum("nij,nj->ni", inv, end - start)
            rots[:, jt] = r_foot @ _min_rotation(np.broadcast_to(rest[child] - rest[jt], cur.shape), cur)
        rots[:, an] = r_ankle
        rots[:, ft] = r_ankle
    return joints, rots, unreachable


def _stance_ankles(rest: np.ndarray, yaw: np.ndarray, center: np.ndarray | None = None) -> np.ndarray:
    """Rest ankle placements rotated by heading about ``center`` (default origin)."""
    r = rot_y_np(yaw)
    out = np.stack([np.einsum("...ij,j->...i", r, rest[an] * np.array([1.0, 0.0, 1.0]))
                    + np.array([0.0, rest[an, 1], 0.0]) for an in (L_ANKLE, R_ANKLE)], axis=-2)
    if center is not None:
        out = out + center[..., None, :]
    return out


def _driver_base(skel: Skeleton, n: int, yaw0: float) -> _Driver:
    rest = skel.rest_positions()
    yaw = np.full(n, yaw0)
    root = np.tile(np.array([0.0, rest[0, 1], 0.0]), (n, 1))
    ankles = np.broadcast_to(_stance_ankles(rest, np.array(yaw0)), (n, 2, 3)).copy()
    return _Driver(root=root, yaw=yaw, lean=np.zeros(n), ankles=ankles,
                   foot_yaw=np.full((n, 2), yaw0), pitch=np.zeros((n, 2)),
                   swing=np.full((n, 2), 0.05), bend=np.full((n, 2), 0.15))


def _speed_word(speed: float) -> str:
    if speed < 0.5:
        return "slowly"
    if speed < 0.65:
        return "at a steady pace"
    return "briskly"


def _count_word(k: int) -> str:
    return {1: "once", 2: "twice", 3: "three times"}.get(k, f"{k} times")


def _gen_stand(skel, n, rng, yaw0):
    d = _driver_base(skel, n, yaw0)
    t = np.arange(n) / FPS
    freq = rng.uniform(0.15, 0.35)
    amp = rng.uniform(0.02, 0.08)
    d.swing = 0.05 + amp * np.stack([np.sin(2 * np.pi * freq * t), np.sin(2 * np.pi * freq * t + 1.0)], -1)
    secs = n / FPS
    caps = [
        f"The person stands still in place for about {secs:.0f} seconds with arms relaxed and swaying gently.",
        "The person stands still in place with arms relaxed at the sides.",
        "Someone is standing still without moving the feet.",
        "A person stands in place.",
        "The person is standing.",
    ]
    return d, caps, {}


def _gen_sway(skel, n, rng, yaw0):
    rest = skel.rest_positions()
    d = _driver_base(skel, n, yaw0)
    t = np.arange(n) / FPS
    freq = rng.uniform(0.3, 0.6)
    amp = rng.uniform(0.04, 0.08) * skel.rest_offsets[0, 1] / 0.93
    lateral = amp * np.sin(2 * np.pi * freq * t)
    r = rot_y_np(np.array(yaw0))
    d.root = np.stack([np.zeros(n), np.full(n, rest[0, 1] - 0.02 * rest[0, 1] / 0.93), np.zeros(n)], -1)
    d.root += lateral[:, None] * r[:, 0][None, :]
    # the unloaded heel lifts, pivoting about the fixed toe
    lift = 0.18
    d.pitch = np.stack([lift * np.clip(-lateral / amp, 0, None), lift * np.clip(lateral / amp, 0, None)], -1)
    toe_local = rest[[L_FOOT, R_FOOT]] - rest[[L_ANKLE, R_ANKLE]]
    toes = _stance_ankles(rest, np.array(yaw0)) + np.einsum("ij,sj->si", r, toe_local)
    for s in range(2):
        r_ankle = rot_y_np(np.full(n, yaw0)) @ _rot_x(d.pitch[:, s])
        d.ankles[:, s] = toes[s] - np.einsum("nij,j->ni", r_ankle, toe_local[s])
    d.swing = 0.05 + 0.1 * np.stack([lateral, -lateral], -1) / amp
    pace = "slowly" if freq < 0.45 else "quickly"
    caps = [
        f"The person sways {pace} from side to side, shifting body weight from one foot to the other and lifting each heel in turn.",
        f"The person sways {pace} from side to side, shifting weight between the feet.",
        "Someone shifts their weight from side to side.",
        "A person sways side to side.",
        "The person is swaying.",
    ]
    return d, caps, {"sway_freq": freq, "sway_amp": amp}


def commanded_walk_speed(recipe: MotionRecipe, max_distance: float = 2.4) -> float:
    """Speed the walk generator uses: a seeded draw capped so the path fits the mat."""
    rng = np.random.default_rng(recipe.seed)
    rng.uniform(-np.pi, np.pi)  # heading draw comes first
    speed = rng.uniform(0.4, 0.8)
    return float(min(speed, max_distance * FPS / (recipe.duration - 1)))


def _gen_walk(skel, n, rng, yaw0, speed):
    rest = skel.rest_positions()
    size = rest[0, 1] / 0.93
    d = _driver_base(skel, n, yaw0)
    t = np.arange(n) / FPS
    step = 0.25 * size
    ts = step / speed
    t_sw = 0.9 * ts
    lift = rng.uniform(0.06, 0.10) * size
    fwd = rot_y_np(np.array(yaw0))[:, 2]
    side = rot_y_np(np.array(yaw0))[:, 0]

    d.root = np.zeros((n, 3))
    d.root[:, 1] = rest[0, 1] - 0.06 * size + 0.01 * size * np.cos(4 * np.pi * t / (2 * ts))
    d.root += (speed * t)[:, None] * fwd[None, :]

    for s, first in ((0, 0.0), (1, ts)):
        u = np.zeros(n)
        y = np.zeros(n)
        start_u = 0.0
        t0 = first
        while t0 < t[-1] + 1e-9:
            land = speed * (t0 + t_sw) + step / 2
            phase = (t - t0) / t_sw
            during = (phase >= 0) & (phase <= 1)
            u[during] = start_u + (land - start_u) * _smoothstep(phase[during])
            y[during] = lift * np.sin(np.pi * phase[during])
            after = t > t0 + t_sw
            u[after] = land
            start_u = land
            t0 += 2 * ts
        base = rest[L_ANKLE if s == 0 else R_ANKLE]
        lateral = base[0]
        d.ankles[:, s] = (u[:, None] * fwd[None, :] + lateral * side[None, :]
                          + np.array([0.0, base[1], 0.0]) + y[:, None] * np.array([0.0, 1.0, 0.0])
                          + base[2] * fwd[None, :])
    phase = np.pi * t / ts
    d.swing = 0.05 + 0.3 * np.stack([-np.sin(phase), np.sin(phase)], -1)
    d.lean = np.full(n, 0.05)
    w = _speed_word(speed)
    caps = [
        f"The person walks forward {w} in a straight line for about {n / FPS:.0f} seconds, swinging both arms naturally.",
        f"The person walks forward {w} in a straight line.",
        f"Someone walks {w} straight ahead.",
        "A person walks forward.",
        "The person is walking.",
    ]
    return d, caps, {"speed": speed}


def _gen_turn(skel, n, rng, yaw0):
    rest = skel.rest_positions()
    size = rest[0, 1] / 0.93
    d = _driver_base(skel, n, yaw0)
    t = np.arange(n) / FPS
    total = rng.uniform(np.pi / 2, np.pi) * rng.choice([-1.0, 1.0])
    t_turn = 0.8 * t[-1]
    d.yaw = yaw0 + total * _smoothstep(t / t_turn)
    d.root[:, 1] = rest[0, 1] - 0.03 * size
    ts = 0.5
    t_sw = 0.4
    for s, first in ((0, 0.1), (1, 0.1 + ts)):
        yaw_f = np.full(n, yaw0)
        cur = yaw0
        t0 = first
        while t0 < t[-1] + 1e-9:
            target = yaw0 + total * _smoothstep((t0 + t_sw) / t_turn)
            phase = (t - t0) / t_sw
            during = (phase >= 0) & (phase <= 1)
            yaw_f[during] = cur + (target - cur) * _smoothstep(phase[during])
            yaw_f[phase > 1] = target
            cur = target
            t0 += 2 * ts
        d.foot_yaw[:, s] = yaw_f
        an = L_ANKLE if s == 0 else R_ANKLE
        d.ankles[:, s] = np.einsum("nij,j->ni", rot_y_np(yaw_f), rest[an])
        # small lift while the foot re-orients
        moving = np.abs(np.gradient(yaw_f)) > 1e-9
        lift = np.zeros(n)
        t0 = first
        while t0 < t[-1] + 1e-9:
            phase = (t - t0) / t_sw
            during = (phase >= 0) & (phase <= 1)
            lift[during] = 0.05 * size * np.sin(np.pi * phase[during])
            t0 += 2 * ts
        d.ankles[:, s, 1] += lift * moving
    side = "left" if total > 0 else "right"
    deg = int(round(np.degrees(abs(total)) / 45.0) * 45)
    caps = [
        f"The person turns to the {side} on the spot by about {deg} degrees, stepping in place with small steps.",
        f"The person turns {deg} degrees to the {side} on the spot.",
        f"Someone turns around to the {side}.",
        "A person turns in place.",
        "The person is turning.",
    ]
    return d, caps, {"turn": total}


def _gen_jump(skel, n, rng, yaw0):
    rest = skel.rest_positions()
    size = rest[0, 1] / 0.93
    d = _driver_base(skel, n, yaw0)
    t = np.arange(n) / FPS
    h0 = rest[0, 1]
    height = rng.uniform(0.1, 0.3)
    t_f = 2.0 * np.sqrt(2.0 * height / GRAVITY)
    crouch, extend, land, idle = 0.35, 0.15, 0.35, 0.25
    cycle = crouch + extend + t_f + land + idle
    n_jumps = max(1, min(3, int((t[-1] - idle) // cycle)))
    y = np.full(n, h0)
    feet_up = np.zeros(n)
    arms = np.zeros(n)
    t0 = idle
    for _ in range(n_jumps):
        dip = 0.12 * size
        a = (t >= t0) & (t < t0 + crouch)
        y[a] = h0 - dip * _smoothstep((t[a] - t0) / crouch)
        b = (t >= t0 + crouch) & (t < t0 + crouch + extend)
        y[b] = h0 - dip * (1 - _smoothstep((t[b] - t0 - crouch) / extend))
        tf0 = t0 + crouch + extend
        c = (t >= tf0) & (t < tf0 + t_f)
        tau = t[c] - tf0
        v0 = GRAVITY * t_f / 2
        rise = v0 * tau - 0.5 * GRAVITY * tau ** 2
        y[c] = h0 + rise
        feet_up[c] = rise
        arms[c] = 0.5 * np.sin(np.pi * tau / t_f)
        l0 = tf0 + t_f
        e = (t >= l0) & (t < l0 + land)
        y[e] = h0 - 0.08 * size * np.sin(np.pi * (t[e] - l0) / land)
        t0 += cycle
    d.root[:, 1] = y
    d.ankles[:, :, 1] += feet_up[:, None]
    d.swing = 0.05 + np.stack([arms, arms], -1)
    high = "high" if height > 0.22 else "low"
    k = n_jumps
    caps = [
        f"The person jumps {high} on the spot {_count_word(k)}, crouching before each take-off and landing softly with arms raised.",
        f"The person jumps {high} in place {_count_word(k)}.",
        f"Someone jumps up and down {_count_word(k)}.",
        "A person jumps in place.",
        "The person is jumping.",
    ]
    return d, caps, {"jump_height": height, "jumps": n_jumps}


def _gen_squat(skel, n, rng, yaw0):
    rest = skel.rest_positions()
    size = rest[0, 1] / 0.93
    d = _driver_base(skel, n, yaw0)
    t = np.arange(n) / FPS
    reps = int(rng.integers(1, 4))
    reps = max(1, min(reps, int(t[-1] // 1.2)))
    depth = rng.uniform(0.2, 0.38) * size
    period = t[-1] / reps
    down = depth * 0.5 * (1 - np.cos(2 * np.pi * t / period))
    frac = down / depth
    fwd = rot_y_np(np.array(yaw0))[:, 2]
    d.root[:, 1] = rest[0, 1] - down
    d.root += (-0.35 * down)[:, None] * fwd[None, :]
    d.lean = 0.6 * frac * depth / (0.38 * size)
    d.swing = 0.05 + 1.2 * np.stack([frac, frac], -1)
    deep = "deep" if depth > 0.3 * size else "shallow"
    caps = [
        f"The person performs {reps} {deep} squat{'s' if reps > 1 else ''}, bending the knees and leaning forward while raising both arms in front.",
        f"The person does {reps} {deep} squat{'s' if reps > 1 else ''} with arms held forward.",
        "Someone bends the knees to squat down and stands back up.",
        "A person does squats.",
        "The person is squatting.",
    ]
    return d, caps, {"reps": reps, "depth": depth}


def synthesize(recipe: MotionRecipe, skeleton: Skeleton = DEFAULT_SKELETON):
    """Recipe -> (joints (N,22,3), rotations (N,22,3,3), captions, params)."""
    rng = np.random.default_rng(recipe.seed)
    yaw0 = rng.uniform(-np.pi, np.pi)
    skel = skeleton.scaled(recipe.scale)
    n = recipe.duration
    if recipe.kind == "walk":
        rng.uniform(0.4, 0.8)  # keep the stream aligned with commanded_walk_speed
        speed = commanded_walk_speed(recipe)
        d, caps, params = _gen_walk(skel, n, rng, yaw0, speed)
    else:
        gen = {"stand": _gen_stand, "sway": _gen_sway, "turn": _gen_turn,
               "jump": _gen_jump, "squat": _gen_squat}[recipe.kind]
        d, caps, params = gen(skel, n, rng, yaw0)
    joints, rots, unreachable = _pose_body(skel, d)
    if unreachable:
        log.warning("%s: %d leg targets out of reach", recipe, unreachable)
    params = dict(params, yaw0=float(yaw0), unreachable=unreachable)
    return joints, rots, caps, params


def generate_motion(recipe: MotionRecipe, skeleton: Skeleton = DEFAULT_SKELETON):
    """Recipe -> (pose (N, 263), five captions from most to least detailed)."""
    joints, rots, caps, _ = synthesize(recipe, skeleton)
    return encode_motion(joints, rots, skeleton), caps


# ------------------------------------------------------------------ pressure

def support_weights(heights: np.ndarray, contact: np.ndarray, tau: float = 0.05) -> np.ndarray:
    """Softmax of -height/tau over the contacting joints; zero rows where nothing touches."""
    heights = np.asarray(heights, dtype=np.float64)
    contact = np.asarray(contact) > 0.5
    logits = np.where(contact, -heights / tau, -np.inf)
    any_c = contact.any(axis=-1, keepdims=True)
    logits = np.where(any_c, logits, 0.0)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits) * contact
    s = w.sum(axis=-1, keepdims=True)
    return np.where(any_c, w / np.where(s > 0, s, 1.0), 0.0)


def _gaussian_1d(center: float, size: int, sigma: float) -> tuple[np.ndarray, float]:
    """Samples on pixel indices plus the full-lattice normaliser."""
    idx = np.arange(size)
    g = np.exp(-0.5 * ((idx - center) / sigma) ** 2)
    lo = int(np.floor(center - 12 * sigma))
    hi = int(np.ceil(center + 12 * sigma))
    full = np.exp(-0.5 * ((np.arange(lo, hi + 1) - center) / sigma) ** 2).sum()
    return g, full


def render_pressure(joints: np.ndarray, contacts: np.ndarray, mass_kg: float, calib: Calibration,
                    height: int = 64, width: int = 64, sigma_px: float = 2.0, tau: float = 0.05):
    """Render (N, H, W) maps from contacting foot joints. Returns (maps, clipped footprint count)."""
    joints = np.asarray(joints, dtype=np.float64)
    feet = joints[:, list(CONTACT_JOINTS)]            # (N, 4, 3)
    w = support_weights(feet[..., 1], contacts, tau)  # (N, 4)
    px = calib.to_pixel(feet[..., [0, 2]])            # (N, 4, 2) col,row
    force = mass_kg * GRAVITY
    maps = np.zeros((joints.shape[0], height, width))
    clipped = 0
    for n in range(joints.shape[0]):
        for k in range(4):
            if w[n, k] <= 0:
                continue
            col, row = px[n, k]
            if not (-0.5 <= col <= width - 0.5 and -0.5 <= row <= height - 0.5):
                clipped += 1
            gx, nx = _gaussian_1d(col, width, sigma_px)
            gz, nz = _gaussian_1d(row, height, sigma_px)
            maps[n] += (w[n, k] * force / (nx * nz)) * np.outer(gz, gx)
    if clipped:
        log.warning("%d footprints fell outside the mat", clipped)
    return maps, clipped


def support_centroid(joints: np.ndarray, contacts: np.ndarray, tau: float = 0.05) -> np.ndarray:
    """Support-weighted XZ centroid (N, 3) of contacting foot joints (NaN when airborne)."""
    feet = np.asarray(joints, dtype=np.float64)[:, list(CONTACT_JOINTS)]
    w = support_weights(feet[..., 1], contacts, tau)
    out = np.einsum("nk,nkj->nj", w, feet)
    out[:, 1] = 0.0
    out[w.sum(-1) == 0] = np.nan
    return out


def fit_calibration(joints: np.ndarray, rng: np.random.Generator, height: int = 64, width: int = 64,
                    scale: float = 0.06, margin_px: float = 8.0) -> Calibration:
    """Place the mat so every foot joint lands inside it, with a random slack offset."""
    feet = np.asarray(joints)[:, list(CONTACT_JOINTS)][..., [0, 2]].reshape(-1, 2)
    lo, hi = feet.min(0), feet.max(0)
    extent = np.array([width, height], dtype=np.float64) - 1
    offset = np.zeros(2)
    for a in range(2):
        span = (hi[a] - lo[a]) / scale
        slack = extent[a] - span - 2 * margin_px
        if slack >= 0:
            start_px = margin_px + rng.uniform(0, slack)
        else:
            start_px = (extent[a] - span) / 2
        offset[a] = lo[a] - start_px * scale
    return Calibration((scale, scale), tuple(offset))


@dataclass
class WorldConfig:
    mat_height: int = 64
    mat_width: int = 64
    mat_scale: float = 0.06
    sigma_px: float = 2.0
    contact_height: float = 0.05
    contact_vel: float = 0.005
    support_tau: float = 0.05


def generate_record(recipe: MotionRecipe, world: WorldConfig | None = None, name: str | None = None,
                    skeleton: Skeleton = DEFAULT_SKELETON) -> SequenceRecord:
    world = world or WorldConfig()
    joints, rots, caps, params = synthesize(recipe, skeleton)
    pose = encode_motion(joints, rots, skeleton, height_thresh=world.contact_height,
                         vel_thresh=world.contact_vel)
    contacts = detect_foot_contacts(joints, world.contact_height, world.contact_vel)
    rng = np.random.default_rng([recipe.seed, 1])
    calib = fit_calibration(joints, rng, world.mat_height, world.mat_width, world.mat_scale)
    maps, clipped = render_pressure(joints, contacts, recipe.mass_kg, calib, world.mat_height,
                                    world.mat_width, world.sigma_px, world.support_tau)
    height = float(skeleton.scaled(recipe.scale).rest_positions()[:, 1].max() + 0.1 * recipe.scale)
    meta = {"kind": recipe.kind, "seed": recipe.seed, "scale": recipe.scale,
            "clipped": clipped, "augmented": False, **params}
    return SequenceRecord(name or f"{recipe.kind}_{recipe.seed}", pose.astype(np.float32),
                          joints.astype(np.float32), maps.astype(np.float32), calib, caps,
                          recipe.mass_kg, height, meta)


# --------------------------------------------------------------- augmentation

def rotate_pose(pose: np.ndarray, theta: float, fps: int = FPS) -> np.ndarray:
    """Rotate a whole motion about the vertical axis through the origin.

    Everything but the initial heading is expressed in the heading frame, so
    only the row-0 yaw slot changes.
    """
    out = np.array(pose, dtype=np.float64, copy=True)
    out[0, 0] = _wrap(out[0, 0] / fps + theta) * fps
    return out


def augment_record(rec: SequenceRecord, theta: float, rng: np.random.Generator,
                   margin_px: float = 6.0) -> SequenceRecord:
    """Rotate motion and pressure together by theta and shift the pressure on the mat.

    The pressure image is rotated about the pixel under the motion origin and
    translated by whole pixels; the calibration offset absorbs the shift.
    """
    sx, sz = rec.calib.scale
    if not np.isclose(sx, sz):
        raise ValueError("rotation augmentation needs isotropic pixels")
    r = rot_y_np(np.array(theta))
    joints = np.einsum("ij,nkj->nki", r, rec.joints.astype(np.float64))
    pose = rotate_pose(rec.pose, theta)

    n, h, w = rec.pressure.shape
    c, s = np.cos(theta), np.sin(theta)
    # (row, col) rotation matching x' = c x + s z, z' = -s x + c z
    rq = np.array([[c, -s], [s, c]])
    q0 = rec.calib.to_pixel((0.0, 0.0))[::-1]  # (row, col) of the motion origin

    # choose an integer shift that keeps the rotated footprint inside the mat
    ys, xs = np.nonzero(rec.pressure.max(axis=0) > 0)
    shift = np.zeros(2)
    if len(ys):
        pts = np.stack([ys, xs], -1).astype(np.float64)
        rot_pts = q0 + (pts - q0) @ rq.T
        lo, hi = rot_pts.min(0), rot_pts.max(0)
        for a, size in enumerate((h, w)):
            lo_s = margin_px - lo[a]
            hi_s = size - 1 - margin_px - hi[a]
            shift[a] = np.round(rng.uniform(lo_s, hi_s)) if hi_s >= lo_s else np.round((lo_s + hi_s) / 2)
    inv = rq.T
    matrix = np.eye(3)
    matrix[1:, 1:] = inv
    offset = np.zeros(3)
    offset[1:] = q0 - inv @ (shift + q0)
    maps = ndimage.affine_transform(rec.pressure.astype(np.float64), matrix, offset=offset,
                                    order=1, mode="constant", cval=0.0)
    maps = np.clip(maps, 0.0, None)
    calib = rec.calib.shifted(-shift[1] * sx, -shift[0] * sz)
    meta = dict(rec.meta, augmented=True, theta=float(theta))
    return SequenceRecord(rec.name + f"_aug{theta:+.3f}", pose.astype(np.float32), joints.astype(np.float32),
                          maps.astype(np.float32), calib, list(rec.captions), rec.mass_kg, rec.height_m, meta)


# ------------------------------------------------------------------ datasets

@dataclass
class DataConfig:
    n_sequences: int = 100
    kinds: tuple[str, ...] = KINDS
    duration_min: int = 40
    duration_max: int = 160
    mass_min: float = 45.0
    mass_max: float = 105.0
    scale_min: float = 0.92
    scale_max: float = 1.08
    augment_copies: int = 1
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.80 * n))
    n_val = int(round(0.15 * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def make_recipes(cfg: DataConfig) -> list[MotionRecipe]:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(cfg.n_sequences):
        kind = cfg.kinds[i % len(cfg.kinds)]
        out.append(MotionRecipe(
            kind=kind,
            duration=int(rng.integers(cfg.duration_min, cfg.duration_max + 1)),
            seed=int(rng.integers(0, 2**31 - 1)),
            mass_kg=float(rng.uniform(cfg.mass_min, cfg.mass_max)),
            scale=float(rng.uniform(cfg.scale_min, cfg.scale_max)),
        ))
    return out


def generate_splits(cfg: DataConfig) -> dict[str, list[SequenceRecord]]:
    """Generate records and assign them to train/val/test (80/15/5 by count)."""
    recipes = make_recipes(cfg)
    records = [generate_record(r, cfg.world, name=f"seq_{i:05d}") for i, r in enumerate(recipes)]
    rng = np.random.default_rng([cfg.seed, 7])
    order = rng.permutation(len(records))
    n_train, n_val, _ = split_counts(len(records))
    splits = {
        "train": [records[i] for i in sorted(order[:n_train])],
        "val": [records[i] for i in sorted(order[n_train:n_train + n_val])],
        "test": [records[i] for i in sorted(order[n_train + n_val:])],
    }
    aug_rng = np.random.default_rng([cfg.seed, 11])
    augmented = []
    for rec in splits["train"]:
        for _ in range(cfg.augment_copies):
            augmented.append(augment_record(rec, aug_rng.uniform(-np.pi, np.pi), aug_rng))
    splits["train"] = splits["train"] + augmented
    return splits


def build_dataset(cfg: DataConfig, out_dir: str | os.PathLike) -> dict[str, int]:
    """Generate and write a dataset; on failure nothing partial is left behind."""
    from .storage import write_dataset

    splits = generate_splits(cfg)
    out_dir = os.fspath(out_dir)
    parent = os.path.dirname(os.path.abspath(out_dir))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".building-", dir=parent)
    try:
        write_dataset(splits, tmp)
        if os.path.exists(out_dir):
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return {k: len(v) for k, v in splits.items()}
