"""Skeleton, 263-dim motion features, 6D rotations and global joint recovery.

Per-frame feature layout (263 columns)::

    [0]        root yaw rate (rad/s)
    [1:3]      root planar velocity (x, z) in the heading frame (m/s)
    [3]        root height (m)
    [4:67]     joints 1..21, position relative to root XZ, heading frame (21 x 3)
    [67:193]   joints 1..21, global orientation in the heading frame, 6D (21 x 6)
    [193:259]  joints 0..21 velocity, heading frame (22 x 3, m/s)
    [259:263]  contacts for (L ankle, L foot, R ankle, R foot)

Row 0 carries the initial heading in its yaw-rate slot (``yaw_0 * fps``) and a
zero planar velocity, so the first recovered root always sits on the XZ origin.
All functions accept numpy arrays or torch tensors with arbitrary leading dims
and return the same kind they were given.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import torch

FPS = 20
N_JOINTS = 22
FEAT_DIM = 263
TRAJ_DIM = 39

PELVIS, L_HIP, R_HIP = 0, 1, 2
L_KNEE, R_KNEE = 4, 5
L_ANKLE, R_ANKLE = 7, 8
L_FOOT, R_FOOT = 10, 11

# root, L/R ankle, L/R foot: the joints that pressure constrains
KEY_JOINTS = (PELVIS, L_ANKLE, R_ANKLE, L_FOOT, R_FOOT)
# orientations carried in the trajectory features
TRAJ_ROT_JOINTS = (L_ANKLE, R_ANKLE, L_FOOT, R_FOOT)
# order of the four contact channels
CONTACT_JOINTS = (L_ANKLE, L_FOOT, R_ANKLE, R_FOOT)
LOWER_BODY = (L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE, L_FOOT, R_FOOT)

SL_ROOT_ROT = slice(0, 1)
SL_ROOT_VEL = slice(1, 3)
SL_ROOT_Y = slice(3, 4)
SL_RIC = slice(4, 67)
SL_ROT = slice(67, 193)
SL_VEL = slice(193, 259)
SL_CONTACT = slice(259, 263)

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# Rest pose (standing, arms down, facing +Z, left = +X), global positions in m.
_REST_POSITIONS = np.array([
    [0.000, 0.930, 0.000],   # pelvis
    [0.090, 0.870, 0.000],   # left_hip
    [-0.090, 0.870, 0.000],  # right_hip
    [0.000, 1.030, -0.010],  # spine1
    [0.090, 0.470, 0.010],   # left_knee
    [-0.090, 0.470, 0.010],  # right_knee
    [0.000, 1.160, -0.010],  # spine2
    [0.090, 0.040, -0.020],  # left_ankle
    [-0.090, 0.040, -0.020], # right_ankle
    [0.000, 1.210, 0.000],   # spine3
    [0.100, 0.015, 0.120],   # left_foot
    [-0.100, 0.015, 0.120],  # right_foot
    [0.000, 1.450, -0.010],  # neck
    [0.070, 1.380, 0.000],   # left_collar
    [-0.070, 1.380, 0.000],  # right_collar
    [0.000, 1.580, 0.030],   # head
    [0.180, 1.400, -0.010],  # left_shoulder
    [-0.180, 1.400, -0.010], # right_shoulder
    [0.200, 1.120, -0.020],  # left_elbow
    [-0.200, 1.120, -0.020], # right_elbow
    [0.210, 0.870, 0.000],   # left_wrist
    [-0.210, 0.870, 0.000],  # right_wrist
])


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...] = PARENTS
    rest_offsets: np.ndarray = field(default=None)  # (22, 3), root entry = absolute pelvis position
    names: tuple[str, ...] = JOINT_NAMES

    def __post_init__(self):
        if self.rest_offsets is None:
            object.__setattr__(self, "rest_offsets", _offsets_from_positions(_REST_POSITIONS))
        offs = np.asarray(self.rest_offsets, dtype=np.float64)
        if offs.shape != (N_JOINTS, 3) or len(self.parents) != N_JOINTS:
            raise ValueError("skeleton must have 22 joints")
        roots = [j for j, p in enumerate(self.parents) if p < 0]
        if roots != [0]:
            raise ValueError("joint 0 must be the only root")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        object.__setattr__(self, "rest_offsets", offs)

    @property
    def joint_count(self) -> int:
        return N_JOINTS

    def scaled(self, factor: float) -> "Skeleton":
        return Skeleton(self.parents, self.rest_offsets * factor, self.names)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((N_JOINTS, 3))
        for j, p in enumerate(self.parents):
            pos[j] = self.rest_offsets[j] if p < 0 else pos[p] + self.rest_offsets[j]
        return pos

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == j]


def _offsets_from_positions(pos: np.ndarray) -> np.ndarray:
    offs = pos.copy()
    for j, p in enumerate(PARENTS):
        if p >= 0:
            offs[j] = pos[j] - pos[p]
    return offs


DEFAULT_SKELETON = Skeleton()


def _array_io(fn):
    """Run a torch implementation on numpy inputs (as float64) transparently."""

    @functools.wraps(fn)
    def wrapper(x, *args, **kwargs):
        if isinstance(x, torch.Tensor):
            return fn(x, *args, **kwargs)
        out = fn(torch.as_tensor(np.asarray(x, dtype=np.float64)), *args, **kwargs)
        return out.numpy()

    return wrapper


def rot_y(yaw: torch.Tensor) -> torch.Tensor:
    """Rotation about +Y; maps +Z to (sin yaw, 0, cos yaw)."""
    c, s = torch.cos(yaw), torch.sin(yaw)
    z, o = torch.zeros_like(yaw), torch.ones_like(yaw)
    return torch.stack([
        torch.stack([c, z, s], -1),
        torch.stack([z, o, z], -1),
        torch.stack([-s, z, c], -1),
    ], -2)


def rot_y_np(yaw) -> np.ndarray:
    return rot_y(torch.as_tensor(np.asarray(yaw, dtype=np.float64))).numpy()


# ---------------------------------------------------------------- 6D rotations

@_array_io
def rotation_to_6d(mat: torch.Tensor) -> torch.Tensor:
    """First two columns of ``mat`` (..., 3, 3) -> (..., 6)."""
    return torch.cat([mat[..., :, 0], mat[..., :, 1]], dim=-1)


@_array_io
def rotation_from_6d(d6: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Gram-Schmidt decode of (..., 6) into proper rotation matrices (..., 3, 3).

    Raises ValueError for zero or collinear column pairs.
    """
    a1, a2 = d6[..., 0:3], d6[..., 3:6]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    if bool((n1 < eps).any()):
        raise ValueError("degenerate 6D rotation: zero first column")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(u2, dim=-1, keepdim=True)
    if bool((n2 < eps * torch.clamp(torch.linalg.vector_norm(a2, dim=-1, keepdim=True), min=1.0)).any()):
        raise ValueError("degenerate 6D rotation: collinear or zero second column")
    b2 = u2 / n2
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


# ------------------------------------------------------------ global recovery

def _check_pose(pose: torch.Tensor):
    if pose.shape[-1] != FEAT_DIM:
        raise ValueError(f"pose width must be {FEAT_DIM}, got {pose.shape[-1]}")
    if pose.ndim < 2 or pose.shape[-2] < 1:
        raise ValueError("pose needs at least one frame")
    if not bool(torch.isfinite(pose).all()):
        raise ValueError("pose contains non-finite values")


def recover_root(pose: torch.Tensor, fps: int = FPS):
    """Integrate yaw and planar root translation. Returns (yaw (..., N), root (..., N, 3))."""
    yaw = torch.cumsum(pose[..., 0], dim=-1) / fps
    vel = pose[..., 1:3]
    c, s = torch.cos(yaw), torch.sin(yaw)
    dx = (c * vel[..., 0] + s * vel[..., 1]) / fps
    dz = (-s * vel[..., 0] + c * vel[..., 1]) / fps
    step = torch.stack([dx, dz], dim=-1)
    # frame 0 is pinned to the origin, its velocity slot is ignored
    step = torch.cat([torch.zeros_like(step[..., :1, :]), step[..., 1:, :]], dim=-2)
    xz = torch.cumsum(step, dim=-2)
    root = torch.stack([xz[..., 0], pose[..., 3], xz[..., 1]], dim=-1)
    return yaw, root


@_array_io
def recover_global_joints(pose: torch.Tensor, skeleton: Skeleton | None = None, fps: int = FPS) -> torch.Tensor:
    """Features (..., N, 263) -> global joint positions (..., N, 22, 3)."""
    _check_pose(pose)
    yaw, root = recover_root(pose, fps)
    ric = pose[..., SL_RIC].reshape(*pose.shape[:-1], N_JOINTS - 1, 3)
    rot = rot_y(yaw)  # (..., N, 3, 3)
    world = torch.einsum("...ij,...kj->...ki", rot, ric)
    offset = torch.stack([root[..., 0], torch.zeros_like(root[..., 0]), root[..., 2]], dim=-1)
    world = world + offset.unsqueeze(-2)
    return torch.cat([root.unsqueeze(-2), world], dim=-2)


def _wrap(a: np.ndarray) -> np.ndarray:
    return (a + np.pi) % (2 * np.pi) - np.pi


def heading_from_rotation(root_rot: np.ndarray) -> np.ndarray:
    """Yaw of the root's forward (+Z) axis projected on the ground plane."""
    fwd = root_rot[..., :, 2]
    return np.arctan2(fwd[..., 0], fwd[..., 2])


def encode_motion(joints: np.ndarray, rotations: np.ndarray, skeleton: Skeleton | None = None,
                  fps: int = FPS, height_thresh: float = 0.05, vel_thresh: float = 0.005) -> np.ndarray:
    """Global joints (N, 22, 3) and global joint rotations (N, 22, 3, 3) -> (N, 263)."""
    joints = np.asarray(joints, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    if joints.ndim != 3 or joints.shape[1:] != (N_JOINTS, 3):
        raise ValueError(f"joints must be (N, 22, 3), got {joints.shape}")
    if rotations.shape != joints.shape[:2] + (3, 3):
        raise ValueError(f"rotations {rotations.shape} inconsistent with joints {joints.shape}")
    if not np.isfinite(joints).all() or not np.isfinite(rotations).all():
        raise ValueError("non-finite input")
    if np.abs(joints[0, 0, [0, 2]]).max() > 1e-6:
        raise ValueError("frame 0 root must lie on the ground-plane origin")
    n = joints.shape[0]

    yaw = heading_from_rotation(rotations[:, 0])
    inv = rot_y_np(-yaw)  # (N, 3, 3)

    out = np.zeros((n, FEAT_DIM))
    out[0, 0] = _wrap(yaw[0]) * fps
    out[1:, 0] = _wrap(np.diff(yaw)) * fps

    root = joints[:, 0]
    dpos = np.zeros_like(joints)
    dpos[1:] = joints[1:] - joints[:-1]
    root_step = np.einsum("nij,nj->ni", inv, dpos[:, 0])
    out[:, 1] = root_step[:, 0] * fps
    out[:, 2] = root_step[:, 2] * fps
    out[:, 3] = root[:, 1]

    rel = joints[:, 1:].copy()
    rel[..., 0] -= root[:, None, 0]
    rel[..., 2] -= root[:, None, 2]
    out[:, SL_RIC] = np.einsum("nij,nkj->nki", inv, rel).reshape(n, -1)

    local_rot = np.einsum("nij,nkjl->nkil", inv, rotations[:, 1:])
    out[:, SL_ROT] = rotation_to_6d(local_rot).reshape(n, -1)

    out[:, SL_VEL] = (np.einsum("nij,nkj->nki", inv, dpos) * fps).reshape(n, -1)
    out[:, SL_CONTACT] = detect_foot_contacts(joints, height_thresh, vel_thresh)
    return out


@_array_io
def extract_trajectory_targets(pose: torch.Tensor, skeleton: Skeleton | None = None, fps: int = FPS) -> torch.Tensor:
    """(..., N, 263) -> (..., N, 39): key-joint XYZ (15) then 6D of ankles/feet (24)."""
    _check_pose(pose)
    joints = recover_global_joints(pose, skeleton, fps)
    pos = joints[..., list(KEY_JOINTS), :].flatten(-2)
    yaw, _ = recover_root(pose, fps)
    rot6 = pose[..., SL_ROT].reshape(*pose.shape[:-1], N_JOINTS - 1, 6)[..., [j - 1 for j in TRAJ_ROT_JOINTS], :]
    # re-orthonormalise so that noisy predictions still decode
    mats = _gram_schmidt(rot6)
    glob = torch.einsum("...ij,...kjl->...kil", rot_y(yaw), mats)
    return torch.cat([pos, rotation_to_6d(glob).flatten(-2)], dim=-1)


def _gram_schmidt(d6: torch.Tensor) -> torch.Tensor:
    a1, a2 = d6[..., 0:3], d6[..., 3:6]
    b1 = torch.nn.functional.normalize(a1, dim=-1)
    b2 = torch.nn.functional.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1)
    return torch.stack([b1, b2, torch.linalg.cross(b1, b2, dim=-1)], dim=-1)


def foot_displacement(joints: np.ndarray, joint_ids=CONTACT_JOINTS) -> np.ndarray:
    """Per-frame forward displacement (N, len(joint_ids)); last frame repeats the previous one."""
    feet = np.asarray(joints)[:, list(joint_ids)]
    n = feet.shape[0]
    disp = np.zeros(feet.shape[:2])
    if n > 1:
        disp[:-1] = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
        disp[-1] = disp[-2]
    return disp


def detect_foot_contacts(joints: np.ndarray, height_thresh: float = 0.05, vel_thresh: float = 0.005) -> np.ndarray:
    """Binary (N, 4) contacts for (L ankle, L foot, R ankle, R foot)."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape[0] == 0:
        raise ValueError("no frames")
    if height_thresh <= 0 or vel_thresh <= 0:
        raise ValueError("thresholds must be positive")
    height = joints[:, list(CONTACT_JOINTS), 1]
    disp = foot_displacement(joints)
    return ((height < height_thresh) & (disp < vel_thresh)).astype(np.float64)


def crop_pose(pose: np.ndarray, start: int, length: int, fps: int = FPS) -> np.ndarray:
    """Cut frames [start, start+length) and re-anchor them so frame 0 is at the origin."""
    pose = np.asarray(pose, dtype=np.float64)
    if start < 0 or length < 1 or start + length > pose.shape[0]:
        raise ValueError("crop out of range")
    out = pose[start:start + length].copy()
    yaw0 = np.sum(pose[:start + 1, 0]) / fps
    out[0, 0] = _wrap(yaw0) * fps
    out[0, 1:3] = 0.0
    out[0, SL_VEL] = 0.0
    return out
