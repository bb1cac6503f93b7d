"""On-disk formats: dataset directories, checkpoints, manifests and joint tables.

Dataset layout::

    root/<split>/<sequence>/meta.json
                            motion.f32     N x 263
                            pressure.f32   N x H x W
                            joints.f32     N x 22 x 3

Payloads are raw little-endian float32, row-major; meta.json carries their
sha256 digests. Checkpoints are a torch pickle behind a one-line header
holding the digest of the pickle bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .motion_repr import FEAT_DIM, FPS, N_JOINTS
from .pressure import Calibration
from .synth import SequenceRecord

SPLITS = ("train", "val", "test")
_CKPT_MAGIC = b"PMCKPT1 "
_LE_F32 = np.dtype("<f4")
_REQUIRED_META = ("frames", "height", "width", "fps", "mass_kg", "calib", "captions")


class DatasetFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ helpers

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ------------------------------------------------------------------ datasets

def _write_payload(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())


def _read_payload(path: str, shape: tuple[int, ...]) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetFormatError(f"{path}: missing payload")
    expected = int(np.prod(shape)) * 4
    size = os.path.getsize(path)
    if size != expected:
        raise DatasetFormatError(f"{path}: size mismatch, expected {expected} bytes for shape {shape}, found {size}")
    return np.fromfile(path, dtype=_LE_F32).reshape(shape).astype(np.float32)


def write_record(rec: SequenceRecord, seq_dir: str | os.PathLike) -> None:
    seq_dir = os.fspath(seq_dir)
    n = rec.frames
    h, w = rec.pressure.shape[1:]
    if rec.joints.shape != (n, N_JOINTS, 3) or rec.pressure.shape[0] != n or rec.pose.shape != (n, FEAT_DIM):
        raise DatasetFormatError(f"{rec.name}: inconsistent frame counts")
    if len(rec.captions) != 5:
        raise DatasetFormatError(f"{rec.name}: expected 5 captions, got {len(rec.captions)}")
    os.makedirs(seq_dir, exist_ok=True)
    meta = {
        "name": rec.name, "frames": n, "height": h, "width": w, "fps": FPS,
        "mass_kg": rec.mass_kg, "subject_height_m": rec.height_m,
        "calib": rec.calib.to_dict(), "captions": list(rec.captions), "extra": rec.meta,
    }
    digests = {}
    for fn, arr in (("motion.f32", rec.pose), ("pressure.f32", rec.pressure), ("joints.f32", rec.joints)):
        path = os.path.join(seq_dir, fn)
        _write_payload(path, arr)
        digests[fn] = file_digest(path)
    meta["sha256"] = digests
    with open(os.path.join(seq_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def read_record(seq_dir: str | os.PathLike) -> SequenceRecord:
    seq_dir = os.fspath(seq_dir)
    meta_path = os.path.join(seq_dir, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise DatasetFormatError(f"{meta_path}: missing") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{meta_path}: malformed JSON ({e})") from None
    if not isinstance(meta, dict):
        raise DatasetFormatError(f"{meta_path}: expected an object")
    missing = [k for k in _REQUIRED_META if k not in meta]
    if missing:
        raise DatasetFormatError(f"{meta_path}: missing fields {missing}")
    if meta["fps"] != FPS:
        raise DatasetFormatError(f"{meta_path}: fps must be {FPS}, got {meta['fps']}")
    try:
        n, h, w = int(meta["frames"]), int(meta["height"]), int(meta["width"])
        calib = Calibration.from_dict(meta["calib"])
    except (TypeError, ValueError, KeyError) as e:
        raise DatasetFormatError(f"{meta_path}: malformed field ({e})") from None
    if n < 1 or h < 1 or w < 1:
        raise DatasetFormatError(f"{meta_path}: sizes must be positive")
    if not isinstance(meta["captions"], list) or len(meta["captions"]) != 5:
        raise DatasetFormatError(f"{meta_path}: expected 5 captions")
    sums = meta.get("sha256")
    if not isinstance(sums, dict):
        raise DatasetFormatError(f"{meta_path}: missing payload digests")
    pose = _read_payload(os.path.join(seq_dir, "motion.f32"), (n, FEAT_DIM))
    pressure = _read_payload(os.path.join(seq_dir, "pressure.f32"), (n, h, w))
    joints = _read_payload(os.path.join(seq_dir, "joints.f32"), (n, N_JOINTS, 3))
    for fn in ("motion.f32", "pressure.f32", "joints.f32"):
        path = os.path.join(seq_dir, fn)
        if file_digest(path) != sums.get(fn):
            raise DatasetFormatError(f"{path}: checksum mismatch (corrupted payload)")
    return SequenceRecord(meta.get("name", os.path.basename(seq_dir)), pose, joints, pressure, calib,
                          list(meta["captions"]), meta["mass_kg"], meta.get("subject_height_m", 0.0),
                          meta.get("extra", {}))


def write_dataset(splits: dict[str, list[SequenceRecord]], root: str | os.PathLike) -> None:
    root = os.fspath(root)
    for split in SPLITS:
        split_dir = os.path.join(root, split)
        os.makedirs(split_dir, exist_ok=True)
        for rec in splits.get(split, []):
            write_record(rec, os.path.join(split_dir, rec.name))
    atomic_write_json(os.path.join(root, "index.json"),
                      {s: [r.name for r in splits.get(s, [])] for s in SPLITS})


def read_split(root: str | os.PathLike, split: str) -> list[SequenceRecord]:
    split_dir = os.path.join(os.fspath(root), split)
    if not os.path.isdir(split_dir):
        raise DatasetFormatError(f"{split_dir}: split directory missing")
    return [read_record(os.path.join(split_dir, d)) for d in sorted(os.listdir(split_dir))
            if os.path.isdir(os.path.join(split_dir, d))]


def read_dataset(root: str | os.PathLike) -> dict[str, list[SequenceRecord]]:
    return {s: read_split(root, s) for s in SPLITS}


def tree_digest(root: str | os.PathLike) -> dict[str, str]:
    """sha256 of every file below root, keyed by relative path."""
    root = os.fspath(root)
    out = {}
    for d, _, files in os.walk(root):
        for fn in files:
            p = os.path.join(d, fn)
            out[os.path.relpath(p, root)] = file_digest(p)
    return out


# ------------------------------------------------------------------ checkpoints

@dataclass
class CheckpointBundle:
    weights: dict[str, dict[str, torch.Tensor]]
    frozen: dict[str, bool]
    schedule: dict
    config: dict
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.config_digest:
            self.config_digest = digest(self.config)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: dict, b: dict) -> list[str]:
    fa, fb = _flatten(a), _flatten(b)
    return sorted(k for k in set(fa) | set(fb) if fa.get(k, None) != fb.get(k, None) or (k in fa) != (k in fb))


def save_checkpoint(bundle: CheckpointBundle, path: str | os.PathLike) -> None:
    missing = set(bundle.weights) ^ set(bundle.frozen)
    if missing:
        raise CheckpointError(f"frozen flags and weights disagree on components {sorted(missing)}")
    payload = {
        "weights": bundle.weights, "frozen": dict(bundle.frozen), "schedule": bundle.schedule,
        "config": bundle.config, "config_digest": bundle.config_digest, "extra": bundle.extra,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    atomic_write_bytes(path, _CKPT_MAGIC + hashlib.sha256(body).hexdigest().encode() + b"\n" + body)


def load_checkpoint(path: str | os.PathLike, require: tuple[str, ...] = ()) -> CheckpointBundle:
    try:
        with open(os.fspath(path), "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    head = len(_CKPT_MAGIC) + 65
    if not raw.startswith(_CKPT_MAGIC) or len(raw) < head or raw[head - 1:head] != b"\n":
        raise CheckpointError(f"{path}: not a checkpoint written by this package")
    body = raw[head:]
    if hashlib.sha256(body).hexdigest().encode() != raw[len(_CKPT_MAGIC):head - 1]:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    try:
        payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    except Exception as e:  # foreign payload behind a valid header
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(e).__name__})") from None
    for key in ("weights", "frozen", "schedule", "config", "config_digest"):
        if key not in payload:
            raise CheckpointError(f"{path}: missing {key}")
    absent = [c for c in require if c not in payload["weights"]]
    if absent:
        raise CheckpointError(f"{path}: missing component(s) {absent}")
    if digest(payload["config"]) != payload["config_digest"]:
        raise CheckpointError(f"{path}: stored config does not match its digest")
    return CheckpointBundle(payload["weights"], payload["frozen"], payload["schedule"], payload["config"],
                            payload["config_digest"], payload.get("extra", {}))


def check_resume(bundle: CheckpointBundle, config: dict) -> None:
    """Refuse to resume when the run config differs from the one that produced the checkpoint."""
    if digest(config) != bundle.config_digest:
        keys = config_diff(bundle.config, config)
        raise CheckpointError(f"config digest mismatch on resume; differing keys: {', '.join(keys)}")


# ------------------------------------------------------------------ exports

def export_joints(joints: np.ndarray, path: str | os.PathLike) -> None:
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim != 3 or joints.shape[1:] != (N_JOINTS, 3):
        raise ValueError(f"joints must be (N, 22, 3), got {joints.shape}")
    if not np.isfinite(joints).all():
        raise ValueError("joints contain non-finite values")
    buf = io.StringIO()
    np.savetxt(buf, joints.reshape(joints.shape[0], -1), fmt="%.6f", delimiter=",")
    atomic_write_bytes(path, buf.getvalue().encode())


def read_joints_table(path: str | os.PathLike) -> np.ndarray:
    arr = np.loadtxt(os.fspath(path), delimiter=",", ndmin=2)
    return arr.reshape(arr.shape[0], N_JOINTS, 3)


def output_root(default: str | os.PathLike) -> str:
    """The output directory, optionally redirected by PRESSURE_MOTION_OUT."""
    base = os.environ.get("PRESSURE_MOTION_OUT")
    return os.path.join(base, os.fspath(default)) if base and not os.path.isabs(default) else os.fspath(default)
