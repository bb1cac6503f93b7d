"""Pressure maps: calibration, centre of pressure, temporal differences, grid codes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Calibration:
    """Pixel -> motion-space mapping: world = pixel * scale + offset (per x/z axis)."""

    scale: tuple[float, float] = (0.06, 0.06)
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        sx, sz = self.scale
        if not (sx > 0 and sz > 0):
            raise ValueError(f"calibration scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", (float(sx), float(sz)))
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))

    def to_pixel(self, xz: np.ndarray) -> np.ndarray:
        """World (..., 2) x/z in metres -> (col, row) pixel coordinates."""
        xz = np.asarray(xz, dtype=np.float64)
        return (xz - np.asarray(self.offset)) / np.asarray(self.scale)

    def shifted(self, dx: float, dz: float) -> "Calibration":
        return Calibration(self.scale, (self.offset[0] + dx, self.offset[1] + dz))

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(tuple(d["scale"]), tuple(d["offset"]))


def pixel_cop(pmap: np.ndarray) -> tuple[float, float] | None:
    """Force-weighted centroid (x = column, z = row) of one map; None if nothing touches."""
    pmap = np.asarray(pmap, dtype=np.float64)
    total = pmap.sum()
    if not total > 0:
        return None
    rows = np.arange(pmap.shape[0])
    cols = np.arange(pmap.shape[1])
    x = float((pmap.sum(axis=0) * cols).sum() / total)
    z = float((pmap.sum(axis=1) * rows).sum() / total)
    return x, z


def pixel_cop_sequence(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised centroid for (N, H, W). Returns (cop (N, 2) with NaN rows, contact mask (N,))."""
    maps = np.asarray(maps, dtype=np.float64)
    total = maps.sum(axis=(1, 2))
    contact = total > 0
    cols = np.arange(maps.shape[2])
    rows = np.arange(maps.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        x = (maps.sum(axis=1) * cols).sum(axis=1) / total
        z = (maps.sum(axis=2) * rows).sum(axis=1) / total
    cop = np.stack([x, z], axis=-1)
    cop[~contact] = np.nan
    return cop, contact


def cop_to_world(cop_px, calib: Calibration) -> np.ndarray:
    """(x, z) pixels -> (x, 0, z) metres in motion space. Works on (..., 2) arrays."""
    cop_px = np.asarray(cop_px, dtype=np.float64)
    xz = cop_px * np.asarray(calib.scale) + np.asarray(calib.offset)
    return np.stack([xz[..., 0], np.zeros_like(xz[..., 0]), xz[..., 1]], axis=-1)


def temporal_diff(maps: np.ndarray) -> np.ndarray:
    """dP[n] = P[n] - P[n-1], with dP[0] = 0 so every frame keeps a slot."""
    maps = np.asarray(maps)
    if maps.shape[0] < 1:
        raise ValueError("need at least one frame")
    out = np.zeros_like(maps)
    out[1:] = maps[1:] - maps[:-1]
    return out


def grid_positional_encoding(height: int, width: int, dim: int = 32) -> np.ndarray:
    """Sinusoidal (H, W, dim) codes; the first half encodes columns, the second rows.

    Within each half, channel 2k is sin(pi * 2^k * u) and 2k+1 the matching cos,
    with u the coordinate normalised to [0, 1].
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"encoding width must be even and >= 2, got {dim}")
    if height < 1 or width < 1:
        raise ValueError("grid must be at least 1x1")
    half = dim // 2
    u_col = np.arange(width) / max(width - 1, 1)
    u_row = np.arange(height) / max(height - 1, 1)

    def axis_codes(u):
        k = np.arange(half)
        freq = np.pi * 2.0 ** (k // 2)
        phase = u[:, None] * freq[None, :]
        return np.where(k % 2 == 0, np.sin(phase), np.cos(phase))

    col = axis_codes(u_col)  # (W, half)
    row = axis_codes(u_row)  # (H, half)
    enc = np.concatenate([
        np.broadcast_to(col[None, :, :], (height, width, half)),
        np.broadcast_to(row[:, None, :], (height, width, half)),
    ], axis=-1)
    enc = np.ascontiguousarray(enc)
    enc.setflags(write=False)
    return enc
