"""Forward-only event encoder: pooled voxel statistics -> GRU -> latent codes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _sigmoid

from .motion_field import LatentCode
from .voxel import VoxelGrid


def features(grid: VoxelGrid | np.ndarray, patch_grid: int = 4) -> np.ndarray:
    """Per bin and patch: mean and absolute sum, flattened to ``B * patch_grid**2 * 2``.

    Patch boundaries follow ``np.array_split`` along rows and columns.
    """
    if patch_grid < 1:
        raise ValueError("patch_grid must be >= 1")
    values = grid.values if isinstance(grid, VoxelGrid) else np.asarray(grid, dtype=np.float64)
    B, H, W = values.shape
    rows = np.array_split(np.arange(H), patch_grid)
    cols = np.array_split(np.arange(W), patch_grid)
    out = np.zeros((B, patch_grid, patch_grid, 2))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if len(r) == 0 or len(c) == 0:
                continue
            block = values[:, r[0]:r[-1] + 1, c[0]:c[-1] + 1]
            out[:, i, j, 0] = block.mean(axis=(1, 2))
            out[:, i, j, 1] = np.abs(block).sum(axis=(1, 2))
    return out.reshape(-1)


@dataclass(eq=False)
class GruCell:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        H, F = np.shape(self.W_z)
        for name in ("W_z", "W_r", "W_h"):
            if np.shape(getattr(self, name)) != (H, F):
                raise ValueError(f"{name} must be {H}x{F}")
        for name in ("U_z", "U_r", "U_h"):
            if np.shape(getattr(self, name)) != (H, H):
                raise ValueError(f"{name} must be {H}x{H}")
        for name in ("b_z", "b_r", "b_h"):
            if np.shape(getattr(self, name)) != (H,):
                raise ValueError(f"{name} must have length {H}")
        for name in self.__dataclass_fields__:
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, a)

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    @classmethod
    def random(cls, input_dim: int, hidden_dim: int = 64, rng=None, scale: float = 1.0) -> "GruCell":
        rng = np.random.default_rng(0) if rng is None else rng
        sw = scale / np.sqrt(input_dim)
        su = scale / np.sqrt(hidden_dim)
        mats = {}
        for g in "zrh":
            mats[f"W_{g}"] = rng.normal(0, sw, (hidden_dim, input_dim))
            mats[f"U_{g}"] = rng.normal(0, su, (hidden_dim, hidden_dim))
            mats[f"b_{g}"] = rng.normal(0, 0.1, hidden_dim)
        return cls(**mats)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruCell":
        z = lambda *s: np.zeros(s)
        return cls(z(hidden_dim, input_dim), z(hidden_dim, hidden_dim), z(hidden_dim),
                   z(hidden_dim, input_dim), z(hidden_dim, hidden_dim), z(hidden_dim),
                   z(hidden_dim, input_dim), z(hidden_dim, hidden_dim), z(hidden_dim))


def gru_step(cell: GruCell, f_t, h_prev) -> np.ndarray:
    f_t = np.asarray(f_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if f_t.shape[-1] != cell.input_dim or h_prev.shape[-1] != cell.hidden_dim:
        raise ValueError("feature or hidden dimension mismatch")
    z = _sigmoid(f_t @ cell.W_z.T + h_prev @ cell.U_z.T + cell.b_z)
    r = _sigmoid(f_t @ cell.W_r.T + h_prev @ cell.U_r.T + cell.b_r)
    h_tilde = np.tanh(f_t @ cell.W_h.T + (r * h_prev) @ cell.U_h.T + cell.b_h)
    return (1.0 - z) * h_prev + z * h_tilde


@dataclass(eq=False)
class LatentProjection:
    weight: np.ndarray  # (d_local + d_global, H)
    bias: np.ndarray
    d_local: int

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("projection bias length mismatch")
        if not 0 <= self.d_local <= self.weight.shape[0]:
            raise ValueError("d_local out of range")

    @classmethod
    def random(cls, hidden_dim: int, d_local=32, d_global=8, rng=None) -> "LatentProjection":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(rng.normal(0, 1 / np.sqrt(hidden_dim), (d_local + d_global, hidden_dim)),
                   np.zeros(d_local + d_global), d_local)

    def __call__(self, h) -> LatentCode:
        out = self.weight @ np.asarray(h, dtype=np.float64) + self.bias
        return LatentCode(out[:self.d_local], out[self.d_local:])


def encode_sequence(cell: GruCell, proj: LatentProjection, grids, patch_grid: int = 4,
                    return_hidden: bool = False):
    """Fold :func:`gru_step` over per-grid features from a zero hidden state."""
    grids = list(grids)
    if not grids:
        raise ValueError("empty grid sequence")
    h = np.zeros(cell.hidden_dim)
    for g in grids:
        h = gru_step(cell, features(g, patch_grid), h)
    code = proj(h)
    return (code, h) if return_hidden else code
