"""Event volumes and images of (warped) events.

Both kernels split the events into fixed-size chunks, splat each chunk into
a private grid and sum the grids in chunk order.  The chunking does not
depend on the worker count, so any ``threads`` value gives bit-identical
output.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .events import EventStream

CHUNK = 1 << 15
DEFAULT_BINS = 8


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    values: np.ndarray  # (bins, height, width) float64
    t0: int
    t1: int

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class PolarityImagePair:
    pos: np.ndarray  # (height, width)
    neg: np.ndarray
    t_ref: int

    @property
    def total(self) -> np.ndarray:
        return self.pos + self.neg


def _chunks(n):
    return [slice(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)] or [slice(0, 0)]


def _reduce(fn, n, size, threads):
    parts = _chunks(n)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grids = list(pool.map(fn, parts))
    else:
        grids = [fn(s) for s in parts]
    out = np.zeros(size, dtype=np.float64)
    for g in grids:
        out += g
    return out


def voxelize(stream: EventStream, bins: int = DEFAULT_BINS, t0: int | None = None,
             t1: int | None = None, threads: int = 1) -> VoxelGrid:
    """Split each event's polarity over its two nearest time bins (triangular kernel).

    Events lie at integer pixels so the spatial kernels reduce to deltas.
    Events outside ``[t0, t1)`` are ignored.
    """
    t0 = stream.t_start if t0 is None else int(t0)
    t1 = stream.t_end if t1 is None else int(t1)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if t1 <= t0:
        raise ValueError(f"empty time range [{t0}, {t1})")
    H, W = stream.height, stream.width
    keep = (stream.t >= t0) & (stream.t < t1)
    t, x, y, p = stream.t[keep], stream.x[keep], stream.y[keep], stream.p[keep]
    size = bins * H * W

    def splat(sl):
        ts = (t[sl] - t0) / (t1 - t0) * (bins - 1)
        b0 = np.floor(ts).astype(np.int64)
        frac = ts - b0
        pix = y[sl].astype(np.int64) * W + x[sl]
        pol = p[sl].astype(np.float64)
        b1 = np.minimum(b0 + 1, bins - 1)
        idx = np.concatenate([b0 * H * W + pix, b1 * H * W + pix])
        wts = np.concatenate([pol * (1.0 - frac), pol * frac])
        return np.bincount(idx, weights=wts, minlength=size)

    values = _reduce(splat, len(t), size, threads).reshape(bins, H, W)
    return VoxelGrid(values, t0, t1)


def _bilinear(xw, yw, W, H):
    """Corner indices and weights of a 2D bilinear splat; out-of-bounds corners get weight 0."""
    x0 = np.floor(xw)
    y0 = np.floor(yw)
    fx = xw - x0
    fy = yw - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    idx, wts = [], []
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        cx, cy = x0 + dx, y0 + dy
        ok = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        idx.append(np.where(ok, cy * W + cx, 0))
        wts.append(np.where(ok, w, 0.0))
    return idx, wts


def warped_positions(stream: EventStream, displacements) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 2) if len(stream) else np.zeros((0, 2))
    if d.shape[0] != len(stream):
        raise ValueError(f"{d.shape[0]} displacements for {len(stream)} events")
    return stream.x - d[:, 0], stream.y - d[:, 1]


def accumulate(stream: EventStream, displacements=None, t_ref: int | None = None,
               threads: int = 1) -> PolarityImagePair:
    """Image of warped events: each event is splatted at ``x - d`` into pos or neg."""
    if displacements is None:
        displacements = np.zeros((len(stream), 2))
    xw, yw = warped_positions(stream, displacements)
    H, W = stream.height, stream.width
    is_pos = stream.p > 0
    t_ref = stream.t_end if t_ref is None else int(t_ref)

    def splat(sl):
        idx, wts = _bilinear(xw[sl], yw[sl], W, H)
        # positive events land in [0, HW), negative in [HW, 2HW)
        off = np.where(is_pos[sl], 0, H * W)
        return np.bincount(
            np.concatenate([i + off for i in idx]), weights=np.concatenate(wts),
            minlength=2 * H * W,
        )

    img = _reduce(splat, len(stream), 2 * H * W, threads).reshape(2, H, W)
    return PolarityImagePair(img[0], img[1], t_ref)


def write_grid(grid: VoxelGrid, path) -> None:
    """Flat binary: u32 B, H, W then float64 row-major values (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", grid.bins, grid.height, grid.width))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    B, H, W = struct.unpack("<3I", data[:12])
    vals = np.frombuffer(data[12:], dtype="<f8")
    if vals.size != B * H * W:
        raise ValueError("truncated grid file")
    return vals.reshape(B, H, W).copy()


def to_pgm(image: np.ndarray) -> bytes:
    """Binary PGM (P5) with min-max normalization to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo) * 255.0
    pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    H, W = pix.shape
    return f"P5\n{W} {H}\n255\n".encode() + pix.tobytes()


def write_pgm(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_pgm(image))
