"""Flat binary weight files for decoder, GMP, encoder and latent vectors.

Layout (little-endian)::

    "EVW1"  u32 meta_len  meta (UTF-8 JSON)  u32 n_entries
    entry:  u16 name_len  name  u8 kind
      kind 0 (network): u8 act_len  activation  u32 n_sizes  u32 sizes[]
                        u32 n_skips  u32 skips[]  f64 W0 b0 W1 b1 ... (row-major)
      kind 1 (vector):  u32 ndim  u64 shape[]  f64 values
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .nn import Mlp

MAGIC = b"EVW1"


class WeightFormatError(ValueError):
    pass


def _write_str(buf, s: str, fmt: str):
    b = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(b)))
    buf.write(b)


def dumps(entries: dict, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    m = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(m)))
    buf.write(m)
    buf.write(struct.pack("<I", len(entries)))
    for name, val in entries.items():
        _write_str(buf, name, "<H")
        if isinstance(val, Mlp):
            buf.write(struct.pack("<B", 0))
            _write_str(buf, val.activation, "<B")
            buf.write(struct.pack("<I", len(val.sizes)))
            buf.write(struct.pack(f"<{len(val.sizes)}I", *val.sizes))
            buf.write(struct.pack("<I", len(val.skips)))
            buf.write(struct.pack(f"<{len(val.skips)}I", *val.skips))
            for p in val.params:
                buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        else:
            a = np.ascontiguousarray(val, dtype="<f8")
            buf.write(struct.pack("<BI", 1, a.ndim))
            buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            buf.write(a.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError("truncated weight file")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def loads(data: bytes):
    """Returns ``(entries, meta)``."""
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise WeightFormatError("bad magic, not a weight file")
    try:
        meta = json.loads(r.string("<I"))
    except json.JSONDecodeError as exc:
        raise WeightFormatError(f"bad metadata: {exc}") from exc
    (n,) = r.unpack("<I")
    entries = {}
    for _ in range(n):
        name = r.string("<H")
        (kind,) = r.unpack("<B")
        if kind == 0:
            act = r.string("<B")
            (ns,) = r.unpack("<I")
            sizes = list(r.unpack(f"<{ns}I"))
            (nk,) = r.unpack("<I")
            skips = list(r.unpack(f"<{nk}I"))
            shell = Mlp(sizes, act, skips, params=None, zero_last=True)
            params = []
            for p in shell.params:
                params.append(r.floats(p.size).reshape(p.shape))
            entries[name] = Mlp(sizes, act, skips, params=params)
        elif kind == 1:
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}Q")
            entries[name] = r.floats(int(np.prod(shape))).reshape(shape)
        else:
            raise WeightFormatError(f"unknown entry kind {kind}")
    if r.pos != len(r.data):
        raise WeightFormatError("trailing bytes after last entry")
    return entries, meta


def save(path, entries: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(entries, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def field_entries(field) -> tuple[dict, dict]:
    """Weight entries and metadata that fully describe a :class:`MotionField`."""
    meta = {
        "duration": field.duration, "d_local": field.d_local, "n_steps": field.n_steps,
        "n_freqs": field.decoder.pe.n_freqs, "n_joints": field.model.n_joints,
        "init": field.init.to_dict(),
    }
    return {"decoder": field.decoder.mlp, "gmp": field.gmp.mlp, "z": field.z}, meta


def save_field(field, path) -> None:
    entries, meta = field_entries(field)
    save(path, entries, meta)


def load_field(path, model):
    from .kinematics import Pose
    from .motion_field import GmpNet, MlpDecoder, MotionField, PositionalEncoding

    entries, meta = load(path)
    for key in ("decoder", "gmp", "z"):
        if key not in entries:
            raise WeightFormatError(f"weight file lacks {key!r}")
    if meta.get("n_joints") != model.n_joints:
        raise WeightFormatError("weight file was fitted for a different joint count")
    pe = PositionalEncoding(int(meta["n_freqs"]), float(meta["duration"]))
    z = entries["z"]
    dec = MlpDecoder(model.n_joints, len(z), pe, mlp=entries["decoder"])
    gmp = GmpNet(model.n_joints, mlp=entries["gmp"])
    return MotionField(model, Pose.from_dict(meta["init"]), float(meta["duration"]), dec, gmp, z,
                       int(meta["d_local"]), int(meta["n_steps"]))
