"""Event streams: value types, text/binary codecs and time windowing.

Timestamps are integer microseconds since the stream epoch; polarity is
stored as +1/-1.  The text interchange format is ``t_us,x,y,p`` with
``p`` in {0, 1} and ``#`` comment lines.  The binary format is::

    b"EVS1" | u32 width | u32 height | u64 count | count * record

    record = u64 t_us | u16 x | u16 y | i8 p | 3 pad bytes   (16 bytes)

all little-endian.
"""
from __future__ import annotations

import io
import re
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, NamedTuple

import numpy as np

MAGIC = b"EVS1"
HEADER = np.dtype([("magic", "S4"), ("width", "<u4"), ("height", "<u4"), ("count", "<u8")])
RECORD = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")]
)
assert RECORD.itemsize == 16

_RES_RE = re.compile(r"#\s*resolution\s*[:=]?\s*(\d+)\s*[xX]\s*(\d+)")


class EventFormatError(ValueError):
    """Malformed event text or binary data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EventValidationError(ValueError):
    """Event fields violate the stream invariants."""


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """An immutable, time-ordered set of events on a ``width x height`` sensor.

    Columns are stored as numpy arrays (``t`` int64 microseconds, ``x``/``y``
    int32 pixels, ``p`` int8 in {+1, -1}).
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int
    t_start: int = 0
    t_end: int = 0

    def __post_init__(self):
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        object.__setattr__(self, "x", _frozen(self.x, np.int32))
        object.__setattr__(self, "y", _frozen(self.y, np.int32))
        object.__setattr__(self, "p", _frozen(self.p, np.int8))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "t_start", int(self.t_start))
        object.__setattr__(self, "t_end", int(self.t_end))
        self._validate()

    def _validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventValidationError("column lengths differ")
        if self.width <= 0 or self.height <= 0:
            raise EventValidationError("sensor resolution must be positive")
        if n == 0:
            if self.t_start > self.t_end:
                raise EventValidationError("t_start > t_end")
            return
        if np.any(np.diff(self.t) < 0):
            raise EventValidationError("timestamps must be nondecreasing")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise EventValidationError("timestamps outside [t_start, t_end]")
        bad = (self.x < 0) | (self.x >= self.width) | (self.y < 0) | (self.y >= self.height)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise EventValidationError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside {self.width}x{self.height}"
            )
        if np.any((self.p != 1) & (self.p != -1)):
            raise EventValidationError("polarity must be +1 or -1")

    @classmethod
    def from_arrays(cls, t, x, y, p, width, height, sort=True) -> "EventStream":
        """Build a stream, stably sorting by time and deriving ``t_start``/``t_end``."""
        t = np.asarray(t, dtype=np.int64)
        x, y, p = (np.asarray(a) for a in (x, y, p))
        if sort and len(t) and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        t0 = int(t.min()) if len(t) else 0
        t1 = int(t.max()) if len(t) else 0
        return cls(t, x, y, p, width, height, t0, t1)

    @classmethod
    def from_events(cls, events: Iterable[Event], width, height) -> "EventStream":
        ev = list(events)
        cols = np.array(ev, dtype=np.int64).reshape(-1, 4)
        return cls.from_arrays(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height)

    @classmethod
    def empty(cls, width, height) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, width, height, 0, 0)

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    @property
    def events(self) -> list[Event]:
        return list(self)

    @property
    def duration_us(self) -> int:
        return self.t_end - self.t_start

    def same_events(self, other: "EventStream") -> bool:
        """True if both streams hold identical events on the same sensor."""
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def t_seconds(self) -> np.ndarray:
        return self.t * 1e-6

    def replace_events(self, mask: np.ndarray) -> "EventStream":
        return EventStream(
            self.t[mask], self.x[mask], self.y[mask], self.p[mask],
            self.width, self.height, self.t_start, self.t_end,
        )


def parse_text(source: str | IO[str] | Iterable[str], width: int, height: int) -> EventStream:
    """Parse ``t_us,x,y,p`` lines (``p`` in {0, 1}); ``#`` lines are ignored."""
    if isinstance(source, str):
        source = io.StringIO(source)
    ts, xs, ys, ps = [], [], [], []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 comma-separated fields, got {len(parts)}", lineno)
        try:
            t, x, y, p = (int(s.strip()) for s in parts)
        except ValueError:
            raise EventFormatError(f"non-integer field in {line!r}", lineno) from None
        if t < 0:
            raise EventFormatError("negative timestamp", lineno)
        if p not in (0, 1):
            raise EventFormatError(f"polarity must be 0 or 1, got {p}", lineno)
        if not (0 <= x < width and 0 <= y < height):
            raise EventValidationError(
                f"line {lineno}: event at ({x}, {y}) outside {width}x{height}"
            )
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(1 if p == 1 else -1)
    return EventStream.from_arrays(ts, xs, ys, ps, width, height)


def sniff_resolution(text: str) -> tuple[int, int] | None:
    """Return ``(width, height)`` from a ``# resolution: WxH`` comment, if present."""
    m = _RES_RE.search(text)
    return (int(m.group(1)), int(m.group(2))) if m else None


def format_text(stream: EventStream) -> str:
    out = io.StringIO()
    out.write(f"# resolution: {stream.width}x{stream.height}\n")
    out.write("# t_us,x,y,p\n")
    p01 = (stream.p > 0).astype(np.int64)
    for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), p01.tolist()):
        out.write(f"{t},{x},{y},{p}\n")
    return out.getvalue()


def write_binary(stream: EventStream) -> bytes:
    head = np.zeros(1, dtype=HEADER)
    head["magic"] = MAGIC
    head["width"] = stream.width
    head["height"] = stream.height
    head["count"] = len(stream)
    rec = np.zeros(len(stream), dtype=RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    return head.tobytes() + rec.tobytes()


def read_binary(data: bytes | IO[bytes]) -> EventStream:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        data = data.read()
    data = bytes(data)
    if len(data) < HEADER.itemsize:
        raise EventFormatError("truncated header")
    head = np.frombuffer(data, dtype=HEADER, count=1)[0]
    if bytes(head["magic"]) != MAGIC:
        raise EventFormatError(f"bad magic {bytes(head['magic'])!r}")
    count = int(head["count"])
    body = data[HEADER.itemsize:]
    if len(body) != count * RECORD.itemsize:
        raise EventFormatError(
            f"truncated record data: expected {count * RECORD.itemsize} bytes, got {len(body)}"
        )
    rec = np.frombuffer(body, dtype=RECORD, count=count)
    if np.any((rec["p"] != 1) & (rec["p"] != -1)):
        raise EventFormatError("polarity must be +1 or -1")
    if count and int(rec["t"].max()) > np.iinfo(np.int64).max:
        raise EventFormatError("timestamp overflow")
    return EventStream.from_arrays(
        rec["t"].astype(np.int64), rec["x"], rec["y"], rec["p"],
        int(head["width"]), int(head["height"]), sort=False,
    )


def window(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with ``t0 <= t < t1``; order and resolution preserved."""
    if t0 > t1:
        raise ValueError(f"window start {t0} > end {t1}")
    lo = np.searchsorted(stream.t, t0, side="left")
    hi = np.searchsorted(stream.t, t1, side="left")
    sl = slice(lo, hi)
    return EventStream(
        stream.t[sl], stream.x[sl], stream.y[sl], stream.p[sl],
        stream.width, stream.height, int(t0), int(t1),
    )


def concatenate(streams: list[EventStream]) -> EventStream:
    """Stable merge of streams on a common sensor."""
    if not streams:
        raise ValueError("nothing to concatenate")
    w, h = streams[0].width, streams[0].height
    if any((s.width, s.height) != (w, h) for s in streams):
        raise EventValidationError("resolution mismatch")
    cat = lambda name: np.concatenate([getattr(s, name) for s in streams])
    return EventStream.from_arrays(cat("t"), cat("x"), cat("y"), cat("p"), w, h)


def load(path) -> EventStream:
    """Load a stream from ``.evs`` binary or text (``# resolution`` header required)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == MAGIC:
        return read_binary(data)
    text = data.decode("utf-8")
    res = sniff_resolution(text)
    if res is None:
        raise EventFormatError(f"{path}: text input lacks a '# resolution: WxH' header")
    return parse_text(text, *res)


def save(stream: EventStream, path) -> None:
    path = str(path)
    if path.endswith((".csv", ".txt")):
        with open(path, "w") as fh:
            fh.write(format_text(stream))
    else:
        with open(path, "wb") as fh:
            fh.write(write_binary(stream))
