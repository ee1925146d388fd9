"""Event records, time-ordered event streams, and the on-disk event formats.

An event is a single brightness-change report from a dynamic vision sensor:
a microsecond timestamp, a pixel coordinate, and a polarity (+1 for a
brightness increase, -1 for a decrease).  Streams are stored column-wise
(one array per attribute) so that million-event recordings stay cheap to
slice, validate, and accumulate.

Two interchangeable file formats are supported:

CSV (text)
    line 1: ``# width=W height=H``
    line 2: ``t_us,x,y,p``
    then one ``t,x,y,p`` integer row per event, sorted by ``t_us``.

EVB1 (binary, little-endian)
    header: magic ``EVB1``, u16 width, u16 height, u64 event count.
    records: ``{u64 t_us, u16 x, u16 y, i8 p, pad}`` packed to 16 bytes
    per record; pad bytes are written as zero and ignored on read.

Writers validate the stream first and refuse to emit invalid files, so a
file round trip (write, read, write) is byte-exact.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

FORMATS = ("csv", "binary")

_EVB1_MAGIC = b"EVB1"
_EVB1_HEADER = struct.Struct("<4sHHQ")
# Records are padded to 16 bytes so that timestamps stay 8-byte aligned.
_EVB1_RECORD = np.dtype(
    {
        "names": ["t_us", "x", "y", "p"],
        "formats": ["<u8", "<u2", "<u2", "<i1"],
        "offsets": [0, 8, 10, 12],
        "itemsize": 16,
    }
)

_CSV_HEADER_RE = re.compile(r"^# width=(\d+) height=(\d+)$")
_CSV_COLUMNS = "t_us,x,y,p"


class FormatError(ValueError):
    """File content does not conform to the declared format."""


class HeaderError(FormatError):
    """Missing or malformed file header."""


class TruncatedError(FormatError):
    """File ends before the declared record count."""


class InvalidStreamError(ValueError):
    """Stream content violates an event-stream invariant."""


@dataclass(frozen=True)
class Event:
    """One brightness-change record."""

    t_us: int
    x: int
    y: int
    p: int


class EventStream:
    """Immutable, time-ordered collection of events for one sensor size.

    Attribute arrays are read-only; build a new stream instead of mutating.
    Construction does not reject invalid content (``validate_stream``
    reports violations as data), but writers and the synthesis pipeline
    only ever emit valid streams.
    """

    __slots__ = ("width", "height", "t_us", "x", "y", "p")

    def __init__(self, width, height, t_us=(), x=(), y=(), p=()):
        if width <= 0 or height <= 0:
            raise ValueError("width and height must be positive")
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))
        cols = {
            "t_us": np.ascontiguousarray(t_us, dtype=np.int64),
            "x": np.ascontiguousarray(x, dtype=np.int32),
            "y": np.ascontiguousarray(y, dtype=np.int32),
            "p": np.ascontiguousarray(p, dtype=np.int8),
        }
        n = len(cols["t_us"])
        if any(c.ndim != 1 or len(c) != n for c in cols.values()):
            raise ValueError("attribute arrays must be 1-D and equally long")
        for name, col in cols.items():
            col.setflags(write=False)
            object.__setattr__(self, name, col)

    def __setattr__(self, name, value):
        raise AttributeError("EventStream is immutable")

    @classmethod
    def from_events(cls, width: int, height: int, events: Iterable[Event]) -> "EventStream":
        evs = list(events)
        return cls(
            width,
            height,
            [e.t_us for e in evs],
            [e.x for e in evs],
            [e.y for e in evs],
            [e.p for e in evs],
        )

    def __len__(self) -> int:
        return len(self.t_us)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t_us[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t_us, other.t_us)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def duration_us(self) -> int:
        """Half-open time span [0, duration) covering every event.

        Zero for an empty stream; for a time-ordered stream this is the
        last timestamp plus one.
        """
        return 0 if len(self) == 0 else int(self.t_us[-1]) + 1

    def __repr__(self) -> str:
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[Violation, ...]


def validate_stream(stream: EventStream) -> ValidationReport:
    """Check stream invariants and report every violation as data.

    Checked per event: non-negative timestamp, x within [0, width),
    y within [0, height), polarity in {+1, -1}; and pairwise: timestamps
    non-decreasing.  An empty stream is vacuously valid.
    """
    found: list[Violation] = []

    def flag(mask: np.ndarray, reason: str) -> None:
        for i in np.nonzero(mask)[0]:
            found.append(Violation(int(i), reason))

    flag(stream.t_us < 0, "negative timestamp")
    if len(stream) > 1:
        nonmono = np.zeros(len(stream), dtype=bool)
        nonmono[1:] = np.diff(stream.t_us) < 0
        flag(nonmono, "non-monotonic timestamp")
    flag((stream.x < 0) | (stream.x >= stream.width), "x out of range")
    flag((stream.y < 0) | (stream.y >= stream.height), "y out of range")
    flag((stream.p != 1) & (stream.p != -1), "polarity not in {+1, -1}")

    found.sort(key=lambda v: v.index)
    return ValidationReport(ok=not found, violations=tuple(found))


def slice_window(stream: EventStream, t0_us: int, t1_us: int) -> EventStream:
    """Return the sub-stream with timestamps in the half-open [t0, t1).

    Requires t0 <= t1 and a time-ordered stream.  Slicing is O(log n)
    via binary search, idempotent, and windows that partition [0, D)
    concatenate back to the original stream.
    """
    if t0_us > t1_us:
        raise ValueError("t0_us must not exceed t1_us")
    i0 = int(np.searchsorted(stream.t_us, t0_us, side="left"))
    i1 = int(np.searchsorted(stream.t_us, t1_us, side="left"))
    return EventStream(
        stream.width,
        stream.height,
        stream.t_us[i0:i1],
        stream.x[i0:i1],
        stream.y[i0:i1],
        stream.p[i0:i1],
    )


def concat_streams(parts: Iterable[EventStream]) -> EventStream:
    """Concatenate time-ordered pieces that share one sensor size."""
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one stream")
    w, h = parts[0].width, parts[0].height
    if any(p.width != w or p.height != h for p in parts):
        raise ValueError("streams have mismatched sensor sizes")
    return EventStream(
        w,
        h,
        np.concatenate([p.t_us for p in parts]),
        np.concatenate([p.x for p in parts]),
        np.concatenate([p.y for p in parts]),
        np.concatenate([p.p for p in parts]),
    )


def _require_valid(stream: EventStream, context: str) -> None:
    report = validate_stream(stream)
    if not report.ok:
        v = report.violations[0]
        raise InvalidStreamError(
            f"{context}: {len(report.violations)} violation(s), "
            f"first is '{v.reason}' at index {v.index}"
        )


def write_events(stream: EventStream, path, format: str = "binary") -> None:
    """Write a stream to ``path`` in the given format ('csv' or 'binary').

    The stream is validated first; nothing is written for an invalid one.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}, expected one of {FORMATS}")
    _require_valid(stream, "refusing to write invalid stream")
    if format == "binary" and (stream.width > 0xFFFF or stream.height > 0xFFFF):
        raise ValueError("binary format stores sensor size as u16")
    path = Path(path)
    if format == "csv":
        lines = [f"# width={stream.width} height={stream.height}", _CSV_COLUMNS]
        lines.extend(
            f"{t},{x},{y},{p}"
            for t, x, y, p in zip(stream.t_us, stream.x, stream.y, stream.p)
        )
        payload = ("\n".join(lines) + "\n").encode("ascii")
    else:
        records = np.zeros(len(stream), dtype=_EVB1_RECORD)
        records["t_us"] = stream.t_us
        records["x"] = stream.x
        records["y"] = stream.y
        records["p"] = stream.p
        payload = (
            _EVB1_HEADER.pack(_EVB1_MAGIC, stream.width, stream.height, len(stream))
            + records.tobytes()
        )
    path.write_bytes(payload)


def read_events(path, format: str = "binary") -> EventStream:
    """Read a stream from ``path``; the result is always a valid stream.

    Raises FileNotFoundError for a missing file, HeaderError or
    TruncatedError (both FormatError) for structural damage, and
    InvalidStreamError when well-formed content breaks an invariant.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}, expected one of {FORMATS}")
    data = Path(path).read_bytes()
    stream = _parse_csv(data, path) if format == "csv" else _parse_evb1(data, path)
    _require_valid(stream, f"invalid stream in {path}")
    return stream


def _parse_csv(data: bytes, path) -> EventStream:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not an ascii event file") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise HeaderError(f"{path}: empty file")
    m = _CSV_HEADER_RE.match(lines[0])
    if m is None:
        raise HeaderError(f"{path}: first line must be '# width=W height=H'")
    width, height = int(m.group(1)), int(m.group(2))
    if width <= 0 or height <= 0:
        raise HeaderError(f"{path}: sensor size must be positive")
    if len(lines) < 2 or lines[1] != _CSV_COLUMNS:
        raise HeaderError(f"{path}: second line must be '{_CSV_COLUMNS}'")
    n = len(lines) - 2
    t = np.empty(n, dtype=np.int64)
    x = np.empty(n, dtype=np.int32)
    y = np.empty(n, dtype=np.int32)
    p = np.empty(n, dtype=np.int8)
    for i, line in enumerate(lines[2:]):
        fields = line.split(",")
        if len(fields) != 4:
            raise FormatError(f"{path}: malformed record at line {i + 3}")
        try:
            t[i], x[i], y[i], p[i] = (int(f) for f in fields)
        except (ValueError, OverflowError) as exc:
            raise FormatError(f"{path}: malformed record at line {i + 3}") from exc
    return EventStream(width, height, t, x, y, p)


def _parse_evb1(data: bytes, path) -> EventStream:
    if len(data) < _EVB1_HEADER.size:
        raise HeaderError(f"{path}: file shorter than the {_EVB1_HEADER.size}-byte header")
    magic, width, height, count = _EVB1_HEADER.unpack_from(data)
    if magic != _EVB1_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}, expected {_EVB1_MAGIC!r}")
    if width == 0 or height == 0:
        raise HeaderError(f"{path}: sensor size must be positive")
    body = len(data) - _EVB1_HEADER.size
    expected = count * _EVB1_RECORD.itemsize
    if body < expected:
        raise TruncatedError(
            f"{path}: declared {count} records but payload holds "
            f"{body // _EVB1_RECORD.itemsize}"
        )
    if body > expected:
        raise FormatError(f"{path}: {body - expected} trailing byte(s) after records")
    records = np.frombuffer(data, dtype=_EVB1_RECORD, count=count, offset=_EVB1_HEADER.size)
    return EventStream(
        width,
        height,
        records["t_us"].astype(np.int64),
        records["x"].astype(np.int32),
        records["y"].astype(np.int32),
        records["p"].astype(np.int8),
    )
