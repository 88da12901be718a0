"""Detector timestamp streams and the QTT1 binary file format.

All times are integer picoseconds stored as ``uint64``. A stream holds tags
from several channels, globally sorted by time (ties ordered by channel).
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"QTT1"
FORMAT_VERSION = 1
HEADER_SIZE = 32
RECORD_SIZE = 16

HEADER_DTYPE = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u2"),
        ("channel_count", "<u2"),
        ("record_count", "<u8"),
        ("reserved", "V16"),
    ]
)
RECORD_DTYPE = np.dtype(
    [("time_ps", "<u8"), ("channel", "<u2"), ("flags", "<u2"), ("reserved", "<u4")]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE and RECORD_DTYPE.itemsize == RECORD_SIZE


class TagFormatError(ValueError):
    """Header is not a valid QTT1 header."""


class TagTruncationError(TagFormatError):
    """File ended in the middle of the record block."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TimeTag:
    channel: int
    time_ps: int


@dataclass(frozen=True, eq=False)
class TagStream:
    """Immutable, time-sorted multi-channel tag stream.

    ``meta`` carries free-form epoch information (label, nominal duration,
    load summary). It is not part of the binary format and is ignored by
    equality.
    """

    times: np.ndarray
    channels: np.ndarray
    channel_count: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.uint64)
        channels = np.ascontiguousarray(self.channels, dtype=np.uint16)
        if times.shape != channels.shape or times.ndim != 1:
            raise ValueError("times and channels must be 1-d arrays of equal length")
        if self.channel_count < 1 or self.channel_count > 0xFFFF:
            raise ValueError(f"invalid channel_count {self.channel_count}")
        if channels.size and int(channels.max()) >= self.channel_count:
            raise ValueError("channel id exceeds channel_count")
        times.flags.writeable = False
        channels.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "channels", channels)

    @classmethod
    def from_arrays(cls, times, channels, channel_count: int | None = None, **meta) -> "TagStream":
        """Build a finalized stream from unsorted arrays."""
        times = np.asarray(times, dtype=np.uint64)
        channels = np.asarray(channels, dtype=np.uint16)
        if channel_count is None:
            channel_count = int(channels.max()) + 1 if channels.size else 1
        order = np.lexsort((channels, times))
        return cls(times[order], channels[order], channel_count, dict(meta))

    @classmethod
    def from_tags(cls, tags: Iterable[TimeTag | tuple[int, int]], channel_count: int | None = None,
                  **meta) -> "TagStream":
        pairs = [(t.channel, t.time_ps) if isinstance(t, TimeTag) else tuple(t) for t in tags]
        chans = np.array([p[0] for p in pairs], dtype=np.uint16)
        times = np.array([p[1] for p in pairs], dtype=np.uint64)
        return cls.from_arrays(times, chans, channel_count, **meta)

    @classmethod
    def empty(cls, channel_count: int = 1, **meta) -> "TagStream":
        return cls(np.empty(0, np.uint64), np.empty(0, np.uint16), channel_count, dict(meta))

    def __len__(self) -> int:
        return int(self.times.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.channel_count == other.channel_count
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.channels, other.channels)
        )

    __hash__ = None

    def tags(self) -> list[TimeTag]:
        return [TimeTag(int(c), int(t)) for c, t in zip(self.channels, self.times)]

    def counts(self) -> np.ndarray:
        """Per-channel tag counts (the N_A, N_B of a correlation)."""
        return np.bincount(self.channels, minlength=self.channel_count)

    def channel_times(self, channel: int) -> np.ndarray:
        """Sorted uint64 timestamps of one channel."""
        _check_channel(self, channel)
        return self.times[self.channels == channel]

    def is_sorted(self) -> bool:
        return _is_sorted(self.times, self.channels)


def _is_sorted(times: np.ndarray, channels: np.ndarray) -> bool:
    if times.size < 2:
        return True
    later = times[1:] > times[:-1]
    ties = times[1:] == times[:-1]
    return bool(np.all(later | (ties & (channels[1:] >= channels[:-1]))))


def _check_channel(stream: TagStream, channel: int) -> None:
    if not 0 <= channel < stream.channel_count:
        raise ValueError(f"channel {channel} out of range [0, {stream.channel_count})")


def slice_channel(stream: TagStream, channel: int) -> TagStream:
    """Sub-stream with the tags of ``channel`` only; channel_count is kept."""
    _check_channel(stream, channel)
    mask = stream.channels == channel
    return TagStream(stream.times[mask], stream.channels[mask], stream.channel_count, dict(stream.meta))


def merge_streams(*streams: TagStream) -> TagStream:
    """Union of several streams, re-sorted."""
    if not streams:
        raise ValueError("nothing to merge")
    count = max(s.channel_count for s in streams)
    times = np.concatenate([s.times for s in streams])
    chans = np.concatenate([s.channels for s in streams])
    return TagStream.from_arrays(times, chans, count, **streams[0].meta)


def write_stream(stream: TagStream, path: str | os.PathLike) -> None:
    if not stream.is_sorted():
        raise ValueError("stream is not finalized (unsorted)")
    header = np.zeros(1, HEADER_DTYPE)
    header["magic"] = MAGIC
    header["version"] = FORMAT_VERSION
    header["channel_count"] = stream.channel_count
    header["record_count"] = len(stream)
    records = np.zeros(len(stream), RECORD_DTYPE)
    records["time_ps"] = stream.times
    records["channel"] = stream.channels
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(records.tobytes())


def read_stream(path: str | os.PathLike) -> TagStream:
    """Load a QTT1 file. Out-of-order records are sorted; the number of
    inversions found is stored in ``meta['load_summary']``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise TagFormatError(f"{path}: header truncated ({len(raw)} < {HEADER_SIZE} bytes)")
    header = np.frombuffer(raw[:HEADER_SIZE], HEADER_DTYPE)[0]
    if bytes(header["magic"]) != MAGIC:
        raise TagFormatError(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != FORMAT_VERSION:
        raise TagFormatError(f"{path}: unsupported format version {int(header['version'])}")
    channel_count = int(header["channel_count"])
    if channel_count == 0:
        raise TagFormatError(f"{path}: channel_count is 0")
    n = int(header["record_count"])
    body = len(raw) - HEADER_SIZE
    if body < n * RECORD_SIZE:
        offset = HEADER_SIZE + (body // RECORD_SIZE) * RECORD_SIZE
        raise TagTruncationError(f"{path}: expected {n} records, file holds {body / RECORD_SIZE:.2f}", offset)
    if body > n * RECORD_SIZE:
        log.warning("%s: %d trailing bytes ignored", path, body - n * RECORD_SIZE)
    records = np.frombuffer(raw, RECORD_DTYPE, count=n, offset=HEADER_SIZE)
    times = records["time_ps"].astype(np.uint64)
    chans = records["channel"].astype(np.uint16)
    if n and int(chans.max()) >= channel_count:
        bad = int(np.argmax(chans >= channel_count))
        raise TagFormatError(
            f"{path}: record {bad} has channel {int(chans[bad])} >= channel_count {channel_count}"
        )
    summary = {"records": n, "resorted": False}
    if not _is_sorted(times, chans):
        summary["resorted"] = True
        summary["out_of_order"] = int(np.count_nonzero(times[1:] < times[:-1]))
        log.info("%s: %d out-of-order records sorted on load", path, summary["out_of_order"])
        order = np.lexsort((chans, times))
        times, chans = times[order], chans[order]
    return TagStream(times, chans, channel_count, {"source": os.fspath(path), "load_summary": summary})
