"""Time-tag records, the per-attempt timeline, and the QTT1 file format.

QTT1 layout (little-endian)::

    header  magic "QTT1" | version u16 | channel_count u16 | record_count u64 | attempt_period_ps u64
    record  channel u16 | variant_id u16 | attempt_index u32 | time_ps u64       (16 bytes)

Streams are numpy structured arrays with ``TAG_DTYPE``, which is byte-for-byte
the record layout.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

RED_1, RED_2, BLUE_A, BLUE_B = 0, 1, 2, 3
CHANNEL_COUNT = 4

MAGIC = b"QTT1"
VERSION = 1
HEADER = struct.Struct("<4sHHQQ")
TAG_DTYPE = np.dtype([("channel", "<u2"), ("variant_id", "<u2"), ("attempt_index", "<u4"), ("time_ps", "<u8")])
RECORD_SIZE = TAG_DTYPE.itemsize
CSV_COLUMNS = ("channel", "variant_id", "attempt_index", "time_ps")

assert RECORD_SIZE == 16


class TimeTagFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class Header(NamedTuple):
    version: int
    channel_count: int
    record_count: int
    attempt_period_ps: int


@dataclass(frozen=True)
class Timeline:
    """Where things happen inside one attempt, in picoseconds from its start.

    The entanglement pulse starts at ``ent_offset_ps``; heralds count if they
    arrive within ``accept_window_ps`` of it. Each spin is read out in turn
    with an 8-ns pulse.
    """

    period_ps: int = 91_743
    sequence_ps: int = 78_900
    ent_offset_ps: int = 40_000
    accept_window_ps: int = 1_200
    readout_a: tuple = (50_000, 58_000)
    readout_b: tuple = (58_000, 66_000)

    def __post_init__(self):
        if not 0 < self.sequence_ps <= self.period_ps:
            raise ValueError("sequence must fit inside the attempt period")
        spans = [(self.ent_offset_ps, self.ent_offset_ps + self.accept_window_ps), self.readout_a, self.readout_b]
        for lo, hi in spans:
            if not 0 <= lo < hi <= self.sequence_ps:
                raise ValueError(f"window [{lo}, {hi}) lies outside the sequence")

    @classmethod
    def from_params(cls, pp) -> Timeline:
        return cls(period_ps=int(round(pp.attempt_period * 1e12)),
                   sequence_ps=int(round(pp.sequence_length * 1e12)),
                   accept_window_ps=int(round(pp.accept_window * 1e12)))


def empty_tags(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=TAG_DTYPE)


def make_tags(channel, variant_id, attempt_index, time_ps) -> np.ndarray:
    channel = np.asarray(channel)
    tags = empty_tags(channel.size)
    tags["channel"] = channel
    tags["variant_id"] = variant_id
    tags["attempt_index"] = attempt_index
    tags["time_ps"] = time_ps
    return tags


def merge_sorted(chunks) -> np.ndarray:
    """Concatenate tag arrays and order by time (stable, so ties keep input order)."""
    chunks = [c for c in chunks if c.size]
    if not chunks:
        return empty_tags()
    tags = np.concatenate(chunks)
    return tags[np.argsort(tags["time_ps"], kind="stable")]


def _open(target, mode):
    if isinstance(target, (str, os.PathLike)):
        return open(target, mode), True
    return target, False


class TimeTagWriter:
    """Chunked QTT1 writer; the record count is patched into the header on close.

    The sink must be seekable.
    """

    def __init__(self, sink, attempt_period_ps: int, channel_count: int = CHANNEL_COUNT):
        self._fh, self._owned = _open(sink, "wb")
        self._start = self._fh.tell()
        self.attempt_period_ps = int(attempt_period_ps)
        self.channel_count = channel_count
        self.count = 0
        self._fh.write(HEADER.pack(MAGIC, VERSION, channel_count, 0, self.attempt_period_ps))

    def write(self, tags: np.ndarray):
        tags = np.ascontiguousarray(tags, dtype=TAG_DTYPE)
        self._fh.write(tags.tobytes())
        self.count += tags.size

    def close(self):
        if self._fh is None:
            return
        end = self._fh.tell()
        self._fh.seek(self._start)
        self._fh.write(HEADER.pack(MAGIC, VERSION, self.channel_count, self.count, self.attempt_period_ps))
        self._fh.seek(end)
        if self._owned:
            self._fh.close()
        else:
            self._fh.flush()
        self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_timetags(sink, tags: np.ndarray, attempt_period_ps: int, channel_count: int = CHANNEL_COUNT):
    fh, owned = _open(sink, "wb")
    try:
        tags = np.ascontiguousarray(tags, dtype=TAG_DTYPE)
        fh.write(HEADER.pack(MAGIC, VERSION, channel_count, tags.size, int(attempt_period_ps)))
        fh.write(tags.tobytes())
    finally:
        if owned:
            fh.close()


def _read_header(fh) -> Header:
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise TimeTagFormatError(f"truncated header: {len(raw)} of {HEADER.size} bytes", len(raw))
    magic, version, channels, count, period = HEADER.unpack(raw)
    if magic != MAGIC:
        raise TimeTagFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise TimeTagFormatError(f"unsupported version {version}", 4)
    return Header(version, channels, count, period)


def _iter_records(fh, header: Header, chunk_records: int):
    offset = HEADER.size
    remaining = header.record_count
    while remaining > 0:
        n = min(chunk_records, remaining)
        raw = fh.read(n * RECORD_SIZE)
        if len(raw) < n * RECORD_SIZE:
            whole = len(raw) // RECORD_SIZE
            bad = offset + whole * RECORD_SIZE
            if len(raw) % RECORD_SIZE:
                raise TimeTagFormatError("truncated record", bad)
            raise TimeTagFormatError(
                f"file ends after {header.record_count - remaining + whole} of {header.record_count} records", bad)
        yield np.frombuffer(raw, dtype=TAG_DTYPE)
        offset += len(raw)
        remaining -= n
    if fh.read(1):
        raise TimeTagFormatError("trailing bytes after the last record", offset)


def iter_timetags(source, chunk_records: int = 1 << 16):
    """Yield tag arrays of at most ``chunk_records`` records each.

    Memory use is bounded by the chunk size. Format problems raise
    ``TimeTagFormatError`` carrying the byte offset.
    """
    fh, owned = _open(source, "rb")
    try:
        header = _read_header(fh)
        yield from _iter_records(fh, header, chunk_records)
    finally:
        if owned:
            fh.close()


def read_header(source) -> Header:
    fh, owned = _open(source, "rb")
    try:
        return _read_header(fh)
    finally:
        if owned:
            fh.close()


def read_timetags(source):
    """Whole-file read. Returns ``(header, tags)``."""
    fh, owned = _open(source, "rb")
    try:
        header = _read_header(fh)
        chunks = list(_iter_records(fh, header, 1 << 20))
    finally:
        if owned:
            fh.close()
    return header, (np.concatenate(chunks) if chunks else empty_tags())


def write_csv(sink, tags: np.ndarray):
    fh, owned = _open(sink, "w")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in tags:
            w.writerow([int(row[c]) for c in CSV_COLUMNS])
    finally:
        if owned:
            fh.close()


def read_csv(source) -> np.ndarray:
    fh, owned = _open(source, "r")
    try:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or tuple(head) != CSV_COLUMNS:
            raise ValueError(f"CSV header must be {','.join(CSV_COLUMNS)}")
        rows = [tuple(int(x) for x in r) for r in reader if r]
    finally:
        if owned:
            fh.close()
    return np.array(rows, dtype=TAG_DTYPE) if rows else empty_tags()


def load_tags(path):
    """Read QTT1 or CSV, chosen by the leading bytes. Returns ``(header_or_None, tags)``."""
    with open(path, "rb") as fh:
        lead = fh.read(4)
    if lead == MAGIC:
        return read_timetags(path)
    return None, read_csv(path)


def to_bytes(tags: np.ndarray, attempt_period_ps: int) -> bytes:
    buf = io.BytesIO()
    write_timetags(buf, tags, attempt_period_ps)
    return buf.getvalue()
