"""Persistent-write funnel and the instrumented write recorder.

Every module that touches durable storage writes through the helpers here.
When a :class:`WriteRecorder` is active each write is mirrored to it, which is
how the "no plaintext at rest" properties are checked. With no recorder active
the only cost is a ``None`` check.
"""

from __future__ import annotations

import os
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class WriteRecord:
    path: str
    offset: int | None
    data: bytes


@dataclass(frozen=True)
class Leak:
    path: str
    record_index: int
    secret_offset: int
    write_offset: int


class WriteRecorder:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.records: list[WriteRecord] = []

    def record(self, path: PathLike, data: bytes, offset: int | None = None) -> None:
        with self._lock:
            self.records.append(WriteRecord(os.fspath(path), offset, bytes(data)))

    @property
    def total_bytes(self) -> int:
        return sum(len(r.data) for r in self.records)

    def find_leaks(self, secret: bytes, window: int = 64) -> list[Leak]:
        """Return recorded writes containing any ``window``-byte slice of ``secret``."""
        return self.find_leaks_many([secret], window)[0]

    def find_leaks_many(self, secrets: Sequence[bytes], window: int = 64) -> list[list[Leak]]:
        """Leaks per secret, in one pass over the recorded writes.

        A secret shorter than ``window`` is searched for whole. Secrets are
        indexed as 8-byte pieces at offsets that are multiples of 7, and
        every write is probed at offsets that are multiples of 8. Any 64-byte
        match spans seven consecutive probes whose secret offsets cover every
        residue mod 7, so one probe hits an indexed piece. Secrets shorter
        than ``window`` are indexed at every offset. Hits are confirmed by
        extending the match byte by byte.
        """
        if window < 64:
            raise ValueError("window must be at least 64 bytes")
        secrets = [bytes(s) for s in secrets]
        out: list[list[Leak]] = [[] for _ in secrets]
        keys, owners, offsets = [], [], []
        tiny = []
        for k, s in enumerate(secrets):
            if len(s) < 2 * _PIECE:
                if s:
                    tiny.append(k)
                continue
            step = _STRIDE if len(s) >= window else 1
            starts = np.arange(0, len(s) - _PIECE + 1, step)
            pieces = np.lib.stride_tricks.sliding_window_view(np.frombuffer(s, np.uint8), _PIECE)[starts]
            keys.append(np.ascontiguousarray(pieces).view(np.uint64).ravel())
            owners.append(np.full(len(starts), k))
            offsets.append(starts)
        if keys:
            all_keys = np.concatenate(keys)
            order = np.argsort(all_keys, kind="stable")
            all_keys, all_owners, all_offsets = all_keys[order], np.concatenate(owners)[order], \
                np.concatenate(offsets)[order]
        for idx, rec in enumerate(self.records):
            data = rec.data
            found: set[int] = set()
            for k in tiny:
                at = data.find(secrets[k])
                if at >= 0:
                    found.add(k)
                    out[k].append(Leak(rec.path, idx, 0, at))
            if not keys or len(data) < _PIECE:
                continue
            probes = np.frombuffer(data, np.uint64, len(data) // _PIECE)
            lo = np.searchsorted(all_keys, probes, "left")
            hi = np.searchsorted(all_keys, probes, "right")
            for p in np.nonzero(hi > lo)[0]:
                pos = int(p) * _PIECE
                for j in range(lo[p], hi[p]):
                    k = int(all_owners[j])
                    if k in found:
                        continue
                    hit = _extend(secrets[k], data, int(all_offsets[j]), pos, min(window, len(secrets[k])))
                    if hit is not None:
                        found.add(k)
                        out[k].append(Leak(rec.path, idx, hit[0], hit[1]))
        return out


_PIECE = 8
_STRIDE = 7


def _extend(secret: bytes, data: bytes, s: int, d: int, need: int) -> tuple[int, int] | None:
    """Grow the common run around ``secret[s:]``/``data[d:]``; return its start if long enough."""
    left = 0
    while s - left > 0 and d - left > 0 and secret[s - left - 1] == data[d - left - 1]:
        left += 1
        if left >= need:
            break
    right = 0
    while s + right < len(secret) and d + right < len(data) and secret[s + right] == data[d + right]:
        right += 1
        if left + right >= need:
            break
    if left + right >= need:
        return s - left, d - left
    return None


_active_lock = threading.Lock()
_active: WriteRecorder | None = None


def active_recorder() -> WriteRecorder | None:
    return _active


@contextmanager
def recording() -> Iterator[WriteRecorder]:
    """Mirror all persistent writes made inside the block."""
    global _active
    rec = WriteRecorder()
    with _active_lock:
        previous, _active = _active, rec
    try:
        yield rec
    finally:
        with _active_lock:
            _active = previous


def _mirror(path: PathLike, data: bytes, offset: int | None = None) -> None:
    rec = _active
    if rec is not None:
        rec.record(path, data, offset)


def write_atomic(path: PathLike, data: bytes, fsync: bool = True) -> None:
    """Write ``data`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            _mirror(path, data)
            fh.write(data)
            fh.flush()
            if fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def append(path: PathLike, data: bytes, fsync: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "ab") as fh:
        _mirror(path, data)
        fh.write(data)
        fh.flush()
        if fsync:
            os.fsync(fh.fileno())


class RecordedFile:
    """Binary file wrapper whose writes pass through the recorder."""

    def __init__(self, path: PathLike, mode: str = "r+b") -> None:
        self.path = os.fspath(path)
        self._fh = open(self.path, mode)

    def write(self, data) -> int:
        if _active is not None:
            _mirror(self.path, bytes(data), self._fh.tell())
        return self._fh.write(data)

    def read(self, n: int = -1) -> bytes:
        return self._fh.read(n)

    def seek(self, offset: int, whence: int = 0) -> int:
        return self._fh.seek(offset, whence)

    def tell(self) -> int:
        return self._fh.tell()

    def truncate(self, size: int | None = None) -> int:
        return self._fh.truncate(size)

    def flush(self) -> None:
        self._fh.flush()

    def fsync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def fileno(self) -> int:
        return self._fh.fileno()

    @property
    def closed(self) -> bool:
        return self._fh.closed

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RecordedFile":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
