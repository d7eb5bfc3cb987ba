"""Incremental snapshots, compaction, and recovery with duplicate-output detection."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import codec
from .core import StyxError, parse_namespaced_key
from .state import TOMBSTONE, DeltaMap, fold_deltas

MAGIC = b"STYXSNAP"
VERSION = 1

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class SnapshotError(StyxError):
    pass


class CorruptSnapshotError(SnapshotError):
    pass


class DeltaGapError(SnapshotError):
    pass


@dataclass
class SnapshotManifest:
    snapshot_id: int
    worker_id: int
    state: DeltaMap = field(default_factory=dict)
    input_offsets: dict[int, int] = field(default_factory=dict)
    output_offsets: dict[int, int] = field(default_factory=dict)
    epoch_count: int = 0
    seq_counters: tuple[int, int] = (1, 0)
    # rescheduled transactions still in flight at the cut: (tid, partition, offset)
    pending: list[tuple[int, int, int]] = field(default_factory=list)


# -- binary payload ----------------------------------------------------------

def _pairs(d: dict[int, int]) -> bytes:
    out = [_U64.pack(len(d))]
    for p in sorted(d):
        out.append(_U64.pack(p) + _U64.pack(d[p]))
    return b"".join(out)


def encode_snapshot(m: SnapshotManifest) -> bytes:
    parts = [MAGIC, _U16.pack(VERSION),
             _pairs(m.input_offsets), _pairs(m.output_offsets),
             _U64.pack(m.epoch_count), _U64.pack(m.seq_counters[0]), _U64.pack(m.seq_counters[1]),
             _U64.pack(len(m.pending))]
    for tid, part, off in sorted(m.pending):
        parts.append(_U64.pack(tid) + _U64.pack(part) + _U64.pack(off))
    entries = sorted(m.state.items(), key=lambda kv: kv[0].render())
    parts.append(_U64.pack(len(entries)))
    for key, value in entries:
        kb = key.render().encode()
        parts.append(_U32.pack(len(kb)) + kb)
        if value is TOMBSTONE:
            parts.append(b"\x01" + _U32.pack(0))
        else:
            parts.append(b"\x00" + _U32.pack(len(value)) + value)
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptSnapshotError("truncated snapshot")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u(self, s: struct.Struct) -> int:
        return s.unpack(self.take(s.size))[0]


def decode_snapshot(data: bytes, snapshot_id: int = 0, worker_id: int = 0) -> SnapshotManifest:
    if len(data) < len(MAGIC) + _U16.size + _U32.size:
        raise CorruptSnapshotError("snapshot too short")
    body, (crc,) = data[:-4], _U32.unpack(data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptSnapshotError("snapshot crc mismatch")
    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptSnapshotError("bad magic")
    version = r.u(_U16)
    if version != VERSION:
        raise CorruptSnapshotError(f"unsupported snapshot version {version}")

    def pairs() -> dict[int, int]:
        return {r.u(_U64): r.u(_U64) for _ in range(r.u(_U64))}

    m = SnapshotManifest(snapshot_id, worker_id)
    m.input_offsets = pairs()
    m.output_offsets = pairs()
    m.epoch_count = r.u(_U64)
    m.seq_counters = (r.u(_U64), r.u(_U64))
    m.pending = [(r.u(_U64), r.u(_U64), r.u(_U64)) for _ in range(r.u(_U64))]
    for _ in range(r.u(_U64)):
        key = parse_namespaced_key(r.take(r.u(_U32)).decode())
        flag = r.take(1)
        value = r.take(r.u(_U32))
        if flag == b"\x01":
            m.state[key] = TOMBSTONE
        elif flag == b"\x00":
            m.state[key] = bytes(value)
        else:
            raise CorruptSnapshotError(f"bad entry flag {flag!r}")
    if r.pos != len(body):
        raise CorruptSnapshotError("trailing bytes in snapshot")
    return m


# -- compaction ----------------------------------------------------------------

def compact(base: dict, deltas: Sequence[tuple[int, DeltaMap]] | Sequence[DeltaMap],
            base_id: int | None = None) -> dict:
    """Fold deltas into ``base``; later deltas win per key, tombstones delete.

    ``deltas`` are ``(id, map)`` pairs in id order (ids must be contiguous,
    following ``base_id`` when given) or bare maps already in order.
    """
    maps = []
    expected = None if base_id is None else base_id + 1
    for item in deltas:
        if isinstance(item, tuple):
            did, delta = item
            if expected is not None and did != expected:
                raise DeltaGapError(f"expected delta {expected}, got {did}")
            expected = did + 1
            maps.append(delta)
        else:
            maps.append(item)
    return fold_deltas(base, maps)


# -- store ---------------------------------------------------------------------

class SnapshotStore:
    """``<root>/worker_<id>/snap_<id>.bin`` files plus a ``MANIFEST`` of completed ids.

    A snapshot becomes visible only through atomic renames: payload first,
    then the MANIFEST listing it.  Compacted snapshots are ``snap_<id>.full.bin``.
    """

    def __init__(self, root: str | os.PathLike, fsync: bool = True):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.fail_writes = False  # storage-io fault hook

    def _dir(self, worker: int) -> Path:
        d = self.root / f"worker_{worker}"
        d.mkdir(exist_ok=True)
        return d

    @staticmethod
    def _name(snapshot_id: int, kind: str) -> str:
        return f"snap_{snapshot_id}.full.bin" if kind == "full" else f"snap_{snapshot_id}.bin"

    def _write_atomic(self, path: Path, data: bytes) -> None:
        if self.fail_writes:
            raise OSError("snapshot store unavailable")
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, path)

    def completed(self, worker: int) -> list[tuple[int, str]]:
        path = self._dir(worker) / "MANIFEST"
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            if line.strip():
                sid, kind = line.split()
                out.append((int(sid), kind))
        return sorted(out)

    def _write_manifest(self, worker: int, entries: Iterable[tuple[int, str]]) -> None:
        text = "".join(f"{sid} {kind}\n" for sid, kind in sorted(set(entries)))
        self._write_atomic(self._dir(worker) / "MANIFEST", text.encode())

    def stage(self, m: SnapshotManifest, kind: str = "delta") -> Path:
        """Write the payload under a temporary name; invisible until :meth:`publish`."""
        if self.fail_writes:
            raise OSError("snapshot store unavailable")
        path = self._dir(m.worker_id) / (self._name(m.snapshot_id, kind) + ".staged")
        with open(path, "wb") as fh:
            fh.write(encode_snapshot(m))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        return path

    def publish(self, worker: int, snapshot_id: int, kind: str = "delta") -> None:
        d = self._dir(worker)
        staged = d / (self._name(snapshot_id, kind) + ".staged")
        os.replace(staged, d / self._name(snapshot_id, kind))
        entries = [e for e in self.completed(worker) if e[0] != snapshot_id or e[1] != kind]
        self._write_manifest(worker, entries + [(snapshot_id, kind)])

    def write(self, m: SnapshotManifest, kind: str = "delta") -> None:
        self.stage(m, kind)
        self.publish(m.worker_id, m.snapshot_id, kind)

    def load(self, worker: int, snapshot_id: int, kind: str = "delta") -> SnapshotManifest:
        data = (self._dir(worker) / self._name(snapshot_id, kind)).read_bytes()
        return decode_snapshot(data, snapshot_id, worker)

    def exists(self, worker: int, snapshot_id: int) -> bool:
        return any(sid == snapshot_id for sid, _ in self.completed(worker))

    def latest_complete(self, worker: int) -> int | None:
        ids = [sid for sid, _ in self.completed(worker)]
        return max(ids) if ids else None

    def discard_after(self, worker: int, snapshot_id: int) -> None:
        """Drop completed snapshots newer than ``snapshot_id`` and any staged leftovers."""
        d = self._dir(worker)
        keep = [(sid, kind) for sid, kind in self.completed(worker) if sid <= snapshot_id]
        self._write_manifest(worker, keep)
        kept_names = {self._name(sid, kind) for sid, kind in keep}
        for path in d.glob("snap_*"):
            if path.name not in kept_names:
                path.unlink()

    def chain(self, worker: int, upto: int) -> tuple[SnapshotManifest | None, list[SnapshotManifest]]:
        """Latest full snapshot at or below ``upto`` and the deltas after it."""
        done = [(sid, kind) for sid, kind in self.completed(worker) if sid <= upto]
        fulls = [sid for sid, kind in done if kind == "full"]
        base_id = max(fulls) if fulls else None
        base = self.load(worker, base_id, "full") if base_id is not None else None
        deltas = [self.load(worker, sid) for sid, kind in done
                  if kind == "delta" and (base_id is None or sid > base_id)]
        return base, deltas

    def compact_worker(self, worker: int, upto: int) -> SnapshotManifest | None:
        """Merge the chain up to ``upto`` into one full snapshot and drop what it replaces."""
        base, deltas = self.chain(worker, upto)
        if not deltas or (base is None and len(deltas) < 2):
            return None
        merged = compact(base.state if base else {}, [d.state for d in deltas])
        last = deltas[-1]
        full = SnapshotManifest(last.snapshot_id, worker, merged, dict(last.input_offsets),
                                dict(last.output_offsets), last.epoch_count, last.seq_counters,
                                list(last.pending))
        self.write(full, "full")
        replaced = {(d.snapshot_id, "delta") for d in deltas}
        if base is not None:
            replaced.add((base.snapshot_id, "full"))
        keep = [e for e in self.completed(worker) if e not in replaced]
        self._write_manifest(worker, keep)
        d = self._dir(worker)
        for sid, kind in replaced:
            (d / self._name(sid, kind)).unlink(missing_ok=True)
        return full


# -- recovery --------------------------------------------------------------------

@dataclass
class RecoveredState:
    state: dict
    input_offsets: dict[int, int]
    output_offsets: dict[int, int]
    epoch_count: int
    seq_counters: tuple[int, int] | None
    pending: list[tuple[int, int, int]]
    duplicates: set[int]
    snapshot_id: int | None


def possible_duplicates(output_log, partition: int, from_offset: int) -> set[int]:
    """TIDs of output records at or after the snapshotted offset."""
    out = set()
    for _, raw in output_log.read_from(partition, min(from_offset, output_log.tail(partition))):
        out.add(codec.decode(raw)["tid"])
    return out


def recover(store: SnapshotStore, worker: int, snapshot_id: int | None,
            output_log=None, out_partition: int | None = None) -> RecoveredState:
    """Rebuild a worker from its snapshot chain up to ``snapshot_id``.

    Without any snapshot this is a cold start from empty state at offset zero.
    """
    if snapshot_id is None:
        dups = possible_duplicates(output_log, out_partition, 0) if output_log is not None else set()
        return RecoveredState({}, {}, {}, 0, None, [], dups, None)
    base, deltas = store.chain(worker, snapshot_id)
    if base is None and not deltas:
        raise SnapshotError(f"worker {worker} has no snapshot <= {snapshot_id}")
    state = compact(base.state if base else {}, [d.state for d in deltas])
    last = deltas[-1] if deltas else base
    if last.snapshot_id != snapshot_id:
        raise SnapshotError(f"worker {worker} lacks snapshot {snapshot_id}")
    dups: set[int] = set()
    if output_log is not None and out_partition is not None:
        dups = possible_duplicates(output_log, out_partition,
                                   last.output_offsets.get(out_partition, 0))
    return RecoveredState(state, dict(last.input_offsets), dict(last.output_offsets),
                          last.epoch_count, last.seq_counters, list(last.pending), dups,
                          snapshot_id)
