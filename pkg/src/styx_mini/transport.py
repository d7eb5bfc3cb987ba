"""Replayable partitioned logs, message envelopes, the deterministic network and faults."""

from __future__ import annotations

import enum
import os
import random
import socket
import struct
import zlib
from collections import Counter, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .core import StyxError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class TransportError(StyxError):
    pass


class CorruptRecordError(TransportError):
    pass


class OffsetOutOfRange(TransportError, IndexError):
    pass


# -- replayable log --------------------------------------------------------

_LOG_HDR = struct.Struct("<II")  # len, crc32


class ReplayableLog:
    """Partitioned append-only log with repeatable reads from any offset.

    In-memory when ``directory`` is None, otherwise one ``p<i>.log`` file per
    partition holding ``(len u32, crc32 u32, bytes)`` records.
    """

    def __init__(self, n_partitions: int, directory: str | os.PathLike | None = None,
                 fsync: bool = False):
        self.n_partitions = n_partitions
        self.directory = Path(directory) if directory is not None else None
        self.fsync = fsync
        self.partitions: list[list[bytes]] = [[] for _ in range(n_partitions)]
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            for p in range(n_partitions):
                path = self._path(p)
                if path.exists():
                    self.partitions[p] = self._load(path)

    def _path(self, p: int) -> Path:
        return self.directory / f"p{p}.log"

    @staticmethod
    def _load(path: Path) -> list[bytes]:
        data = path.read_bytes()
        out, pos = [], 0
        while pos + _LOG_HDR.size <= len(data):
            length, crc = _LOG_HDR.unpack_from(data, pos)
            body = data[pos + _LOG_HDR.size: pos + _LOG_HDR.size + length]
            if len(body) < length or zlib.crc32(body) != crc:
                break  # torn tail
            out.append(bytes(body))
            pos += _LOG_HDR.size + length
        if pos != len(data):
            with open(path, "r+b") as fh:
                fh.truncate(pos)
        return out

    @staticmethod
    def encode_record(record: bytes) -> bytes:
        return _LOG_HDR.pack(len(record), zlib.crc32(record)) + record

    def _check_partition(self, partition: int) -> None:
        if not 0 <= partition < self.n_partitions:
            raise TransportError(f"no partition {partition}")

    def append(self, partition: int, record: bytes) -> int:
        self._check_partition(partition)
        if self.directory is not None:
            with open(self._path(partition), "ab") as fh:
                fh.write(self.encode_record(record))
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
        part = self.partitions[partition]
        part.append(bytes(record))
        return len(part) - 1

    def tail(self, partition: int) -> int:
        self._check_partition(partition)
        return len(self.partitions[partition])

    def read_from(self, partition: int, offset: int) -> Iterator[tuple[int, bytes]]:
        self._check_partition(partition)
        part = self.partitions[partition]
        if not 0 <= offset <= len(part):
            raise OffsetOutOfRange(f"offset {offset} outside [0, {len(part)}] of partition {partition}")
        end = len(part)
        for off in range(offset, end):
            yield off, part[off]

    def get(self, partition: int, offset: int) -> bytes:
        self._check_partition(partition)
        try:
            return self.partitions[partition][offset]
        except IndexError:
            raise OffsetOutOfRange(f"offset {offset} of partition {partition}") from None


# -- envelopes ---------------------------------------------------------------

class MsgType(enum.IntEnum):
    CLIENT_REQ = 0
    FN_CALL = 1
    FN_RESP = 2
    ACK_SHARE = 3
    CTRL = 4
    OUTPUT = 5


_ENV_HDR = struct.Struct("<BQQI")
_CRC = struct.Struct("<I")
_FRAME = struct.Struct("<I")


@dataclass(frozen=True, slots=True)
class Envelope:
    msg_type: MsgType
    epoch: int
    txn: int
    payload: bytes

    @property
    def crc(self) -> int:
        return zlib.crc32(self.payload)

    def encode(self) -> bytes:
        return _ENV_HDR.pack(self.msg_type, self.epoch, self.txn, len(self.payload)) \
            + self.payload + _CRC.pack(self.crc)

    @classmethod
    def decode(cls, data: bytes) -> Envelope:
        if len(data) < _ENV_HDR.size + _CRC.size:
            raise CorruptRecordError("envelope too short")
        mtype, epoch, txn, n = _ENV_HDR.unpack_from(data)
        payload = data[_ENV_HDR.size:_ENV_HDR.size + n]
        if len(payload) != n or len(data) != _ENV_HDR.size + n + _CRC.size:
            raise CorruptRecordError("envelope length mismatch")
        (crc,) = _CRC.unpack_from(data, _ENV_HDR.size + n)
        if zlib.crc32(payload) != crc:
            raise CorruptRecordError("envelope crc mismatch")
        return cls(MsgType(mtype), epoch, txn, bytes(payload))


# -- deterministic in-process network ---------------------------------------

class Network:
    """Per-(sender, receiver) FIFO channels drained by one seeded scheduler.

    Each ``deliver_one`` picks a random non-empty channel whose receiver is
    alive and pops its head, so FIFO holds per channel while cross-channel
    order is a pure function of the seed.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)
        self.channels: dict[tuple, deque] = {}
        self._ready: set[tuple] = set()
        self.dead: set = set()
        # nodes whose connections are down: traffic to or from them is lost
        self.broken: set = set()
        self.step = 0
        self.label = "init"
        self.stats: Counter = Counter()
        self.sent_log: list | None = None
        self.delivery_log: list | None = None

    def reseed(self, *parts) -> None:
        self.rng = random.Random(repr((self.seed,) + parts))

    def send(self, src, dst, env: Envelope) -> None:
        if src in self.dead or src in self.broken or dst in self.broken:
            return
        self.channels.setdefault((src, dst), deque()).append(env)
        self._ready.add((src, dst))
        self.stats[(self.label, env.msg_type.name, "local" if src == dst else "remote")] += 1
        if self.sent_log is not None:
            self.sent_log.append((self.step, src, dst, env.msg_type.name, env.txn))

    def pending(self) -> int:
        return sum(len(self.channels[c]) for c in self._ready)

    def deliver_one(self):
        live = sorted((c for c in self._ready if c[1] not in self.dead), key=repr)
        if not live:
            return None
        chan = live[0] if len(live) == 1 else self.rng.choice(live)
        q = self.channels[chan]
        env = q.popleft()
        if not q:
            self._ready.discard(chan)
        self.step += 1
        if self.delivery_log is not None:
            self.delivery_log.append((self.step, chan[0], chan[1], env.msg_type.name, env.txn))
        return chan[0], chan[1], env

    def drop_node(self, node) -> int:
        """Discard every queued message to or from ``node``."""
        dropped = 0
        for chan in list(self._ready):
            if node in chan:
                dropped += len(self.channels[chan])
                self.channels[chan].clear()
                self._ready.discard(chan)
        return dropped

    def reset(self) -> None:
        for chan in self._ready:
            self.channels[chan].clear()
        self._ready.clear()

    def count(self, msg_type: str | None = None, label: str | None = None,
              where: str | None = None) -> int:
        return sum(n for (lab, mt, loc), n in self.stats.items()
                   if (msg_type is None or mt == msg_type)
                   and (label is None or lab == label)
                   and (where is None or loc == where))


# -- faults -------------------------------------------------------------------

FAULT_ACTIONS = ("crash_worker", "restart_worker", "drop_channel")


@dataclass(slots=True)
class FaultEvent:
    """One schedule entry: fire at a global delivery step or at a named protocol point.

    ``at`` has the form ``"e<epoch>:<point>"`` (points: ``epoch_start``,
    ``roots_done``, ``conflicts_resolved``, ``p3_done``, ``p4_done``,
    ``snapshot_submitted``); ``offset`` delays firing by that many steps.
    """
    action: str
    worker: int
    step: int | None = None
    at: str | None = None
    offset: int = 0
    fired: bool = False

    def __post_init__(self) -> None:
        if self.action not in FAULT_ACTIONS:
            raise ValueError(f"unknown fault action {self.action!r}")
        if (self.step is None) == (self.at is None):
            raise ValueError("fault needs exactly one of step= or at=")


class FaultInjector:
    """Seeded-mode fault schedule consulted by the cluster driver."""

    def __init__(self, events: list[FaultEvent] | None = None, socket_mode: bool = False):
        self.events: list[FaultEvent] = []
        self.socket_mode = socket_mode
        self._armed: list[tuple[int, FaultEvent]] = []
        for ev in events or []:
            self.inject_fault(ev)

    def inject_fault(self, event: FaultEvent) -> None:
        if self.socket_mode:
            raise TransportError("fault injection needs the deterministic in-process transport")
        self.events.append(event)

    def due_at_step(self, step: int) -> list[FaultEvent]:
        out = []
        for ev in self.events:
            if not ev.fired and ev.step is not None and ev.step <= step:
                ev.fired = True
                out.append(ev)
        still = []
        for when, ev in self._armed:
            if when <= step:
                out.append(ev)
            else:
                still.append((when, ev))
        self._armed = still
        return out

    def hit_point(self, point: str, step: int) -> list[FaultEvent]:
        out = []
        for ev in self.events:
            if not ev.fired and ev.at == point:
                ev.fired = True
                if ev.offset > 0:
                    self._armed.append((step + ev.offset, ev))
                else:
                    out.append(ev)
        return out

    @classmethod
    def from_toml(cls, path: str | os.PathLike) -> FaultInjector:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        events = [FaultEvent(**entry) for entry in data.get("fault", [])]
        return cls(events)


# -- socket adapter --------------------------------------------------------

class SocketChannel:
    """Length-prefixed envelope frames over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = b""

    def send(self, env: Envelope) -> None:
        body = env.encode()
        self.sock.sendall(_FRAME.pack(len(body)) + body)

    def _read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise TransportError("connection closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def recv(self) -> Envelope:
        (n,) = _FRAME.unpack(self._read_exact(_FRAME.size))
        return Envelope.decode(self._read_exact(n))

    def inject_fault(self, event: FaultEvent) -> None:
        raise TransportError("fault injection is unsupported in socket mode")

    def close(self) -> None:
        self.sock.close()
