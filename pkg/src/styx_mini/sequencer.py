"""Coordination-free TID assignment, epoch formation and sequencer replay."""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .core import ClusterConfig, StyxError, make_tid

_RECORD = struct.Struct("<QI")
_CRC = struct.Struct("<I")


class LogGapError(StyxError):
    pass


@dataclass(slots=True)
class SequencerState:
    sid: int
    lc: int = 0
    epoch_counter: int = 0

    def __post_init__(self) -> None:
        if self.sid < 1:
            raise ValueError("sid must be >= 1")
        if self.lc < 0 or self.epoch_counter < 0:
            raise ValueError("lc and epoch_counter must be non-negative")


def assign_tid(state: SequencerState, n_seq: int) -> int:
    if not 1 <= state.sid <= n_seq:
        raise ValueError(f"sid {state.sid} outside [1, {n_seq}]")
    tid = make_tid(state.sid, state.lc, n_seq)
    state.lc += 1
    return tid


def rebalance(state: SequencerState, max_lc: int) -> SequencerState:
    # never move backwards: a lower lc could re-issue an already assigned TID
    state.lc = max(state.lc, max_lc)
    return state


class EpochSizeLog:
    """Append-only ``(epoch_number u64, size u32) + crc32`` records.

    With ``path=None`` the log lives in memory (the object itself plays the
    durable medium in simulation).  A torn or corrupt tail is truncated on open.
    """

    def __init__(self, path: str | os.PathLike | None = None, fsync: bool = True):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.entries: list[tuple[int, int]] = []
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        data = self.path.read_bytes()
        step = _RECORD.size + _CRC.size
        good = 0
        for off in range(0, len(data) - step + 1, step):
            rec = data[off:off + _RECORD.size]
            (crc,) = _CRC.unpack_from(data, off + _RECORD.size)
            if zlib.crc32(rec) != crc:
                break
            self.entries.append(_RECORD.unpack(rec))
            good = off + step
        if good != len(data):
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    @staticmethod
    def encode_record(epoch: int, size: int) -> bytes:
        rec = _RECORD.pack(epoch, size)
        return rec + _CRC.pack(zlib.crc32(rec))

    def append(self, epoch: int, size: int) -> None:
        if self.entries and epoch != self.entries[-1][0] + 1:
            raise LogGapError(f"epoch {epoch} does not follow {self.entries[-1][0]}")
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(self.encode_record(epoch, size))
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
        self.entries.append((epoch, size))

    def since(self, epoch: int) -> list[tuple[int, int]]:
        out = [e for e in self.entries if e[0] >= epoch]
        expected = epoch
        for number, _ in out:
            if number != expected:
                raise LogGapError(f"epoch size log jumps from {expected} to {number}")
            expected += 1
        return out

    def truncate_after(self, epoch: int) -> None:
        """Drop entries for epochs beyond ``epoch`` (used when a recovery abandons them)."""
        kept = [e for e in self.entries if e[0] <= epoch]
        if len(kept) == len(self.entries):
            return
        self.entries = kept
        if self.path is not None:
            blob = b"".join(self.encode_record(e, s) for e, s in kept)
            tmp = self.path.with_suffix(".tmp")
            tmp.write_bytes(blob)
            os.replace(tmp, self.path)


@dataclass(slots=True)
class PendingRequest:
    """A request read from the input log, not yet sequenced."""
    partition: int
    offset: int
    arrival_ms: float
    payload: Any


class Sequencer:
    """One per worker; driven only by that worker's ingest step."""

    def __init__(self, state: SequencerState, config: ClusterConfig, log: EpochSizeLog):
        self.state = state
        self.config = config
        self.log = log
        # logged sizes to honour after recovery, in epoch order
        self.replay_sizes: list[tuple[int, int]] = []

    def form_epoch(self, epoch: int, available: Sequence[PendingRequest], now_ms: float):
        """Pick this epoch's new requests and assign their TIDs.

        ``available`` is the unconsumed suffix of this worker's input partitions
        in offset order.  Returns ``[(tid, request), ...]``; the epoch size is
        logged before returning.
        """
        if self.replay_sizes:
            number, size = self.replay_sizes.pop(0)
            if number != epoch:
                raise LogGapError(f"expected logged epoch {epoch}, found {number}")
            if size > len(available):
                raise LogGapError(
                    f"epoch {epoch} logged {size} requests but only {len(available)} replayable")
            chosen = list(available[:size])
        else:
            chosen = []
            for req in available:
                if len(chosen) >= self.config.epoch_max_txns or req.arrival_ms > now_ms:
                    break
                chosen.append(req)
            self.log.append(epoch, len(chosen))
        self.state.epoch_counter = epoch + 1
        return [(assign_tid(self.state, self.config.n_seq), req) for req in chosen]


def form_epoch(pending: Sequence[Any], config: ClusterConfig, state: SequencerState,
               log: EpochSizeLog, epoch: int | None = None):
    """Pure-data convenience wrapper: every pending request counts as arrived."""
    epoch = state.epoch_counter if epoch is None else epoch
    reqs = [p if isinstance(p, PendingRequest) else PendingRequest(0, i, 0.0, p)
            for i, p in enumerate(pending)]
    seq = Sequencer(state, config, log)
    return [(tid, req.payload) for tid, req in seq.form_epoch(epoch, reqs, float("inf"))]


def recover_sequencer(sid: int, lc: int, epoch_count: int, log: EpochSizeLog,
                      replayed: Sequence[Any], config: ClusterConfig,
                      max_lcs: Sequence[int] | None = None):
    """Rebuild sequencer state and re-form the logged epochs from replayed requests.

    ``max_lcs[i]``, when given, is the rebalance value broadcast after the i-th
    replayed epoch.  Returns ``(state, epochs)`` where ``epochs`` is a list of
    ``(epoch_number, [(tid, request), ...])``.
    """
    state = SequencerState(sid, lc, epoch_count)
    logged = log.since(epoch_count)
    if sum(size for _, size in logged) > len(replayed):
        raise LogGapError(
            f"log covers {sum(s for _, s in logged)} requests, only {len(replayed)} replayed")
    epochs = []
    pos = 0
    for i, (number, size) in enumerate(logged):
        batch = [(assign_tid(state, config.n_seq), r) for r in replayed[pos:pos + size]]
        pos += size
        state.epoch_counter = number + 1
        epochs.append((number, batch))
        if max_lcs is not None and i < len(max_lcs):
            rebalance(state, max_lcs[i])
    return state, epochs
