"""Epoch commit decisions: RW-set index, conflict rule, TID-ordered lock table, call-graph cache."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .core import RwSet


class RwSetIndex:
    """Key -> TIDs that read / wrote it during one epoch's discovery."""

    def __init__(self):
        self.readers: dict = defaultdict(set)
        self.writers: dict = defaultdict(set)

    def add(self, tid: int, rw: RwSet) -> None:
        for k in rw.reads:
            self.readers[k].add(tid)
        for k in rw.writes:
            self.writers[k].add(tid)

    def add_access(self, key, tid: int, write: bool) -> None:
        (self.writers if write else self.readers)[key].add(tid)

    def remove(self, tids: Iterable[int]) -> None:
        tids = set(tids)
        for table in (self.readers, self.writers):
            for key in list(table):
                table[key] -= tids
                if not table[key]:
                    del table[key]

    def merge(self, other: RwSetIndex) -> None:
        for key, tids in other.readers.items():
            self.readers[key] |= tids
        for key, tids in other.writers.items():
            self.writers[key] |= tids

    def keys(self) -> set:
        return set(self.readers) | set(self.writers)

    def accessors(self, key) -> set[int]:
        return self.readers.get(key, set()) | self.writers.get(key, set())

    def tids(self) -> set[int]:
        out: set[int] = set()
        for table in (self.readers, self.writers):
            for tids in table.values():
                out |= tids
        return out

    def as_dict(self) -> dict:
        return {k: sorted(self.accessors(k)) for k in sorted(self.keys(), key=str)}


def local_conflicts(index: RwSetIndex, aborted: Iterable[int] = ()) -> set[int]:
    """TIDs deferred by a lower-TID writer of a key they read or write.

    Logic-aborted transactions neither conflict nor cause conflicts.
    """
    aborted = set(aborted)
    out: set[int] = set()
    for key in index.keys():
        writers = index.writers.get(key, set()) - aborted
        if not writers:
            continue
        lowest = min(writers)
        for tid in index.accessors(key) - aborted:
            if tid > lowest:
                out.add(tid)
    return out


def resolve_conflicts(index: RwSetIndex, epoch_tids: Iterable[int] | None = None,
                      aborted: Iterable[int] = (),
                      all_conflicts: Iterable[int] | None = None) -> tuple[set[int], set[int]]:
    """Split an epoch into ``(commit_set, conflict_set)``.

    ``all_conflicts`` is the globally exchanged union; when omitted it is
    computed from ``index`` (which must then be the global union of indices).
    """
    aborted = set(aborted)
    conflicts = set(all_conflicts) if all_conflicts is not None else local_conflicts(index, aborted)
    conflicts -= aborted
    tids = set(epoch_tids) if epoch_tids is not None else index.tids()
    return tids - conflicts - aborted, conflicts


class LockTable:
    """Per-worker key locks granted to conflicted transactions in ascending TID order.

    A transaction's locks on this worker are granted as one block once it is
    the lowest undecided TID queued on every key it needs here.
    """

    def __init__(self):
        self.queues: dict = defaultdict(list)
        self.needs: dict[int, set] = {}
        self.granted: set[int] = set()

    def enqueue(self, tid: int, keys: Iterable) -> None:
        keys = set(keys)
        self.needs[tid] = keys
        for k in keys:
            q = self.queues[k]
            q.append(tid)
            q.sort()

    def grantable(self) -> list[int]:
        """Newly grantable TIDs, marking them granted."""
        out = []
        for tid in sorted(self.needs):
            if tid in self.granted:
                continue
            if all(self.queues[k][0] == tid for k in self.needs[tid]):
                self.granted.add(tid)
                out.append(tid)
        return out

    def release(self, tid: int) -> None:
        for k in self.needs.pop(tid, ()):
            self.queues[k].remove(tid)
            if not self.queues[k]:
                del self.queues[k]
        self.granted.discard(tid)

    def __len__(self) -> int:
        return len(self.needs)


def lock_grant_order(conflicts: Iterable[int], keys_by_tid: dict[int, Iterable]) -> list[list[int]]:
    """Waves of a TID-ordered lock schedule on one worker (each wave runs concurrently)."""
    table = LockTable()
    for tid in sorted(conflicts):
        table.enqueue(tid, keys_by_tid.get(tid, ()))
    waves = []
    while len(table):
        wave = table.grantable()
        waves.append(wave)
        for tid in wave:
            table.release(tid)
    return waves


@dataclass
class CachedInvocation:
    """Discovery-time record of one function invocation, reused in the lock-based phase."""
    txn: int
    inv_id: tuple
    fingerprint: bytes
    operator: str
    key: str
    function_name: str
    params: bytes
    mode: str
    host: int
    reads: frozenset = frozenset()
    writes: frozenset = frozenset()
    # ordered (mode, fingerprint, child inv_id) of calls this invocation made
    downstream: tuple = ()
    order: int = 0
    parent_host: int | None = None

    @property
    def keys(self) -> frozenset:
        return self.reads | self.writes


def validate_replay(cached: CachedInvocation, reads, writes, downstream_fps) -> bool:
    """A re-invocation may reuse the cache iff its keys and downstream calls are unchanged."""
    return (frozenset(reads) == cached.reads and frozenset(writes) == cached.writes
            and tuple(downstream_fps) == tuple((m, fp) for m, fp, _ in cached.downstream))


@dataclass
class EpochPlan:
    epoch_number: int
    txns: list[int] = field(default_factory=list)
    rw_index: RwSetIndex = field(default_factory=RwSetIndex)
    conflict_set: set[int] = field(default_factory=set)
    commit_set: set[int] = field(default_factory=set)
    aborted: set[int] = field(default_factory=set)
    p4_committed: list[int] = field(default_factory=list)
    rescheduled: list[int] = field(default_factory=list)

    def check(self) -> None:
        assert not (self.conflict_set & self.commit_set)
        assert self.conflict_set | self.commit_set | self.aborted == set(self.txns)
