"""Shared domain model: keys, TIDs, invocations, transactions, ack-shares."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

KEY_SCHEME = "entities://"


class StyxError(Exception):
    """Base class for runtime errors raised by the library itself."""


class MalformedKeyError(StyxError, ValueError):
    pass


class ShareOverflowError(StyxError):
    """Collected ack-shares exceeded one; indicates a protocol bug."""


@dataclass(frozen=True, slots=True, order=True)
class NamespacedKey:
    operator: str
    key: str

    def __post_init__(self) -> None:
        if not self.operator or not self.key:
            raise MalformedKeyError(f"empty operator or key in {self.operator!r}/{self.key!r}")
        if "/" in self.operator:
            raise MalformedKeyError(f"operator name may not contain '/': {self.operator!r}")

    def render(self) -> str:
        return f"{KEY_SCHEME}{self.operator}/{self.key}"

    def __str__(self) -> str:
        return self.render()


def parse_namespaced_key(text: str) -> NamespacedKey:
    """Parse ``entities://<operator>/<key>``; the key part may contain '/'."""
    if not text.startswith(KEY_SCHEME):
        raise MalformedKeyError(f"missing {KEY_SCHEME!r} scheme: {text!r}")
    rest = text[len(KEY_SCHEME):]
    operator, sep, key = rest.partition("/")
    if not sep or not operator or not key:
        raise MalformedKeyError(f"malformed key: {text!r}")
    return NamespacedKey(operator, key)


def make_tid(sid: int, lc: int, n_seq: int) -> int:
    return sid + lc * n_seq


def decompose_tid(tid: int, n_seq: int) -> tuple[int, int]:
    """Invert ``tid = sid + lc * n_seq`` with ``sid`` in ``[1, n_seq]``."""
    if tid < 1 or n_seq < 1:
        raise ValueError(f"tid and n_seq must be positive, got {tid}, {n_seq}")
    lc, rem = divmod(tid - 1, n_seq)
    return rem + 1, lc


class CallMode(str, enum.Enum):
    ASYNC = "async"
    SYNC = "sync"


@dataclass(frozen=True, slots=True)
class FunctionInvocation:
    target: NamespacedKey
    function_name: str
    params: tuple = ()
    mode: CallMode = CallMode.ASYNC


class TxnStatus(str, enum.Enum):
    PENDING = "pending"
    COMMITTED = "committed"
    ABORTED_LOGIC = "aborted_logic"
    RESCHEDULED = "rescheduled"


_TRANSITIONS = {
    TxnStatus.PENDING: {TxnStatus.COMMITTED, TxnStatus.ABORTED_LOGIC, TxnStatus.RESCHEDULED},
    TxnStatus.RESCHEDULED: {TxnStatus.PENDING},
    TxnStatus.COMMITTED: set(),
    TxnStatus.ABORTED_LOGIC: set(),
}


@dataclass(slots=True)
class Transaction:
    tid: int
    request_id: Any
    root: FunctionInvocation
    status: TxnStatus = TxnStatus.PENDING
    epoch_of_commit: int | None = None
    # (partition, offset) of the input record this transaction was sequenced from
    source: tuple[int, int] | None = None
    arrival_ms: float = 0.0

    def transition(self, new: TxnStatus) -> None:
        if new not in _TRANSITIONS[self.status]:
            raise StyxError(f"txn {self.tid}: illegal transition {self.status.value} -> {new.value}")
        self.status = new


@dataclass(slots=True)
class RwSet:
    reads: set = field(default_factory=set)
    writes: set = field(default_factory=set)
    write_buffer: dict = field(default_factory=dict)

    def record_read(self, key: NamespacedKey) -> None:
        self.reads.add(key)

    def record_write(self, key: NamespacedKey, value: bytes) -> None:
        self.writes.add(key)
        self.write_buffer[key] = value

    def keys(self) -> set:
        return self.reads | self.writes

    def merge(self, other: RwSet) -> None:
        self.reads |= other.reads
        for k, v in other.write_buffer.items():
            self.record_write(k, v)

    def __bool__(self) -> bool:
        return bool(self.reads or self.writes)


class AckShare:
    """Exact rational fraction of a transaction's completion token."""

    __slots__ = ("_value",)

    def __init__(self, numerator: int = 1, denominator: int = 1):
        value = Fraction(numerator, denominator)
        if not 0 < value <= 1:
            raise ValueError(f"ack-share must lie in (0, 1], got {value}")
        self._value = value

    @classmethod
    def from_fraction(cls, value: Fraction) -> AckShare:
        return cls(value.numerator, value.denominator)

    @property
    def numerator(self) -> int:
        return self._value.numerator

    @property
    def denominator(self) -> int:
        return self._value.denominator

    @property
    def value(self) -> Fraction:
        return self._value

    def split(self, n: int) -> list[AckShare]:
        return split_share(self, n)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, AckShare):
            return self._value == other._value
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._value)

    def __repr__(self) -> str:
        return f"AckShare({self._value})"


def split_share(share: AckShare, n: int) -> list[AckShare]:
    if n < 1:
        raise ValueError("cannot split a share into fewer than one part")
    part = share.value / n
    return [AckShare.from_fraction(part) for _ in range(n)]


@dataclass(frozen=True, slots=True)
class ClusterConfig:
    n_workers: int = 1
    epoch_interval_ms: int = 1
    epoch_max_txns: int = 1000
    snapshot_interval_ms: int = 10_000
    heartbeat_interval_ms: int = 250
    heartbeat_timeout_ms: int = 1000
    rng_seed: int = 0
    compaction_every: int = 4
    # scheduler steps a background snapshot write stays in flight before it commits
    snapshot_persist_steps: int = 8

    def __post_init__(self) -> None:
        for name in ("n_workers", "epoch_interval_ms", "epoch_max_txns", "snapshot_interval_ms",
                     "heartbeat_timeout_ms", "compaction_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not -(2**63) <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must fit in 64 bits")

    @property
    def n_seq(self) -> int:
        return self.n_workers

    @property
    def snapshot_every_epochs(self) -> int:
        return max(1, self.snapshot_interval_ms // self.epoch_interval_ms)
