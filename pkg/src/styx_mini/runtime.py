"""Programming model: operators, entity contexts, function calls and ack-shares."""

from __future__ import annotations

import inspect
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable

from . import codec
from .core import (AckShare, CallMode, FunctionInvocation, NamespacedKey, RwSet,
                   ShareOverflowError, StyxError)


class DuplicateOperatorError(StyxError):
    pass


class UnknownOperatorError(StyxError):
    pass


class UnknownFunctionError(StyxError):
    pass


class LogicAbort(Exception):
    """Carries the user-visible message of an aborted transaction."""


class Operator:
    """A dataflow vertex hosting the functions and state of one entity type.

    >>> hotel = Operator("Hotel", n_partitions=4)
    >>> @hotel.register
    ... def reserve_hotel(context):
    ...     ...
    """

    def __init__(self, name: str, n_partitions: int = 1):
        if not name or "/" in name:
            raise ValueError(f"invalid operator name {name!r}")
        if n_partitions < 1:
            raise ValueError("n_partitions must be positive")
        self.name = name
        self.n_partitions = n_partitions
        self.functions: dict[str, Callable] = {}

    def register(self, fn: Callable | None = None, *, name: str | None = None):
        def deco(f: Callable) -> Callable:
            fname = name or f.__name__
            if fname in self.functions:
                raise ValueError(f"{self.name}.{fname} registered twice")
            self.functions[fname] = f
            return f
        return deco(fn) if fn is not None else deco

    def __repr__(self) -> str:
        return f"Operator({self.name!r}, n_partitions={self.n_partitions})"


def partition_of(key: str, n_partitions: int) -> int:
    return zlib.crc32(key.encode()) % n_partitions


class Registry:
    """Cluster-wide operator table plus the hash-partitioning routing function."""

    def __init__(self, n_workers: int = 1):
        self.n_workers = n_workers
        self.operators: dict[str, Operator] = {}
        self.frozen = False

    def register_operator(self, op: Operator) -> None:
        if self.frozen:
            raise StyxError("operators must be registered before the cluster starts")
        if op.name in self.operators:
            raise DuplicateOperatorError(op.name)
        self.operators[op.name] = op

    def partition_assignment(self, name: str) -> dict[int, list[int]]:
        op = self.operator(name)
        out: dict[int, list[int]] = {w: [] for w in range(1, self.n_workers + 1)}
        for p in range(op.n_partitions):
            out[p % self.n_workers + 1].append(p)
        return out

    def operator(self, name: str) -> Operator:
        try:
            return self.operators[name]
        except KeyError:
            raise UnknownOperatorError(name) from None

    def function(self, name: str, function_name: str) -> Callable:
        op = self.operator(name)
        try:
            return op.functions[function_name]
        except KeyError:
            raise UnknownFunctionError(f"{name}.{function_name}") from None

    def worker_of(self, key: NamespacedKey) -> int:
        op = self.operator(key.operator)
        return partition_of(key.key, op.n_partitions) % self.n_workers + 1


class StateView:
    """What a context may touch: one transaction's view of one worker's entities."""

    def read(self, key: NamespacedKey) -> bytes | None:
        raise NotImplementedError

    def write(self, key: NamespacedKey, value: bytes) -> None:
        raise NotImplementedError


@dataclass(slots=True)
class OutgoingCall:
    invocation: FunctionInvocation
    params_bytes: bytes
    fingerprint: bytes


class SyncCall:
    """Awaitable returned by :meth:`CallContext.call_sync`; the host resumes it with the result."""

    __slots__ = ("call",)

    def __init__(self, call: OutgoingCall):
        self.call = call

    def __await__(self):
        result = yield self
        return result


def _op_name(operator) -> str:
    return operator.name if isinstance(operator, Operator) else str(operator)


class CallContext:
    """First argument of every user function.

    Exposes only the calling entity's own state (``get``/``put``) and the two
    call primitives; per-invocation reads and writes are tracked in ``rw``.
    """

    def __init__(self, txn: int, self_key: NamespacedKey, view: StateView,
                 registry: Registry, pending_share: AckShare | None = None):
        self.txn = txn
        self.self_key = self_key
        self.rw = RwSet()
        self.outgoing: list[OutgoingCall] = []
        self.pending_share = pending_share
        self._view = view
        self._registry = registry

    @property
    def key(self) -> str:
        return self.self_key.key

    def get(self, default: Any = None) -> Any:
        self.rw.record_read(self.self_key)
        raw = self._view.read(self.self_key)
        return default if raw is None else codec.decode(raw)

    def put(self, value: Any) -> None:
        raw = codec.encode(value)
        self.rw.record_write(self.self_key, raw)
        self._view.write(self.self_key, raw)

    def _make_call(self, operator, function_name: str, key, params, mode: CallMode) -> OutgoingCall:
        name = _op_name(operator)
        self._registry.operator(name)
        params = tuple(params)
        target = NamespacedKey(name, str(key))
        raw = codec.encode(params)
        call = OutgoingCall(FunctionInvocation(target, function_name, params, mode), raw,
                            codec.fingerprint(name, target.key, function_name, raw))
        self.outgoing.append(call)
        return call

    def call_async(self, operator, function_name: str, key, params=()) -> None:
        self._make_call(operator, function_name, key, params, CallMode.ASYNC)

    def call_sync(self, operator, function_name: str, key, params=()) -> SyncCall:
        return SyncCall(self._make_call(operator, function_name, key, params, CallMode.SYNC))

    @property
    def async_calls(self) -> list[OutgoingCall]:
        return [c for c in self.outgoing if c.invocation.mode is CallMode.ASYNC]


class FunctionTask:
    """Drives one user function, which may be a plain function or a coroutine.

    ``advance`` returns ``("done", result)`` or ``("sync", SyncCall)``; user
    exceptions propagate to the caller of ``advance``.
    """

    __slots__ = ("ctx", "_coro", "_result", "_started")

    def __init__(self, fn: Callable, ctx: CallContext, params: tuple):
        self.ctx = ctx
        self._started = False
        out = fn(ctx, *params)
        if inspect.iscoroutine(out):
            self._coro = out
            self._result = None
        else:
            self._coro = None
            self._result = out

    def advance(self, value: Any = None, error: BaseException | None = None):
        if self._coro is None:
            return "done", self._result
        try:
            if error is not None:
                yielded = self._coro.throw(error)
            else:
                yielded = self._coro.send(value if self._started else None)
        except StopIteration as stop:
            return "done", stop.value
        finally:
            self._started = True
        if not isinstance(yielded, SyncCall):
            raise StyxError(f"user function awaited an unsupported object: {yielded!r}")
        return "sync", yielded

    def close(self) -> None:
        if self._coro is not None:
            self._coro.close()


def invoke(ctx: CallContext, fn: Callable, params: tuple = ()):
    """Run a function that makes no synchronous calls to completion.

    Returns the function's result; an uncaught user exception becomes
    :class:`LogicAbort` carrying the exception message.
    """
    try:
        task = FunctionTask(fn, ctx, params)
        kind, value = task.advance()
    except (StyxError, LogicAbort):
        raise
    except Exception as exc:  # user logic abort
        raise LogicAbort(str(exc)) from exc
    if kind != "done":
        task.close()
        raise StyxError("invoke() cannot service synchronous calls; run inside a cluster")
    return value


def collect_share(tracker: CallTreeTracker, share: AckShare) -> bool:
    return tracker.collect(share)


@dataclass
class CallTreeTracker:
    """Root-side accumulator of a transaction's returned ack-shares."""

    root_txn: int
    collected: Fraction = Fraction(0)
    terminal_records: list = field(default_factory=list)

    def collect(self, share: AckShare | Fraction, record: Any = None) -> bool:
        value = share.value if isinstance(share, AckShare) else Fraction(share)
        total = self.collected + value
        if total > 1:
            raise ShareOverflowError(f"txn {self.root_txn}: shares sum to {total}")
        self.collected = total
        if record is not None:
            self.terminal_records.append(record)
        return total == 1

    @property
    def complete(self) -> bool:
        return self.collected == 1
