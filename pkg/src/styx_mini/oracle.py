"""Reference serial interpreter and the serializability / exactly-once checks."""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Iterable

from . import codec
from .core import NamespacedKey, StyxError, TxnStatus, parse_namespaced_key
from .runtime import CallContext, FunctionTask, LogicAbort, Operator, Registry, StateView


class TraceCorruptError(StyxError):
    pass


class _SerialView(StateView):
    def __init__(self, state: dict, buffer: dict):
        self.state, self.buffer = state, buffer

    def read(self, key):
        if key in self.buffer:
            return self.buffer[key]
        return self.state.get(key)

    def write(self, key, value):
        self.buffer[key] = value


class ReferenceInterpreter:
    """Executes one transaction at a time against a plain dict.

    Async calls run breadth-first after their caller returns; a sync call runs
    to completion before the caller resumes.  Any uncaught exception aborts
    the whole transaction and discards its writes.
    """

    def __init__(self, operators: Iterable[Operator], state: dict[NamespacedKey, bytes] | None = None):
        self.registry = Registry(1)
        for op in operators:
            self.registry.register_operator(op)
        self.state: dict[NamespacedKey, bytes] = dict(state or {})

    def _run(self, target: NamespacedKey, fn_name: str, params: tuple, buffer: dict,
             queue: deque, errors: list) -> tuple[bool, Any]:
        ctx = CallContext(0, target, _SerialView(self.state, buffer), self.registry)
        try:
            task = FunctionTask(self.registry.function(target.operator, fn_name), ctx, params)
            value, error = None, None
            while True:
                kind, out = task.advance(value, error)
                if kind == "done":
                    break
                inv = out.call.invocation
                ok, res = self._run(inv.target, inv.function_name, inv.params, buffer, queue, errors)
                value, error = (res, None) if ok else (None, LogicAbort(res))
        except StyxError:
            raise
        except Exception as exc:
            errors.append(str(exc))
            return False, str(exc)
        for call in ctx.async_calls:
            queue.append(call.invocation)
        return True, out

    def execute(self, operator: str, key: str, fn_name: str, params: tuple) -> tuple[TxnStatus, Any]:
        buffer: dict = {}
        queue: deque = deque()
        errors: list[str] = []
        ok, result = self._run(NamespacedKey(operator, str(key)), fn_name, tuple(params), buffer,
                               queue, errors)
        while queue:
            inv = queue.popleft()
            self._run(inv.target, inv.function_name, inv.params, buffer, queue, errors)
        if errors:
            return TxnStatus.ABORTED_LOGIC, min(errors)
        self.state.update(buffer)
        return TxnStatus.COMMITTED, result


# -- traces ----------------------------------------------------------------------


@dataclass
class TraceEntry:
    tid: int
    request_id: Any
    status: str
    epoch: int
    phase: int
    result: Any = None


@dataclass
class Trace:
    """Inputs, serial-equivalent order of outcomes, and state before and after a run."""
    initial_state: dict[NamespacedKey, bytes] = field(default_factory=dict)
    inputs: dict[Any, tuple] = field(default_factory=dict)
    order: list[TraceEntry] = field(default_factory=list)
    final_state: dict[NamespacedKey, bytes] = field(default_factory=dict)

    @classmethod
    def from_cluster(cls, cluster) -> Trace:
        entries = []
        results = {r["tid"]: r for r in cluster.output_records()}
        for o in cluster.outcomes.values():
            rec = results.get(o.tid, {})
            # a logic abort saw only pre-epoch state and wrote nothing
            phase = 0 if o.status is TxnStatus.ABORTED_LOGIC else o.phase
            payload = rec.get("result") if o.status is TxnStatus.COMMITTED else rec.get("message")
            entries.append(TraceEntry(o.tid, o.request_id, o.status.value, o.epoch, phase, payload))
        entries.sort(key=lambda e: (e.epoch, e.phase, e.tid))
        inputs = {rid: (inv.target.operator, inv.target.key, inv.function_name, inv.params)
                  for rid, inv in cluster.inputs.items()}
        return cls(dict(cluster.initial_state), inputs, entries, cluster.final_state())

    def to_json(self) -> str:
        def st(d):
            return {k.render(): v.hex() for k, v in sorted(d.items(), key=lambda kv: kv[0].render())}
        return json.dumps({
            "initial_state": st(self.initial_state),
            "inputs": [[rid, list(v[:3]), codec.encode(v[3]).hex()] for rid, v in self.inputs.items()],
            "order": [[e.tid, e.request_id, e.status, e.epoch, e.phase,
                       e.result.hex() if isinstance(e.result, bytes) else e.result]
                      for e in self.order],
            "final_state": st(self.final_state),
        })

    @classmethod
    def from_json(cls, text: str) -> Trace:
        try:
            raw = json.loads(text)

            def st(d):
                return {parse_namespaced_key(k): bytes.fromhex(v) for k, v in d.items()}
            inputs = {rid: (v[0], v[1], v[2], codec.decode(bytes.fromhex(p)))
                      for rid, v, p in raw["inputs"]}
            order = [TraceEntry(t, rid, s, ep, ph, bytes.fromhex(r) if s == "committed" and r else r)
                     for t, rid, s, ep, ph, r in raw["order"]]
            return cls(st(raw["initial_state"]), inputs, order, st(raw["final_state"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise TraceCorruptError(f"unreadable trace: {exc}") from exc


@dataclass
class Verdict:
    ok: bool
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_serializable(trace: Trace, operators: Iterable[Operator]) -> Verdict:
    """Replay outcomes serially in trace order; states and per-transaction outcomes must agree."""
    ref = ReferenceInterpreter(operators, trace.initial_state)
    seen = set()
    for e in trace.order:
        if e.request_id not in trace.inputs:
            raise TraceCorruptError(f"outcome for unknown request {e.request_id!r}")
        if e.request_id in seen:
            raise TraceCorruptError(f"request {e.request_id!r} has two outcomes")
        seen.add(e.request_id)
        op, key, fn, params = trace.inputs[e.request_id]
        status, result = ref.execute(op, key, fn, params)
        if status.value != e.status:
            return Verdict(False, f"tid {e.tid}: serial replay {status.value}, run {e.status}")
        if status is TxnStatus.COMMITTED and e.result is not None and codec.encode(result) != e.result:
            return Verdict(False, f"tid {e.tid}: result differs from serial replay")
        if status is TxnStatus.ABORTED_LOGIC and e.result is not None and result != e.result:
            return Verdict(False, f"tid {e.tid}: abort message differs from serial replay")
    if ref.state != trace.final_state:
        diff = sorted(str(k) for k in set(ref.state) | set(trace.final_state)
                      if ref.state.get(k) != trace.final_state.get(k))
        return Verdict(False, f"final state differs on {len(diff)} keys, e.g. {diff[:3]}")
    return Verdict(True, f"{len(trace.order)} outcomes replayed")


def verify_exactly_once(output_records: Iterable[dict], inputs: Iterable[Any],
                        initial_state: dict | None = None, final_state: dict | None = None,
                        conserved_operator: str | None = None) -> Verdict:
    """One output record per request id, none for unknown ids, and optionally a conserved sum."""
    counts = Counter(r["request_id"] for r in output_records)
    expected = set(inputs)
    missing = sorted(map(str, expected - set(counts)))
    dup = sorted(str(rid) for rid, n in counts.items() if n > 1)
    extra = sorted(map(str, set(counts) - expected))
    if missing or dup or extra:
        return Verdict(False, f"missing={missing[:5]} duplicated={dup[:5]} unknown={extra[:5]}")
    if conserved_operator is not None:
        def total(state):
            return sum(codec.decode(v) for k, v in state.items() if k.operator == conserved_operator)
        before, after = total(initial_state), total(final_state)
        if before != after:
            return Verdict(False, f"{conserved_operator} total changed from {before} to {after}")
    return Verdict(True, f"{len(expected)} requests, one reply each")
