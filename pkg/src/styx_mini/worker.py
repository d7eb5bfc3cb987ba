"""A worker: ingest/sequencing plus the per-epoch transaction processing loop.

Every handler reacts to one delivered envelope.  Discovery runs each
transaction against the previous epoch's committed state with per-transaction
write buffers; completion is detected with ack-shares.  After the coordinator's
exchanges the worker applies the lock-free commits and then replays conflicted
transactions from the call-graph cache under TID-ordered locks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Any

from . import codec
from .commit import CachedInvocation, LockTable, RwSetIndex, local_conflicts, validate_replay
from .core import (CallMode, FunctionInvocation, NamespacedKey, RwSet, Transaction, TxnStatus,
                   ShareOverflowError)
from .runtime import CallContext, CallTreeTracker, FunctionTask, LogicAbort, StateView
from .sequencer import EpochSizeLog, PendingRequest, Sequencer, SequencerState, rebalance
from .state import WorkerState, WrongPartitionError
from .transport import Envelope, MsgType

if TYPE_CHECKING:
    from .cluster import Cluster

log = logging.getLogger(__name__)

COORD = 0

# internal failures that must not be mistaken for user logic aborts
_BUGS = (WrongPartitionError, ShareOverflowError, AssertionError)


def _share_out(share: Fraction | None):
    return None if not share else (share.numerator, share.denominator)


def _share_in(raw) -> Fraction:
    return Fraction(*raw) if raw else Fraction(0)


def _merge_abort(a: str | None, b: str | None) -> str | None:
    # several failing branches: keep the smallest message so replays agree
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


class _TxnView(StateView):
    def __init__(self, worker: Worker, rw: RwSet):
        self.worker = worker
        self.rw = rw

    def read(self, key: NamespacedKey) -> bytes | None:
        self.rw.record_read(key)
        if key in self.rw.write_buffer:
            return self.rw.write_buffer[key]
        return self.worker.store.get(key)

    def write(self, key: NamespacedKey, value: bytes) -> None:
        if not self.worker.owns(key):
            raise WrongPartitionError(f"{key} written on worker {self.worker.wid}")
        self.rw.record_write(key, value)


@dataclass
class _Run:
    """One executing invocation on this worker."""
    tid: int
    inv: tuple
    root: int
    mode: str
    share: Fraction
    ctx: CallContext
    task: FunctionTask | None = None
    reply: tuple | None = None  # (worker, call_id) for sync callees
    ids: list = field(default_factory=list)
    abort: str | None = None
    parent_host: int | None = None
    order: int = 0
    params: bytes = b""
    fingerprint: bytes = b""
    fn_name: str = ""
    # phase-4 replay only
    cached: CachedInvocation | None = None
    valid: bool = True


@dataclass
class _Root:
    txn: Transaction
    tracker: CallTreeTracker
    ids: set = field(default_factory=set)
    abort: str | None = None
    result: bytes | None = None
    done: bool = False
    # phase 4
    reports: dict = field(default_factory=dict)
    p4_result: bytes | None = None
    decided: bool = False


class Worker:
    def __init__(self, wid: int, cluster: Cluster, sid: int, store: WorkerState,
                 epoch_log: EpochSizeLog, cursor: int = 0, lc: int = 0, epoch_count: int = 0,
                 duplicates: set | None = None, resched: list | None = None):
        self.wid = wid
        self.cluster = cluster
        self.config = cluster.config
        self.registry = cluster.registry
        self.net = cluster.network
        self.store = store
        self.partition = wid - 1
        self.sequencer = Sequencer(SequencerState(sid, lc, epoch_count), self.config, epoch_log)
        self.cursor = cursor
        self.backlog: list[PendingRequest] = []
        self._backlog_end = cursor
        self.duplicates: set[int] = set(duplicates or ())
        self.suppressed = 0
        # rescheduled transactions waiting for the next epoch, TID ordered
        self.resched: list[Transaction] = list(resched or [])
        self.epoch = epoch_count
        self._call_ids = 0
        self.alive = True
        self.started_epoch: int | None = None
        # messages that overtook the control message opening their phase
        self._held: list[tuple[int, Envelope]] = []
        self._reset_epoch()

    # -- helpers -----------------------------------------------------------------

    def owns(self, key: NamespacedKey) -> bool:
        return self.registry.worker_of(key) == self.wid

    def send(self, dst: int, mtype: MsgType, txn: int, payload: dict) -> None:
        self.net.send(self.wid, dst, Envelope(mtype, self.epoch, txn, codec.encode(payload)))

    def to_coord(self, kind: str, **payload) -> None:
        payload.update(kind=kind, worker=self.wid, epoch=self.epoch)
        self.send(COORD, MsgType.CTRL, 0, payload)

    def _reset_epoch(self) -> None:
        self.roots: dict[int, _Root] = {}
        self.txn_rw: dict[int, RwSet] = {}
        self.cache: dict[int, list[CachedInvocation]] = {}
        self.suspended: dict[int, _Run] = {}
        self.index = RwSetIndex()
        self.aborted: set[int] = set()
        self.conflicts: set[int] = set()
        self._order = 0
        self._roots_reported = False
        # phase 4
        self.locks = LockTable()
        self.p4_rw: dict[int, RwSet] = {}
        self.replay_results: dict[tuple, tuple] = {}
        self.replay_waiting: dict[tuple, _Run] = {}
        self.p4_active = False
        self.p4_started = False
        self.p4_commits: list[int] = []
        self.p4_resched: list[int] = []

    def pending_requests(self) -> bool:
        return self.cursor < self.cluster.input_log.tail(self.partition) or bool(self.resched)

    def _refill_backlog(self) -> None:
        tail = self.cluster.input_log.tail(self.partition)
        for off, raw in self.cluster.input_log.read_from(self.partition, self._backlog_end):
            rec = codec.decode(raw)
            self.backlog.append(PendingRequest(self.partition, off, rec["arrival_ms"], rec))
        self._backlog_end = tail

    # -- dispatch -----------------------------------------------------------------

    def _early(self, env: Envelope, msg: dict) -> bool:
        if env.msg_type is MsgType.CTRL and msg["kind"] == "START_EPOCH":
            return False
        if env.epoch != self.started_epoch:
            return True
        phase4 = msg.get("replay") or (env.msg_type is MsgType.CTRL and msg["kind"] == "DECISION")
        return bool(phase4) and not self.p4_started

    def _release_held(self) -> None:
        held, self._held = self._held, []
        for src, env in held:
            self.handle(src, env)

    def handle(self, src: int, env: Envelope) -> None:
        msg = codec.decode(env.payload)
        if self._early(env, msg):
            self._held.append((src, env))
            return
        mt = env.msg_type
        if mt is MsgType.CTRL:
            getattr(self, "_ctrl_" + msg["kind"].lower())(msg)
        elif mt is MsgType.FN_CALL:
            self._on_fn_call(msg)
        elif mt is MsgType.FN_RESP:
            if msg.get("replay"):
                self._on_replay_result(msg)
            else:
                self._on_fn_resp(msg)
        elif mt is MsgType.ACK_SHARE:
            if msg.get("replay"):
                self._on_replay_ack(msg)
            else:
                self._on_ack(msg)
        else:  # pragma: no cover
            raise ValueError(f"unexpected message {mt}")

    # -- epoch start / sequencing ------------------------------------------------

    def _ctrl_start_epoch(self, msg: dict) -> None:
        epoch = msg["epoch"]
        self._reset_epoch()
        self.epoch = epoch
        self.started_epoch = epoch
        self._refill_backlog()
        now = epoch * self.config.epoch_interval_ms
        sequenced = self.sequencer.form_epoch(epoch, self.backlog, now)
        del self.backlog[:len(sequenced)]
        if sequenced:
            self.cursor = sequenced[-1][1].offset + 1
        txns = sorted(self.resched, key=lambda t: t.tid)
        self.resched = []
        for t in txns:
            t.transition(TxnStatus.PENDING)
        for tid, req in sequenced:
            rec = req.payload
            root = FunctionInvocation(NamespacedKey(rec["op"], str(rec["key"])), rec["fn"],
                                      tuple(rec["params"]))
            txns.append(Transaction(tid, rec["request_id"], root, source=(req.partition, req.offset),
                                    arrival_ms=req.arrival_ms))
        self.cluster.note_sequenced(self.wid, epoch, [(t.tid, t.request_id) for t in txns])
        for t in txns:
            self.roots[t.tid] = _Root(t, CallTreeTracker(t.tid))
        for t in txns:
            params = codec.encode(t.root.params)
            self._start(t.tid, (), self.wid, CallMode.ASYNC.value, Fraction(1), t.root.target,
                        t.root.function_name, params, None, [], None, None)
        self._maybe_roots_done()
        self._release_held()

    # -- discovery execution -----------------------------------------------------

    def _on_fn_call(self, m: dict) -> None:
        target = NamespacedKey(m["op"], m["key"])
        self._start(m["tid"], tuple(m["inv"]), m["root"], m["mode"], _share_in(m["share"]), target,
                    m["fn"], m["params"], tuple(m["reply"]) if m["reply"] else None,
                    [tuple(x) for x in m["ids"]], m["abort"], m["parent_host"])

    def _start(self, tid, inv, root, mode, share, target, fn_name, params, reply, ids, abort,
               parent_host) -> None:
        rw = self.txn_rw.setdefault(tid, RwSet())
        ctx = CallContext(tid, target, _TxnView(self, rw), self.registry)
        run = _Run(tid, inv, root, mode, share, ctx, reply=reply, ids=ids, abort=abort,
                   parent_host=parent_host, order=self._order, params=params, fn_name=fn_name,
                   fingerprint=codec.fingerprint(target.operator, target.key, fn_name, params))
        self._order += 1
        try:
            fn = self.registry.function(target.operator, fn_name)
            run.task = FunctionTask(fn, ctx, codec.decode(params))
        except _BUGS:
            raise
        except Exception as exc:
            self._fail(run, str(exc))
            return
        self._advance(run)

    def _advance(self, run: _Run, value: Any = None, error: BaseException | None = None) -> None:
        try:
            kind, val = run.task.advance(value, error)
        except _BUGS:
            raise
        except Exception as exc:
            self._fail(run, str(exc))
            return
        if kind == "sync":
            call = val.call
            idx = len(run.ctx.outgoing) - 1
            half = run.share / 2
            run.share -= half
            self._call_ids += 1
            cid = self._call_ids
            self.suspended[cid] = run
            self._dispatch(run, call, run.inv + (idx,), half, reply=(self.wid, cid), ids=[], abort=None)
        else:
            self._finish(run, val)

    def _dispatch(self, run: _Run, call, child_inv, share, reply, ids, abort) -> None:
        inv = call.invocation
        dst = self.registry.worker_of(inv.target)
        self.send(dst, MsgType.FN_CALL, run.tid, {
            "tid": run.tid, "inv": child_inv, "root": run.root, "mode": inv.mode.value,
            "share": _share_out(share), "op": inv.target.operator, "key": inv.target.key,
            "fn": inv.function_name, "params": call.params_bytes, "reply": reply,
            "ids": ids, "abort": abort, "parent_host": self.wid})

    def _record_cache(self, run: _Run) -> None:
        ctx = run.ctx
        downstream = tuple((c.invocation.mode.value, c.fingerprint, run.inv + (i,))
                           for i, c in enumerate(ctx.outgoing))
        rec = CachedInvocation(
            run.tid, run.inv, run.fingerprint, ctx.self_key.operator, ctx.self_key.key,
            run.fn_name, run.params, run.mode, self.wid,
            frozenset(ctx.rw.reads), frozenset(ctx.rw.writes), downstream, run.order,
            run.parent_host)
        self.cache.setdefault(run.tid, []).append(rec)

    def _finish(self, run: _Run, result: Any) -> None:
        self._record_cache(run)
        ids = run.ids + [(run.inv, self.wid)]
        result_bytes = codec.encode(result)
        if run.inv == () and run.tid in self.roots:
            self.roots[run.tid].result = result_bytes
        asyncs = [(i, c) for i, c in enumerate(run.ctx.outgoing) if c.invocation.mode is CallMode.ASYNC]
        if asyncs:
            shares = [run.share / len(asyncs)] * len(asyncs)
            for n, ((i, call), share) in enumerate(zip(asyncs, shares)):
                self._dispatch(run, call, run.inv + (i,), share, reply=None,
                               ids=ids if n == 0 else [], abort=run.abort if n == 0 else None)
            returned, carried = None, []
        else:
            returned, carried = run.share, ids
        if run.mode == CallMode.SYNC.value:
            self.send(run.reply[0], MsgType.FN_RESP, run.tid, {
                "tid": run.tid, "call_id": run.reply[1], "ok": True, "result": result_bytes,
                "error": None, "share": _share_out(returned), "ids": carried,
                "abort": run.abort if not asyncs else None})
        elif not asyncs:
            self.send(run.root, MsgType.ACK_SHARE, run.tid, {
                "tid": run.tid, "share": _share_out(returned), "ids": carried, "abort": run.abort})

    def _fail(self, run: _Run, message: str) -> None:
        if run.task is not None:
            run.task.close()
        ids = run.ids + [(run.inv, self.wid)]
        abort = _merge_abort(run.abort, message)
        if run.mode == CallMode.SYNC.value:
            self.send(run.reply[0], MsgType.FN_RESP, run.tid, {
                "tid": run.tid, "call_id": run.reply[1], "ok": False, "result": None,
                "error": message, "share": _share_out(run.share), "ids": ids, "abort": abort})
        else:
            self.send(run.root, MsgType.ACK_SHARE, run.tid, {
                "tid": run.tid, "share": _share_out(run.share), "ids": ids, "abort": abort})

    def _on_fn_resp(self, m: dict) -> None:
        run = self.suspended.pop(m["call_id"])
        run.share += _share_in(m["share"])
        run.ids.extend(tuple(x) for x in m["ids"])
        run.abort = _merge_abort(run.abort, m["abort"])
        if m["ok"]:
            self._advance(run, value=codec.decode(m["result"]))
        else:
            self._advance(run, error=LogicAbort(m["error"]))

    def _on_ack(self, m: dict) -> None:
        root = self.roots[m["tid"]]
        root.ids.update((tuple(inv), host) for inv, host in m["ids"])
        root.abort = _merge_abort(root.abort, m["abort"])
        if root.tracker.collect(_share_in(m["share"])):
            root.done = True
            self._maybe_roots_done()

    def _maybe_roots_done(self) -> None:
        if self._roots_reported or not all(r.done for r in self.roots.values()):
            return
        self._roots_reported = True
        aborted = sorted(t for t, r in self.roots.items() if r.abort is not None)
        self.to_coord("ROOTS_DONE", tids=sorted(self.roots), aborted=aborted)

    # -- conflict exchange and lock-free commit ---------------------------------------

    def _ctrl_aborts_global(self, msg: dict) -> None:
        self.aborted = set(msg["aborted"])
        for tid, rw in self.txn_rw.items():
            if tid not in self.aborted:
                self.index.add(tid, rw)
        self.cluster.note_local_index(self.wid, self.index)
        self.to_coord("DISCOVERY_DONE", conflicts=sorted(local_conflicts(self.index, self.aborted)))

    def _ctrl_conflicts_global(self, msg: dict) -> None:
        self.conflicts = set(msg["conflicts"])
        skip = self.conflicts | self.aborted
        for tid in sorted(self.txn_rw):
            if tid not in skip:
                self.store.apply_write_buffer(self.txn_rw[tid].write_buffer)
        for tid in sorted(self.roots):
            root = self.roots[tid]
            if tid in self.aborted:
                self._reply(root.txn, TxnStatus.ABORTED_LOGIC, root.abort, phase=3)
            elif tid not in self.conflicts:
                self._reply(root.txn, TxnStatus.COMMITTED, root.result, phase=3)
        self.to_coord("P3_DONE")

    def _reply(self, txn: Transaction, status: TxnStatus, payload, phase: int) -> None:
        txn.transition(status)
        txn.epoch_of_commit = self.epoch
        self.cluster.note_outcome(self.wid, txn, status, phase, self.epoch)
        if txn.tid in self.duplicates:
            self.duplicates.discard(txn.tid)
            self.suppressed += 1
            self.cluster.suppressed_total += 1
            return
        record = {"tid": txn.tid, "request_id": txn.request_id, "status": status.value,
                  "result": payload if status is TxnStatus.COMMITTED else None,
                  "message": payload if status is TxnStatus.ABORTED_LOGIC else None,
                  "epoch": self.epoch}
        self.cluster.emit_output(self.wid, record)

    # -- lock-based commit with call-graph caching ------------------------------

    def _ctrl_p4_start(self, msg: dict) -> None:
        self.p4_active = True
        self.p4_started = True
        for tid in sorted(self.conflicts & set(self.cache)):
            keys = set()
            for rec in self.cache[tid]:
                keys |= rec.keys
            self.locks.enqueue(tid, keys)
            self.p4_rw[tid] = RwSet()
        self._grant()
        self._maybe_p4_done()
        self._release_held()

    def _grant(self) -> None:
        for tid in self.locks.grantable():
            for rec in sorted(self.cache[tid], key=lambda r: r.order):
                self._replay(rec)

    def _replay(self, rec: CachedInvocation) -> None:
        target = NamespacedKey(rec.operator, rec.key)
        ctx = CallContext(rec.txn, target, _TxnView(self, self.p4_rw[rec.txn]), self.registry)
        run = _Run(rec.txn, rec.inv_id, 0, rec.mode, Fraction(0), ctx, cached=rec,
                   parent_host=rec.parent_host)
        try:
            fn = self.registry.function(rec.operator, rec.function_name)
            run.task = FunctionTask(fn, ctx, codec.decode(rec.params))
        except _BUGS:
            raise
        except Exception:
            self._replay_done(run, None, ok=False)
            return
        self._replay_advance(run)

    def _replay_advance(self, run: _Run, value: Any = None, error: BaseException | None = None) -> None:
        try:
            kind, val = run.task.advance(value, error)
        except _BUGS:
            raise
        except Exception:
            self._replay_done(run, None, ok=False)
            return
        if kind == "done":
            self._replay_done(run, val, ok=True)
            return
        rec = run.cached
        idx = len(run.ctx.outgoing) - 1
        call = val.call
        if idx >= len(rec.downstream) or rec.downstream[idx][:2] != (call.invocation.mode.value, call.fingerprint):
            # the call graph changed: stop here, the transaction will be rescheduled
            run.task.close()
            self._replay_done(run, None, ok=False)
            return
        child = (run.tid, rec.downstream[idx][2])
        if child in self.replay_results:
            ok, raw = self.replay_results.pop(child)
            self._replay_resume(run, ok, raw)
        else:
            self.replay_waiting[child] = run

    def _replay_resume(self, run: _Run, ok: bool, raw) -> None:
        if ok:
            self._replay_advance(run, value=codec.decode(raw))
        else:
            run.task.close()
            self._replay_done(run, None, ok=False)

    def _replay_done(self, run: _Run, result: Any, ok: bool) -> None:
        rec = run.cached
        valid = ok and validate_replay(
            rec, run.ctx.rw.reads, run.ctx.rw.writes,
            [(c.invocation.mode.value, c.fingerprint) for c in run.ctx.outgoing])
        raw = codec.encode(result) if ok else None
        if rec.mode == CallMode.SYNC.value:
            self.send(rec.parent_host, MsgType.FN_RESP, run.tid,
                      {"replay": True, "tid": run.tid, "inv": rec.inv_id, "ok": ok, "result": raw})
        root_host = self.cluster.root_host(run.tid)
        self.send(root_host, MsgType.ACK_SHARE, run.tid,
                  {"replay": True, "tid": run.tid, "inv": rec.inv_id, "valid": valid, "result": raw})

    def _on_replay_result(self, m: dict) -> None:
        key = (m["tid"], tuple(m["inv"]))
        run = self.replay_waiting.pop(key, None)
        if run is None:
            self.replay_results[key] = (m["ok"], m["result"])
        else:
            self._replay_resume(run, m["ok"], m["result"])

    def _on_replay_ack(self, m: dict) -> None:
        root = self.roots[m["tid"]]
        inv = tuple(m["inv"])
        root.reports[inv] = m["valid"]
        if inv == ():
            root.p4_result = m["result"]
        if len(root.reports) == len(root.ids):
            commit = all(root.reports.values())
            hosts = sorted({h for _, h in root.ids})
            for h in hosts:
                if h == self.wid:
                    self._apply_decision(m["tid"], commit)
                else:
                    self.send(h, MsgType.CTRL, m["tid"], {"kind": "DECISION", "tid": m["tid"],
                                                           "commit": commit})
            self._root_decided(root, commit)

    def _ctrl_decision(self, msg: dict) -> None:
        self._apply_decision(msg["tid"], msg["commit"])

    def _apply_decision(self, tid: int, commit: bool) -> None:
        if commit:
            self.store.apply_write_buffer(self.p4_rw[tid].write_buffer)
        self.locks.release(tid)
        self._grant()
        self._maybe_p4_done()

    def _root_decided(self, root: _Root, commit: bool) -> None:
        root.decided = True
        if commit:
            self.p4_commits.append(root.txn.tid)
            self._reply(root.txn, TxnStatus.COMMITTED, root.p4_result, phase=4)
        else:
            self.p4_resched.append(root.txn.tid)
            root.txn.transition(TxnStatus.RESCHEDULED)
            self.cluster.note_outcome(self.wid, root.txn, TxnStatus.RESCHEDULED, 4, self.epoch)
            self.resched.append(root.txn)
        self._maybe_p4_done()

    def _maybe_p4_done(self) -> None:
        if not self.p4_active or len(self.locks):
            return
        if any(not self.roots[t].decided for t in self.conflicts if t in self.roots):
            return
        self.p4_active = False
        self.to_coord("P4_DONE", commits=sorted(self.p4_commits), rescheduled=sorted(self.p4_resched),
                      lc=self.sequencer.state.lc)

    # -- epoch end ----------------------------------------------------------------

    def _ctrl_epoch_end(self, msg: dict) -> None:
        rebalance(self.sequencer.state, msg["max_lc"])
        self.epoch = msg["epoch"] + 1
        self.sequencer.state.epoch_counter = self.epoch
        if self.epoch % self.config.snapshot_every_epochs == 0:
            self.take_snapshot()
        self._reset_epoch()

    def snapshot_manifest(self, sealed: dict):
        from .checkpoint import SnapshotManifest
        st = self.sequencer.state
        return SnapshotManifest(
            self.epoch, self.wid, sealed, {self.partition: self.cursor},
            {self.partition: self.cluster.output_log.tail(self.partition)}, self.epoch,
            (st.sid, st.lc), [(t.tid, t.source[0], t.source[1]) for t in self.resched])

    def take_snapshot(self) -> None:
        _, sealed = self.store.seal_delta()
        self.cluster.persister.submit(self.snapshot_manifest(sealed))
        self.cluster.hit_point(f"e{self.epoch - 1}:snapshot_submitted", worker=self.wid)
