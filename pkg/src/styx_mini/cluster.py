"""In-process cluster: coordinator, workers, logs and snapshot store under one seeded scheduler."""

from __future__ import annotations

import logging
import tempfile
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from . import codec
from .checkpoint import SnapshotManifest, SnapshotStore, recover
from .commit import RwSetIndex
from .coordinator import COORD, Coordinator
from .core import (ClusterConfig, FunctionInvocation, NamespacedKey, StyxError, Transaction,
                   TxnStatus, decompose_tid)
from .runtime import Operator, Registry
from .sequencer import EpochSizeLog
from .state import WorkerState
from .transport import FaultEvent, FaultInjector, Network, ReplayableLog
from .worker import Worker

log = logging.getLogger(__name__)


class RecoveryError(StyxError):
    pass


@dataclass
class Outcome:
    tid: int
    request_id: Any
    status: TxnStatus
    phase: int
    epoch: int
    arrival_ms: float
    worker: int


class Persister:
    """Background snapshot writer: staged at the epoch boundary, published N steps later."""

    def __init__(self, cluster: Cluster):
        self.cluster = cluster
        self.inflight: list[tuple[int, SnapshotManifest]] = []
        self.failed = 0

    def submit(self, m: SnapshotManifest) -> None:
        try:
            self.cluster.store.stage(m)
        except OSError as exc:
            # previous snapshot stays authoritative
            log.warning("snapshot %s of worker %s skipped: %s", m.snapshot_id, m.worker_id, exc)
            self.failed += 1
            return
        due = self.cluster.network.step + self.cluster.config.snapshot_persist_steps
        self.inflight.append((due, m))

    def tick(self, step: int) -> None:
        if not self.inflight:
            return
        ready = [(d, m) for d, m in self.inflight if d <= step]
        if not ready:
            return
        self.inflight = [(d, m) for d, m in self.inflight if d > step]
        for _, m in ready:
            self._publish(m)

    def _publish(self, m: SnapshotManifest) -> None:
        c = self.cluster
        try:
            c.store.publish(m.worker_id, m.snapshot_id)
        except OSError as exc:
            log.warning("publishing snapshot %s of worker %s failed: %s", m.snapshot_id, m.worker_id, exc)
            self.failed += 1
            return
        c.record_event("manifest", worker=m.worker_id, snapshot_id=m.snapshot_id)
        w = c.workers.get(m.worker_id)
        if w is not None:
            w.store.release_sealed(m.snapshot_id)
        if c.coordinator.snapshot_done(m.worker_id, m.snapshot_id):
            c.on_global_snapshot(m.snapshot_id)

    def flush(self) -> None:
        pending, self.inflight = self.inflight, []
        for _, m in pending:
            self._publish(m)

    def cancel(self, worker: int | None = None) -> None:
        self.inflight = [(d, m) for d, m in self.inflight
                         if worker is not None and m.worker_id != worker]


class Cluster:
    """A whole deployment in one process.

    Operators are registered up front; requests are appended to the input log
    with logical arrival times; :meth:`run` drives epochs until every request
    has a final outcome.  Faults come from a :class:`FaultInjector`.
    """

    def __init__(self, operators: Iterable[Operator], config: ClusterConfig,
                 root: str | Path | None = None, faults: FaultInjector | list | None = None,
                 file_logs: bool = False, fsync: bool = False, step_ms: float = 0.001):
        self.config = config
        self.registry = Registry(config.n_workers)
        for op in operators:
            self.registry.register_operator(op)
        self.registry.frozen = True
        if root is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="styx-mini-")
            root = self._tmp.name
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.file_logs = file_logs
        self.step_ms = step_ms
        self.network = Network(config.rng_seed)
        self.coordinator = Coordinator(config, self.network, on_point=self.hit_point)
        self.store = SnapshotStore(self.root / "snapshots", fsync=fsync)
        n = config.n_workers
        self.input_log = ReplayableLog(n, self.root / "input" if file_logs else None, fsync=fsync)
        self.output_log = ReplayableLog(n, self.root / "output" if file_logs else None, fsync=fsync)
        self.epoch_logs = {w: self._open_epoch_log(w) for w in range(1, n + 1)}
        if isinstance(faults, list):
            faults = FaultInjector(faults)
        self.faults = faults or FaultInjector()
        self.persister = Persister(self)
        self.workers: dict[int, Worker] = {}
        for w in range(1, n + 1):
            wid, sid, _ = self.coordinator.register_worker(f"inproc://worker/{w}")
            self.workers[wid] = Worker(wid, self, sid, WorkerState(self._owner(wid)),
                                       self.epoch_logs[wid])
        self.next_epoch = 0
        self.now_ms = 0.0
        self._last_sweep = 0.0
        self.started = False
        self.initial_state: dict[NamespacedKey, bytes] = {}
        self.inputs: dict[Any, FunctionInvocation] = {}
        self.outcomes: dict[int, Outcome] = {}
        self.sequence_log: list[tuple[int, int, tuple]] = []
        # never truncated by recovery: lets replayed epochs be compared with the originals
        self.sequence_history: list[tuple[int, int, tuple]] = []
        self.rescheduled_tids: set[int] = set()
        self.indexes: dict[tuple[int, int], RwSetIndex] = {}
        self.events: list[tuple] = []
        self.recoveries: list[dict] = []
        self.crashed: set[int] = set()
        self.pending_recovery = False
        self.restart_requested = False
        self.reschedule_count = 0
        self.suppressed_total = 0

    def _open_epoch_log(self, w: int) -> EpochSizeLog:
        if not self.file_logs:
            return EpochSizeLog()
        d = self.root / f"worker_{w}"
        d.mkdir(exist_ok=True)
        return EpochSizeLog(d / "epochs.log", fsync=self.fsync)

    def _owner(self, wid: int):
        return lambda key: self.registry.worker_of(key) == wid

    # -- loading ------------------------------------------------------------------

    def load_state(self, entries: dict) -> None:
        """Seed committed entity state before the first epoch (becomes snapshot 0)."""
        if self.started:
            raise StyxError("initial state must be loaded before the cluster runs")
        for key, value in entries.items():
            raw = codec.encode(value)
            self.initial_state[key] = raw
            self.workers[self.registry.worker_of(key)].store.committed[key] = raw

    def submit(self, request_id, operator: str | Operator, key, function_name: str, params=(),
               arrival_ms: float = 0.0) -> int:
        """Append a client request to the input partition of the root key's worker."""
        op = operator.name if isinstance(operator, Operator) else operator
        nk = NamespacedKey(op, str(key))
        self.registry.function(op, function_name)
        if request_id in self.inputs:
            raise StyxError(f"duplicate request id {request_id!r}")
        self.inputs[request_id] = FunctionInvocation(nk, function_name, tuple(params))
        part = self.registry.worker_of(nk) - 1
        rec = {"request_id": request_id, "op": op, "key": nk.key, "fn": function_name,
               "params": tuple(params), "arrival_ms": float(arrival_ms)}
        return self.input_log.append(part, codec.encode(rec))

    def _bootstrap(self) -> None:
        for wid, w in self.workers.items():
            m = SnapshotManifest(0, wid, dict(w.store.committed), {w.partition: 0},
                                 {w.partition: self.output_log.tail(w.partition)}, 0,
                                 (w.sequencer.state.sid, 0), [])
            self.store.write(m)
            self.coordinator.snapshot_done(wid, 0)
            self.record_event("manifest", worker=wid, snapshot_id=0)
        self.started = True

    # -- instrumentation hooks used by workers -----------------------------------

    def record_event(self, kind: str, **data) -> None:
        self.events.append((len(self.events), kind, data))

    def note_sequenced(self, wid: int, epoch: int, pairs: list) -> None:
        self.sequence_log.append((epoch, wid, tuple(pairs)))
        self.sequence_history.append((epoch, wid, tuple(pairs)))

    def note_local_index(self, wid: int, index: RwSetIndex) -> None:
        epoch = self.coordinator.view.current_epoch
        self.indexes[(epoch, wid)] = index
        self.coordinator.plans[epoch].rw_index.merge(index)

    def note_outcome(self, wid: int, txn: Transaction, status: TxnStatus, phase: int,
                     epoch: int) -> None:
        if status is TxnStatus.RESCHEDULED:
            self.reschedule_count += 1
            self.rescheduled_tids.add(txn.tid)
            return
        self.outcomes[txn.tid] = Outcome(txn.tid, txn.request_id, status, phase, epoch,
                                         txn.arrival_ms, wid)

    def emit_output(self, wid: int, record: dict) -> None:
        off = self.output_log.append(wid - 1, codec.encode(record))
        self.record_event("reply", tid=record["tid"], epoch=record["epoch"], worker=wid, offset=off)

    def root_host(self, tid: int) -> int:
        sid, _ = decompose_tid(tid, self.config.n_seq)
        return sid  # sids are handed out in registration order, so sid == worker id

    def hit_point(self, name: str, worker: int | None = None) -> None:
        for ev in self.faults.hit_point(name, self.network.step):
            self._apply_fault(ev)

    def on_global_snapshot(self, snapshot_id: int) -> None:
        if snapshot_id == 0:
            return
        done = sorted(k for k, v in self.coordinator.snapshot_acks.items()
                      if len(v) == self.config.n_workers and k > 0)
        if len(done) % self.config.compaction_every == 0:
            for wid in self.workers:
                self.store.compact_worker(wid, snapshot_id)
            self.record_event("compaction", upto=snapshot_id)

    # -- faults ---------------------------------------------------------------------

    def _apply_fault(self, ev: FaultEvent) -> None:
        w = ev.worker
        self.record_event("fault", action=ev.action, worker=w, step=self.network.step)
        if ev.action == "crash_worker":
            self.crash(w)
        elif ev.action == "drop_channel":
            self.network.broken.add(w)
            self.network.drop_node(w)
            self.pending_recovery = True
        elif ev.action == "restart_worker":
            # the pump stops at the next delivery boundary and the run loop recovers
            self.restart_requested = True
            self.pending_recovery = True

    def crash(self, w: int) -> None:
        if w in self.crashed:
            return
        self.crashed.add(w)
        self.workers[w].alive = False
        self.network.dead.add(w)
        self.network.drop_node(w)
        self.persister.cancel(w)
        self.pending_recovery = True

    # -- main loop -------------------------------------------------------------------

    def _sweep_heartbeats(self) -> None:
        if self.now_ms - self._last_sweep < self.config.heartbeat_interval_ms:
            return
        self._last_sweep = self.now_ms
        for wid in self.workers:
            if wid not in self.crashed:
                self.coordinator.heartbeat(wid, self.now_ms)

    def _pump(self) -> None:
        net = self.network
        while True:
            for ev in self.faults.due_at_step(net.step):
                self._apply_fault(ev)
            self.persister.tick(net.step)
            if self.restart_requested:
                return
            item = net.deliver_one()
            if item is None:
                return
            src, dst, env = item
            self.now_ms += self.step_ms
            if dst == COORD:
                self.coordinator.handle(src, env)
            else:
                self.workers[dst].handle(src, env)
            self._sweep_heartbeats()

    def has_work(self) -> bool:
        return any(w.pending_requests() for w in self.workers.values())

    def run(self, max_epochs: int | None = None) -> Cluster:
        if not self.started:
            self._bootstrap()
        epochs = 0
        while True:
            self._pump()
            if self.pending_recovery:
                self.recover_cluster()
                continue
            if self.coordinator.epoch_open:
                raise StyxError("epoch stalled without a detected failure")
            if not self.has_work() or (max_epochs is not None and epochs >= max_epochs):
                break
            self.now_ms = max(self.now_ms, self.next_epoch * self.config.epoch_interval_ms)
            self.coordinator.start_epoch(self.next_epoch)
            self.next_epoch += 1
            epochs += 1
        self._pump()
        self.persister.flush()
        return self

    # -- recovery -------------------------------------------------------------------

    def recover_cluster(self) -> int:
        """Global rollback to the newest snapshot every worker completed."""
        detect_from = self.now_ms
        unreachable = set(self.crashed) | set(self.network.broken)
        # silence from unreachable workers is noticed once the heartbeat timeout elapses
        self.now_ms += self.config.heartbeat_timeout_ms + self.config.heartbeat_interval_ms
        for wid in self.workers:
            if wid not in unreachable:
                self.coordinator.heartbeat(wid, self.now_ms)
        dead = self.coordinator.detect_failure(self.now_ms)
        suspects = sorted(set(dead) | unreachable)
        self.network.reset()
        self.network.dead.clear()
        self.network.broken.clear()
        self.persister.cancel()
        latest = [self.store.latest_complete(w) for w in self.workers]
        if any(x is None for x in latest):
            raise RecoveryError("snapshot store has no complete snapshot for some worker")
        chosen = min(latest)
        epoch_count = None
        new_workers = {}
        for wid in sorted(self.workers):
            self.store.discard_after(wid, chosen)
            rs = recover(self.store, wid, chosen, self.output_log, wid - 1)
            if self.file_logs:
                self.epoch_logs[wid] = self._open_epoch_log(wid)
            elog = self.epoch_logs[wid]
            sid, lc = rs.seq_counters
            self.coordinator.register_worker(f"inproc://worker/{wid}", worker_id=wid)
            pending = []
            for tid, part, off in rs.pending:
                rec = codec.decode(self.input_log.get(part, off))
                root = FunctionInvocation(NamespacedKey(rec["op"], str(rec["key"])), rec["fn"],
                                          tuple(rec["params"]))
                pending.append(Transaction(tid, rec["request_id"], root, TxnStatus.RESCHEDULED,
                                           source=(part, off), arrival_ms=rec["arrival_ms"]))
            w = Worker(wid, self, sid, WorkerState(self._owner(wid), rs.state), elog,
                       cursor=rs.input_offsets.get(wid - 1, 0), lc=lc, epoch_count=rs.epoch_count,
                       duplicates=rs.duplicates, resched=pending)
            w.sequencer.replay_sizes = elog.since(rs.epoch_count)
            new_workers[wid] = w
            epoch_count = rs.epoch_count
        self.workers = new_workers
        self.crashed.clear()
        self.pending_recovery = False
        self.restart_requested = False
        self.coordinator.reset_after_recovery(epoch_count, chosen)
        self.now_ms += self.config.heartbeat_interval_ms
        for wid in self.workers:
            self.coordinator.heartbeat(wid, self.now_ms)
        self._last_sweep = self.now_ms
        # outcomes after the cut are recomputed by the replay
        self.outcomes = {t: o for t, o in self.outcomes.items() if o.epoch < epoch_count}
        self.sequence_log = [e for e in self.sequence_log if e[0] < epoch_count]
        self.next_epoch = epoch_count
        info = {"snapshot_id": chosen, "epoch": epoch_count, "suspects": suspects,
                "downtime_ms": self.now_ms - detect_from, "step": self.network.step,
                "duplicates": sum(len(w.duplicates) for w in self.workers.values())}
        self.recoveries.append(info)
        self.record_event("recovery", **info)
        return chosen

    # -- results -------------------------------------------------------------------

    def final_state(self) -> dict[NamespacedKey, bytes]:
        out = {}
        for w in self.workers.values():
            out.update(w.store.committed)
        return out

    def decoded_state(self) -> dict[NamespacedKey, Any]:
        return {k: codec.decode(v) for k, v in self.final_state().items()}

    def output_records(self) -> list[dict]:
        out = []
        for p in range(self.output_log.n_partitions):
            out.extend(codec.decode(raw) for _, raw in self.output_log.read_from(p, 0))
        return out

    def commit_order(self) -> list[Outcome]:
        """Committed transactions in serial-equivalent order: epoch, then phase, then TID."""
        committed = [o for o in self.outcomes.values() if o.status is TxnStatus.COMMITTED]
        return sorted(committed, key=lambda o: (o.epoch, o.phase, o.tid))

    def epoch_boundaries(self) -> dict[int, list[tuple[int, int, tuple]]]:
        by_epoch = defaultdict(list)
        for epoch, wid, pairs in self.sequence_log:
            by_epoch[epoch].append((wid, pairs))
        return by_epoch

    def close(self) -> None:
        tmp = getattr(self, "_tmp", None)
        if tmp is not None:
            tmp.cleanup()
