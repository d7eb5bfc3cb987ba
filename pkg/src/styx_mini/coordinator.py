"""Cluster membership, epoch barriers, failure detection and snapshot bookkeeping."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from . import codec
from .commit import EpochPlan
from .core import ClusterConfig, StyxError
from .transport import Envelope, MsgType

if TYPE_CHECKING:
    from .transport import Network

COORD = 0


class ClusterFullError(StyxError):
    pass


class WorkerStatus(str, enum.Enum):
    HEALTHY = "healthy"
    SUSPECT = "suspect"
    DEAD = "dead"


@dataclass
class WorkerInfo:
    address: str
    sid: int
    status: WorkerStatus = WorkerStatus.HEALTHY
    last_heartbeat: float = 0.0


@dataclass
class ClusterView:
    workers: dict[int, WorkerInfo] = field(default_factory=dict)
    current_epoch: int = 0
    partitions: dict[int, list[int]] = field(default_factory=dict)

    def sids(self) -> list[int]:
        return sorted(w.sid for w in self.workers.values())


# phase reported by workers -> (broadcast kind, fault point fired once all reported)
PHASES = {
    "ROOTS_DONE": ("ABORTS_GLOBAL", "roots_done"),
    "DISCOVERY_DONE": ("CONFLICTS_GLOBAL", "conflicts_resolved"),
    "P3_DONE": ("P4_START", "p3_done"),
    "P4_DONE": ("EPOCH_END", "p4_done"),
}


def aggregate(phase: str, payloads: dict[int, dict]) -> dict:
    """Combine per-worker barrier payloads into the broadcast body."""
    if phase == "ROOTS_DONE":
        return {"aborted": sorted(set().union(*(p["aborted"] for p in payloads.values())))}
    if phase == "DISCOVERY_DONE":
        return {"conflicts": sorted(set().union(*(p["conflicts"] for p in payloads.values())))}
    if phase == "P4_DONE":
        return {"max_lc": max(p["lc"] for p in payloads.values())}
    return {}


def epoch_barrier(epoch: int, phase: str, payloads: dict[int, dict]) -> dict:
    """Broadcast body for ``phase`` of ``epoch`` once every worker has reported."""
    kind, _ = PHASES[phase]
    return dict(aggregate(phase, payloads), kind=kind, epoch=epoch)


class Coordinator:
    def __init__(self, config: ClusterConfig, network: Network | None = None,
                 on_point: Callable[[str], None] | None = None):
        self.config = config
        self.network = network
        self.view = ClusterView()
        self.on_point = on_point
        self._pending: dict[str, dict[int, dict]] = {}
        self.plans: dict[int, EpochPlan] = {}
        self.epoch_open = False
        self.barrier_messages = 0
        self.snapshot_acks: dict[int, set[int]] = {}
        self.global_snapshot: int | None = None

    # -- membership --------------------------------------------------------------

    def register_worker(self, address: str, worker_id: int | None = None):
        """Assign the next sid (registration order); a re-registering worker keeps its sid."""
        if worker_id is not None and worker_id in self.view.workers:
            info = self.view.workers[worker_id]
            info.status = WorkerStatus.HEALTHY
            info.address = address
            return worker_id, info.sid, self.view.partitions.get(worker_id, [])
        if len(self.view.workers) >= self.config.n_workers:
            raise ClusterFullError(f"cluster already has {self.config.n_workers} workers")
        wid = len(self.view.workers) + 1
        self.view.workers[wid] = WorkerInfo(address, sid=wid)
        # input partitions are aligned 1:1 with workers
        self.view.partitions[wid] = [wid - 1]
        return wid, wid, self.view.partitions[wid]

    def heartbeat(self, worker: int, now_ms: float) -> None:
        info = self.view.workers[worker]
        info.last_heartbeat = now_ms
        if info.status is WorkerStatus.SUSPECT:
            info.status = WorkerStatus.HEALTHY

    def detect_failure(self, now_ms: float) -> list[int]:
        out = []
        for wid, info in sorted(self.view.workers.items()):
            if info.status is not WorkerStatus.DEAD and \
                    now_ms - info.last_heartbeat > self.config.heartbeat_timeout_ms:
                info.status = WorkerStatus.DEAD
                out.append(wid)
        return out

    def missing_from_barrier(self) -> list[int]:
        """Healthy workers that have not reported the phase the coordinator waits on."""
        for phase, got in self._pending.items():
            return sorted(set(self.view.workers) - set(got))
        return []

    # -- epochs and barriers ----------------------------------------------------------

    def _broadcast(self, kind: str, body: dict, epoch: int) -> None:
        body = dict(body, kind=kind, epoch=epoch)
        payload = codec.encode(body)
        for wid in sorted(self.view.workers):
            self.network.send(COORD, wid, Envelope(MsgType.CTRL, epoch, 0, payload))
            self.barrier_messages += 1

    def start_epoch(self, epoch: int) -> None:
        self.view.current_epoch = epoch
        self.plans[epoch] = EpochPlan(epoch)
        self._pending = {}
        self.epoch_open = True
        self.network.label = f"e{epoch}:discovery"
        self.network.reseed(epoch, "start")
        self._broadcast("START_EPOCH", {}, epoch)
        self._point(f"e{epoch}:epoch_start")

    def handle(self, src: int, env: Envelope) -> None:
        msg = codec.decode(env.payload)
        phase, wid, epoch = msg["kind"], msg["worker"], msg["epoch"]
        if epoch != self.view.current_epoch or not self.epoch_open:
            return  # stale report from before a recovery
        self.barrier_messages += 1
        got = self._pending.setdefault(phase, {})
        got[wid] = msg
        plan = self.plans[epoch]
        if phase == "ROOTS_DONE":
            plan.txns.extend(msg["tids"])
        elif phase == "P4_DONE":
            plan.p4_committed.extend(msg["commits"])
            plan.rescheduled.extend(msg["rescheduled"])
        if len(got) < len(self.view.workers):
            return
        del self._pending[phase]
        body = aggregate(phase, got)
        if phase == "ROOTS_DONE":
            plan.txns.sort()
            plan.aborted = set(body["aborted"])
        elif phase == "DISCOVERY_DONE":
            plan.conflict_set = set(body["conflicts"])
            plan.commit_set = set(plan.txns) - plan.conflict_set - plan.aborted
        elif phase == "P4_DONE":
            plan.p4_committed.sort()
            plan.rescheduled.sort()
        kind, point = PHASES[phase]
        if phase == "DISCOVERY_DONE":
            body["aborted"] = sorted(plan.aborted)
        self.network.label = f"e{epoch}:{point}"
        self.network.reseed(epoch, kind)
        if phase == "P4_DONE":
            self.epoch_open = False
        self._broadcast(kind, body, epoch)
        self._point(f"e{epoch}:{point}")

    def _point(self, name: str) -> None:
        if self.on_point is not None:
            self.on_point(name)

    # -- snapshots ---------------------------------------------------------------

    def snapshot_done(self, worker: int, snapshot_id: int) -> bool:
        """Record a durable snapshot; True once every worker has it."""
        acks = self.snapshot_acks.setdefault(snapshot_id, set())
        acks.add(worker)
        if len(acks) == len(self.view.workers):
            if self.global_snapshot is None or snapshot_id > self.global_snapshot:
                self.global_snapshot = snapshot_id
            return True
        return False

    def reset_after_recovery(self, epoch: int, snapshot_id: int) -> None:
        self._pending = {}
        self.epoch_open = False
        self.view.current_epoch = epoch
        self.snapshot_acks = {k: v for k, v in self.snapshot_acks.items() if k <= snapshot_id}
        for info in self.view.workers.values():
            info.status = WorkerStatus.HEALTHY
