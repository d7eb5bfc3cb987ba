"""Workload runs, metrics and report output (text, CSV and figures)."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import codec
from .cluster import Cluster
from .core import ClusterConfig, TxnStatus
from .oracle import Trace, verify_exactly_once, verify_serializable
from .transport import FaultInjector
from .workloads import WorkloadSpec, build_workload, total_balance


@dataclass
class RunReport:
    workload: str
    n_txns: int
    committed: int
    logic_aborts: int
    reschedules: int
    phase3_commits: int
    phase4_commits: int
    epochs: int
    recoveries: int
    suppressed_replies: int
    latency_p50_ms: float
    latency_p99_ms: float
    throughput_tps: float
    serializable: bool
    exactly_once: bool
    conserved: bool | None
    detail: dict = field(default_factory=dict)
    latencies: list = field(default_factory=list, repr=False)
    per_epoch: list = field(default_factory=list, repr=False)

    @property
    def lost(self) -> int:
        return self.n_txns - self.committed - self.logic_aborts

    def summary_rows(self) -> list[tuple[str, object]]:
        skip = {"detail", "latencies", "per_epoch"}
        rows = [(k, v) for k, v in asdict(self).items() if k not in skip]
        rows.append(("lost", self.lost))
        return rows

    def to_text(self) -> str:
        rows = self.summary_rows()
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {_fmt(v)}" for k, v in rows]
        for k, v in self.detail.items():
            lines.append(f"{(k + ' detail').ljust(width)}  {v}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> list[Path]:
        """Summary CSV at ``path``; per-transaction and per-epoch CSVs beside it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerows((k, _fmt(v)) for k, v in self.summary_rows())
        txn_path = path.with_name(path.stem + "_txns.csv")
        with open(txn_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tid", "request_id", "status", "epoch", "phase", "latency_ms"])
            w.writerows(self.latencies)
        epoch_path = path.with_name(path.stem + "_epochs.csv")
        with open(epoch_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase3_commits", "phase4_commits", "logic_aborts"])
            w.writerows(self.per_epoch)
        return [path, txn_path, epoch_path]

    def write_figures(self, path: str | Path) -> list[Path]:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        out = []
        lat = sorted(r[5] for r in self.latencies if r[2] == TxnStatus.COMMITTED.value)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if lat:
            ys = [(i + 1) / len(lat) for i in range(len(lat))]
            ax.step(lat, ys, where="post", color="k", lw=1.2)
        ax.set_xlabel("latency (logical ms)")
        ax.set_ylabel("fraction of commits")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = path.with_name(path.stem + "_latency_cdf.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        out.append(p)

        fig, ax = plt.subplots(figsize=(5, 3.2))
        if self.per_epoch:
            ep = [r[0] for r in self.per_epoch]
            p3 = [r[1] for r in self.per_epoch]
            p4 = [r[2] for r in self.per_epoch]
            ab = [r[3] for r in self.per_epoch]
            ax.bar(ep, p3, color="0.35", label="lock-free commit")
            ax.bar(ep, p4, bottom=p3, color="0.7", label="lock-based commit")
            ax.bar(ep, ab, bottom=[a + b for a, b in zip(p3, p4)], color="tab:red", label="logic abort")
            ax.legend(frameon=False, fontsize=8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("transactions")
        fig.tight_layout()
        p = path.with_name(path.stem + "_epochs.png")
        fig.savefig(p, dpi=120)
        plt.close(fig)
        out.append(p)
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _percentile(xs: list[float], q: float) -> float:
    if not xs:
        return 0.0
    xs = sorted(xs)
    # nearest-rank
    return xs[max(0, math.ceil(q / 100 * len(xs)) - 1)]


def summarize(cluster: Cluster, spec: WorkloadSpec, operators, check: bool = True) -> RunReport:
    interval = cluster.config.epoch_interval_ms
    outs = sorted(cluster.outcomes.values(), key=lambda o: o.tid)
    committed = [o for o in outs if o.status is TxnStatus.COMMITTED]
    aborted = [o for o in outs if o.status is TxnStatus.ABORTED_LOGIC]
    rows, lat = [], []
    for o in outs:
        # a reply leaves once its epoch closes
        ms = (o.epoch + 1) * interval - o.arrival_ms
        rows.append((o.tid, o.request_id, o.status.value, o.epoch, o.phase, ms))
        if o.status is TxnStatus.COMMITTED:
            lat.append(ms)
    per_epoch = {}
    for o in outs:
        row = per_epoch.setdefault(o.epoch, [o.epoch, 0, 0, 0])
        if o.status is TxnStatus.ABORTED_LOGIC:
            row[3] += 1
        else:
            row[1 if o.phase == 3 else 2] += 1
    span_ms = max(cluster.next_epoch, 1) * interval
    serial = exactly = True
    conserved = None
    detail = {}
    if check:
        trace = Trace.from_cluster(cluster)
        v = verify_serializable(trace, operators)
        serial = v.ok
        detail["serializable"] = v.detail
        conserved_op = "account" if spec.kind == "ycsbt" else None
        e = verify_exactly_once(cluster.output_records(), cluster.inputs,
                                cluster.initial_state, cluster.final_state(), conserved_op)
        exactly = e.ok
        detail["exactly_once"] = e.detail
        if conserved_op:
            before = total_balance({k: codec.decode(v) for k, v in cluster.initial_state.items()})
            conserved = before == total_balance(cluster.decoded_state())
    return RunReport(
        workload=spec.kind, n_txns=spec.n_txns, committed=len(committed), logic_aborts=len(aborted),
        reschedules=cluster.reschedule_count,
        phase3_commits=sum(1 for o in committed if o.phase == 3),
        phase4_commits=sum(1 for o in committed if o.phase == 4),
        epochs=cluster.next_epoch, recoveries=len(cluster.recoveries),
        suppressed_replies=cluster.suppressed_total,
        latency_p50_ms=statistics.median(lat) if lat else 0.0,
        latency_p99_ms=_percentile(lat, 99), throughput_tps=len(committed) / (span_ms / 1000.0),
        serializable=serial, exactly_once=exactly, conserved=conserved, detail=detail,
        latencies=rows, per_epoch=[per_epoch[k] for k in sorted(per_epoch)])


def run(spec: WorkloadSpec, config: ClusterConfig, faults: FaultInjector | list | None = None,
        root: str | Path | None = None, check: bool = True, trace_path: str | Path | None = None
        ) -> tuple[RunReport, Cluster]:
    """Build the workload, drive the cluster to completion and summarize it."""
    wl = build_workload(spec)
    cluster = Cluster(wl.operators, config, root=root, faults=faults)
    wl.submit_to(cluster)
    cluster.run()
    if trace_path is not None:
        Path(trace_path).write_text(Trace.from_cluster(cluster).to_json())
    return summarize(cluster, spec, wl.operators, check=check), cluster
