"""Deterministic epoch-based transactional runtime for stateful functions."""

from .cluster import Cluster, RecoveryError
from .core import (AckShare, CallMode, ClusterConfig, FunctionInvocation, NamespacedKey,
                   Transaction, TxnStatus, decompose_tid, make_tid, parse_namespaced_key)
from .oracle import (ReferenceInterpreter, Trace, verify_exactly_once,
                     verify_serializable)
from .report import RunReport, run
from .runtime import CallContext, LogicAbort, Operator
from .transport import FaultEvent, FaultInjector
from .workloads import WorkloadSpec, build_workload

__all__ = [
    "AckShare", "CallContext", "CallMode", "Cluster", "ClusterConfig", "FaultEvent",
    "FaultInjector", "FunctionInvocation", "LogicAbort", "NamespacedKey", "Operator",
    "RecoveryError", "ReferenceInterpreter", "RunReport", "Trace", "Transaction", "TxnStatus",
    "WorkloadSpec", "build_workload", "decompose_tid", "make_tid", "parse_namespaced_key", "run",
    "verify_exactly_once", "verify_serializable",
]

__version__ = "0.1.0"
