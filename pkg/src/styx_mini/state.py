"""Per-worker committed state with delta-map change tracking."""

from __future__ import annotations

from typing import Callable, Iterable

from .core import NamespacedKey, StyxError


class WrongPartitionError(StyxError):
    pass


class _Tombstone:
    __slots__ = ()

    def __repr__(self) -> str:
        return "TOMBSTONE"

    def __reduce__(self):
        return "TOMBSTONE"


TOMBSTONE = _Tombstone()

DeltaMap = dict  # NamespacedKey -> bytes | TOMBSTONE


class WorkerState:
    """Committed entity state of one worker plus the live delta since the last seal.

    ``owns`` is the routing predicate; reads of foreign keys indicate a routing
    bug and raise :class:`WrongPartitionError`.
    """

    def __init__(self, owns: Callable[[NamespacedKey], bool] | None = None,
                 committed: dict | None = None, next_delta_id: int = 1):
        self._owns = owns
        self.committed: dict[NamespacedKey, bytes] = dict(committed or {})
        self.current_delta: DeltaMap = {}
        self.sealed_deltas: list[tuple[int, DeltaMap]] = []
        self.next_delta_id = next_delta_id

    def _check(self, key: NamespacedKey) -> None:
        if self._owns is not None and not self._owns(key):
            raise WrongPartitionError(f"{key} is not owned by this worker")

    def get(self, key: NamespacedKey) -> bytes | None:
        self._check(key)
        return self.committed.get(key)

    def apply_write_buffer(self, buffer: dict) -> None:
        for key, value in buffer.items():
            if value is TOMBSTONE:
                self.committed.pop(key, None)
            else:
                self.committed[key] = value
            self.current_delta[key] = value

    def seal_delta(self) -> tuple[int, DeltaMap]:
        sealed, self.current_delta = self.current_delta, {}
        delta_id = self.next_delta_id
        self.next_delta_id += 1
        self.sealed_deltas.append((delta_id, sealed))
        return delta_id, dict(sealed)

    def release_sealed(self, up_to: int) -> None:
        """Forget sealed deltas whose snapshot is durable."""
        self.sealed_deltas = [(i, d) for i, d in self.sealed_deltas if i > up_to]


def fold_deltas(base: dict, deltas: Iterable[DeltaMap]) -> dict:
    out = dict(base)
    for delta in deltas:
        for key, value in delta.items():
            if value is TOMBSTONE:
                out.pop(key, None)
            else:
                out[key] = value
    return out
