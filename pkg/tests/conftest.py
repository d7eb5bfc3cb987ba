import itertools

import pytest

from styx_mini.cluster import Cluster
from styx_mini.core import ClusterConfig
from styx_mini.runtime import Operator, partition_of


def key_on(op: Operator, n_workers: int, worker: int, prefix: str = "k", skip: int = 0) -> str:
    """First key named ``<prefix><i>`` that routes to ``worker``."""
    found = 0
    for i in itertools.count():
        key = f"{prefix}{i}"
        if partition_of(key, op.n_partitions) % n_workers + 1 == worker:
            if found == skip:
                return key
            found += 1


def counter_operator(name: str = "ctr", n_partitions: int = 8) -> Operator:
    """``bump`` increments its entity and forwards to ``(key, children)`` subtrees asynchronously."""
    op = Operator(name, n_partitions)

    @op.register
    def bump(ctx, *children):
        v = ctx.get(0)
        ctx.put(v + 1)
        for key, grand in children:
            ctx.call_async(op, "bump", key, grand)
        return v + 1

    @op.register
    def bump_fwd_value(ctx, *children):
        # forwards its own (state-dependent) value to the children
        v = ctx.get(0)
        ctx.put(v + 1)
        for key, grand in children:
            ctx.call_async(op, "bump_with", key, (v,) + tuple(grand))
        return v + 1

    @op.register
    def bump_with(ctx, seen, *children):
        v = ctx.get(0)
        ctx.put(v + 1)
        for key, grand in children:
            ctx.call_async(op, "bump", key, grand)
        return seen

    @op.register
    async def tree(ctx, children):
        # children: (sync?, key, grandchildren)
        v = ctx.get(0)
        ctx.put(v + 1)
        for sync, key, grand in children:
            if sync:
                await ctx.call_sync(op, "tree", key, (grand,))
            else:
                ctx.call_async(op, "tree", key, (grand,))
        return v + 1

    @op.register
    def echo(ctx, value):
        return value

    @op.register
    def read(ctx):
        return ctx.get(0)

    return op


@pytest.fixture
def make_cluster(tmp_path):
    made = []

    def _make(operators, n_workers=2, seed=0, **kw):
        cfg_keys = {k: kw.pop(k) for k in list(kw) if k in ClusterConfig.__dataclass_fields__}
        cfg = ClusterConfig(n_workers=n_workers, rng_seed=seed, **cfg_keys)
        c = Cluster(operators, cfg, root=tmp_path / f"c{len(made)}", **kw)
        made.append(c)
        return c

    yield _make


def tree_counts(children, root_key, counts=None):
    """Expected increments per key for a ``tree`` invocation."""
    counts = {} if counts is None else counts
    counts[root_key] = counts.get(root_key, 0) + 1
    for _, key, grand in children:
        tree_counts(grand, key, counts)
    return counts


def record_acks(monkeypatch):
    """Capture every ack-share value a root collects, per TID."""
    from styx_mini import worker as worker_mod
    seen = {}
    orig = worker_mod.Worker._on_ack

    def spy(self, m):
        seen.setdefault(m["tid"], []).append(worker_mod._share_in(m["share"]))
        return orig(self, m)

    monkeypatch.setattr(worker_mod.Worker, "_on_ack", spy)
    return seen


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        verdict, title, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {title}  {detail}")
