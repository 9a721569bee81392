"""Per-transaction cost accounting and the depth, width and granularity
sweeps.

Critical-path counters come from the ``(hops, syncs)`` tags the simulator
threads through every event, so they measure the longest causal chain to
the user response or to a participant's lock release, not totals.
"""
from __future__ import annotations

import csv
import enum
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

from .log_engine import AppendMode
from .sim import SimConfig, Topology, TxnSpec, World
from .state_machine import Mode, ProtocolVariant
from .types import LogKind, UserOutcome


class Granularity(enum.Enum):
    LOG_STREAM = "LOG_STREAM"
    # Every partition is its own participant, as in a partition-level 2PC.
    PARTITION = "PARTITION"


@dataclass
class CostCounters:
    msgs_by_kind: dict = field(default_factory=dict)
    sync_logs: int = 0
    async_logs: int = 0
    participant_sync_logs: int = 0
    coordinator_sync_logs: int = 0
    transfer_logs: int = 0
    response_roundtrips: int = 0
    response_log_syncs: int = 0
    lock_release_roundtrips: int = 0
    lock_release_log_syncs: int = 0
    latency_ticks: int = 0

    @property
    def msgs_total(self) -> int:
        return sum(self.msgs_by_kind.values())

    @property
    def prepare_msgs(self) -> int:
        return self.msgs_by_kind.get("PrepareReq", 0) + self.msgs_by_kind.get("PrepareResp", 0)


@dataclass(frozen=True)
class TreeShape:
    H: int  # height of the final merged tree
    N: float  # edges per internal node
    participants: int
    edges: int


@dataclass
class Summary:
    txn: int
    outcome: Optional[UserOutcome]
    counters: CostCounters
    shape: TreeShape


def tree_shape(root: int, children: dict[int, set]) -> TreeShape:
    """Shape of a tree given as ``node -> children``; cycles are cut at the
    first revisit."""
    depth = {root: 0}
    order = [root]
    for node in order:
        for c in sorted(children.get(node, ())):
            if c not in depth:
                depth[c] = depth[node] + 1
                order.append(c)
    edges = sum(1 for n in order for c in children.get(n, ()) if depth.get(c) == depth[n] + 1)
    internal = sum(1 for n in order if any(depth.get(c) == depth[n] + 1 for c in children.get(n, ())))
    return TreeShape(
        H=max(depth.values()),
        N=edges / internal if internal else 0.0,
        participants=len(order) - 1,
        edges=edges,
    )


def summarize(world: World, txn: int) -> Summary:
    rec = world.txns[txn]
    c = CostCounters(msgs_by_kind={k.name: n for k, n in sorted(rec.msgs.items())})
    for (kind, is_root, mode), n in rec.logs.items():
        if mode == AppendMode.SYNC:
            c.sync_logs += n
            if is_root:
                c.coordinator_sync_logs += n
            else:
                c.participant_sync_logs += n
        else:
            c.async_logs += n
    c.transfer_logs = sum(
        1
        for s in world.streams.values()
        for e in s.entries
        if e.kind in (LogKind.TransferOutLog, LogKind.TransferInLog) and txn in e.txns
    )
    outs = world.outcomes.get(txn)
    if outs:
        first = outs[0]
        c.response_roundtrips, c.response_log_syncs = first.tag
        c.latency_ticks = first.latency
    releases = [tag for sid, (_, tag) in rec.lock_release.items() if sid != rec.root]
    if releases:
        c.lock_release_roundtrips, c.lock_release_log_syncs = max(releases)
    shape = tree_shape(rec.root, rec.children_seen)
    return Summary(txn, world.final_outcome(txn), c, shape)


def residuals(summary: Summary, variant: ProtocolVariant) -> dict[str, float]:
    """Differences from the closed-form costs of a committed uniform tree.

    Five messages per edge are expected only when Release is sent; without
    it the commit costs four. Locks wait for the participant's prepare and
    commit logs, plus the coordinator's commit log when one is written and
    no Release overtakes it; with Release only the prepare log remains.
    """
    c, s = summary.counters, summary.shape
    per_edge = 5 if variant.release_messages else 4
    if variant.release_messages:
        lock_syncs = 1
    else:
        lock_syncs = 3 if variant.coordinator_commit_log else 2
    return {
        "response_rt": c.response_roundtrips - 2 * s.H,
        "response_syncs": c.response_log_syncs - 1,
        "lock_rt": c.lock_release_roundtrips - 3 * s.H,
        "lock_syncs": c.lock_release_log_syncs - lock_syncs,
        "msgs_total": c.msgs_total - per_edge * s.N * s.H,
        "participant_sync_logs": c.participant_sync_logs - 2 * s.N * s.H,
    }


# workloads


def uniform_tree(H: int, N: int) -> dict[int, tuple[int, ...]]:
    """A spine of ``H`` levels under stream 0 where every spine node has
    ``N`` children and the first child continues the spine. This gives
    exactly ``N*H`` edges, ``H`` internal nodes and height ``H``."""
    if H < 1 or N < 1:
        raise ValueError("H and N must be at least 1")
    tree: dict[int, tuple[int, ...]] = {}
    nxt = 1
    spine = 0
    for _ in range(H):
        kids = tuple(range(nxt, nxt + N))
        nxt += N
        tree[spine] = kids
        spine = kids[0]
    return tree


def split_by_partition(tree: dict[int, tuple[int, ...]], k: int) -> dict[int, tuple[int, ...]]:
    """Replace each participant with ``k`` single-partition participants
    under the same parent; the first replica keeps the original children."""
    if k == 1:
        return {n: tuple(kids) for n, kids in tree.items()}
    replica = {}
    nxt = 1
    for n in sorted({c for kids in tree.values() for c in kids}):
        replica[n] = tuple(range(nxt, nxt + k))
        nxt += k
    out: dict[int, tuple[int, ...]] = {}
    for n, kids in tree.items():
        owner = 0 if n == 0 else replica[n][0]
        out[owner] = tuple(r for c in kids for r in replica[c])
    return out


def build_tree_world(
    tree: dict[int, tuple[int, ...]],
    variant: ProtocolVariant,
    mode: Mode = Mode.LOGGED,
    msg_delay: int = 1,
    log_sync_delay: int = 1,
    partitions_per_stream: int = 1,
    seed: int = 0,
) -> World:
    """One transaction over an explicit tree rooted at coordinator 0; each
    participant stream hosts ``partitions_per_stream`` partitions."""
    streams = sorted({c for kids in tree.values() for c in kids})
    homes = {}
    for s in streams:
        for j in range(partitions_per_stream):
            homes[s * partitions_per_stream + j] = s
    cfg = SimConfig(
        msg_delay=msg_delay, log_sync_delay=log_sync_delay, seed=seed, variant=variant, mode=mode
    )
    spec = TxnSpec(1, tuple(sorted(homes)), start=0, commit_at=1, tree=tree, one_phase=False)
    return World(cfg, Topology(0, tuple(streams), homes), [spec], name="sweep")


CSV_COLUMNS = (
    "variant",
    "mode",
    "H",
    "N",
    "transfers",
    "response_rt",
    "response_syncs",
    "lock_rt",
    "msgs_total",
    "sync_logs",
    "async_logs",
    "latency_ticks",
    "granularity",
    "partitions",
    "participants",
    "prepare_msgs",
    "participant_sync_logs",
    "coordinator_sync_logs",
    "lock_syncs",
    "outcome",
)


def row(summary: Summary, variant: ProtocolVariant, mode: Mode, granularity: Granularity, partitions: int) -> dict:
    c, s = summary.counters, summary.shape
    return {
        "variant": variant.name,
        "mode": mode.value,
        "H": s.H,
        "N": int(s.N) if float(s.N).is_integer() else round(s.N, 3),
        "transfers": c.transfer_logs // 2,
        "response_rt": c.response_roundtrips,
        "response_syncs": c.response_log_syncs,
        "lock_rt": c.lock_release_roundtrips,
        "msgs_total": c.msgs_total,
        "sync_logs": c.sync_logs,
        "async_logs": c.async_logs,
        "latency_ticks": c.latency_ticks,
        "granularity": granularity.value,
        "partitions": partitions,
        "participants": s.participants,
        "prepare_msgs": c.prepare_msgs,
        "participant_sync_logs": c.participant_sync_logs,
        "coordinator_sync_logs": c.coordinator_sync_logs,
        "lock_syncs": c.lock_release_log_syncs,
        "outcome": summary.outcome.name if summary.outcome is not None else "",
    }


def run_shape(
    H: int,
    N: int,
    variant: ProtocolVariant,
    mode: Mode = Mode.LOGGED,
    granularity: Granularity = Granularity.LOG_STREAM,
    partitions_per_stream: int = 1,
    msg_delay: int = 1,
    log_sync_delay: int = 1,
) -> tuple[World, Summary]:
    tree = uniform_tree(H, N)
    pps = partitions_per_stream
    if granularity == Granularity.PARTITION:
        tree, pps = split_by_partition(tree, partitions_per_stream), 1
    world = build_tree_world(tree, variant, mode, msg_delay, log_sync_delay, pps).run()
    return world, summarize(world, 1)


def sweep(
    heights: Iterable[int],
    fanouts: Iterable[int],
    granularity: Granularity = Granularity.LOG_STREAM,
    variant: Optional[ProtocolVariant] = None,
    mode: Mode = Mode.LOGGED,
    partitions_per_stream: int = 1,
    msg_delay: int = 1,
    log_sync_delay: int = 1,
) -> list[dict]:
    variant = variant or ProtocolVariant.parse("release")
    rows = []
    for H in heights:
        for N in fanouts:
            _, summary = run_shape(
                H, N, variant, mode, granularity, partitions_per_stream, msg_delay, log_sync_delay
            )
            rows.append(row(summary, variant, mode, granularity, partitions_per_stream * N * H))
    return rows


def granularity_sweep(
    partitions: Iterable[int], variant: Optional[ProtocolVariant] = None, mode: Mode = Mode.LOGGED
) -> list[dict]:
    """All partitions on one log stream, committed once per granularity."""
    rows = []
    for p in partitions:
        for g in Granularity:
            rows += sweep([1], [1], g, variant, mode, partitions_per_stream=p)
    return rows


def prepare_reduction(rows: list[dict], partitions: int) -> float:
    """Fraction of prepare-phase messages saved by log-stream granularity."""
    by = defaultdict(int)
    for r in rows:
        if r["partitions"] == partitions:
            by[r["granularity"]] = r["prepare_msgs"]
    return 1 - by[Granularity.LOG_STREAM.value] / by[Granularity.PARTITION.value]


def write_csv(rows: list[dict], out: Optional[TextIO] = None) -> str:
    buf = out if out is not None else io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue() if out is None else ""
