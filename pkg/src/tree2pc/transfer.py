"""Partition transfer running concurrently with 2PC.

A transfer is three simulator steps:

1. ``begin_transfer``: take the stream lock, block logging for every
   affected transaction and append the transfer-out log (its ts is the
   transfer's timestamp).
2. ``on_transfer_out_persisted``: snapshot the affected contexts and append
   the transfer-in log carrying them on the destination.
3. ``on_transfer_in_persisted``: install the migrated contexts, move the
   partition's home, add the destination to each affected transaction's
   pending participants when the timestamp guard allows, unblock and unlock.

2PC logs go through ``commit_2pc_logs_under_lock``, which needs the same
stream lock, so the two critical sections never interleave.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .log_engine import AppendMode, LogStream
from .state_machine import LogIntent, TxnContext
from .types import LogKind, MigratedContext, ReplicatedLogEntry, TwoPCState, VoteStatus


class TransferError(ValueError):
    pass


@dataclass
class TransferEvent:
    partition: int
    src: int
    dst: int
    ts: Optional[int] = None

    def __post_init__(self):
        if self.src == self.dst:
            raise TransferError(f"transfer of partition {self.partition} to its own stream")


@dataclass(frozen=True)
class PartitionRecordCap:
    max_recorded_partitions: int

    def __post_init__(self):
        if self.max_recorded_partitions < 1:
            raise ValueError("partition cap must be positive")

    def record(self, ctx: TxnContext, partitions: Iterable[int]) -> None:
        """Add touched partitions; past the cap the context stops tracking
        them and is treated as touching every partition of its stream."""
        if ctx.partitions is None:
            return
        ctx.partitions |= set(partitions)
        if len(ctx.partitions) > self.max_recorded_partitions:
            ctx.partitions = None


def record_partitions(ctx: TxnContext, partitions: Iterable[int], cap: Optional[PartitionRecordCap]):
    if cap is not None:
        cap.record(ctx, partitions)
    elif ctx.partitions is not None:
        ctx.partitions |= set(partitions)


def should_add_participant(ts: int, last_2pc_log_ts: int) -> bool:
    """The transfer adds its destination only if no 2PC log of the
    transaction committed after it."""
    return ts > last_2pc_log_ts


def affected_txns(stream: LogStream, partition: int) -> list[int]:
    return sorted(
        txn
        for txn, ctx in stream.contexts.items()
        if ctx.partitions is None or partition in ctx.partitions
    )


@dataclass
class TransferRun:
    id: int
    event: TransferEvent
    status: str = "waiting"  # waiting, out, in, done, rolled_back
    txns: tuple[int, ...] = ()
    out_entry: Optional[ReplicatedLogEntry] = None
    in_entry: Optional[ReplicatedLogEntry] = None

    @property
    def owner(self) -> str:
        return f"transfer{self.id}"


def begin_transfer(world, run: TransferRun) -> bool:
    """Step 1. Returns False if the stream lock is busy."""
    ev = run.event
    src: LogStream = world.streams[ev.src]
    if ev.partition not in src.hosted_partitions:
        raise TransferError(f"stream {ev.src} does not host partition {ev.partition}")
    if not src.lock.acquire(run.owner):
        return False
    world.record_lock(ev.src, "acquire", run.owner)
    run.txns = tuple(affected_txns(src, ev.partition))
    for txn in run.txns:
        src.lock.acquire_txn(txn, run.owner)
        src.contexts[txn].blocked_from_logging = True
        src.lock.release_txn(txn, run.owner)
    entry = ReplicatedLogEntry(
        LogKind.TransferOutLog,
        ev.src,
        -1,
        world.next_ts(),
        partition=ev.partition,
        peer=ev.dst,
        txns=run.txns,
    )
    ev.ts = entry.ts
    run.status = "out"
    world.submit_log(ev.src, entry, AppendMode.SYNC, ("transfer_out", run.id))
    return True


def migrated_context(stream: LogStream, ctx: TxnContext, upto_seq: int) -> MigratedContext:
    refs = tuple(
        (stream.id, e.seq)
        for e in stream.entries
        if e.is_2pc and e.txn == ctx.txn and e.seq < upto_seq
    )
    parts = () if ctx.partitions is None else tuple(sorted(ctx.partitions))
    return MigratedContext(ctx.txn, ctx.state, refs, parts)


def on_transfer_out_persisted(world, run: TransferRun, entry: ReplicatedLogEntry) -> None:
    """Step 2."""
    ev = run.event
    src: LogStream = world.streams[ev.src]
    run.out_entry = entry
    migrated = []
    for txn in run.txns:
        ctx = src.contexts.get(txn)
        if ctx is not None:
            m = migrated_context(src, ctx, entry.seq)
            # The destination only ever holds the moved partition.
            migrated.append(MigratedContext(m.txn, m.state, m.log_refs, (ev.partition,)))
    in_entry = ReplicatedLogEntry(
        LogKind.TransferInLog,
        ev.dst,
        -1,
        entry.ts,
        partition=ev.partition,
        peer=ev.src,
        txns=tuple(m.txn for m in migrated),
        migrated=tuple(migrated),
    )
    run.status = "in"
    world.submit_log(ev.dst, in_entry, AppendMode.SYNC, ("transfer_in", run.id))


def install_migrated(world, dst: LogStream, m: MigratedContext, src_id: int) -> Optional[TxnContext]:
    """Create or merge the destination-side context.

    A context that already decided travels as settled data: the partition
    keeps its outcome and no new participant appears.
    """
    ctx = dst.contexts.get(m.txn)
    if ctx is not None:
        if ctx.partitions is not None:
            ctx.partitions |= set(m.partitions)
        return ctx
    if m.state not in (TwoPCState.RUNNING, TwoPCState.PREPARE):
        world.settled.setdefault(m.txn, {})[dst.id] = m.state
        return None
    ctx = TxnContext(m.txn, dst.id, partitions=set(m.partitions))
    dst.contexts[m.txn] = ctx
    world.on_context_created(dst.id, ctx, f"migrated from {src_id}")
    return ctx


def on_transfer_in_persisted(world, run: TransferRun, entry: ReplicatedLogEntry) -> None:
    """Step 3."""
    ev = run.event
    src: LogStream = world.streams[ev.src]
    dst: LogStream = world.streams[ev.dst]
    run.in_entry = entry
    installed = {}
    for m in entry.migrated:
        installed[m.txn] = install_migrated(world, dst, m, ev.src)
    src.hosted_partitions.discard(ev.partition)
    dst.hosted_partitions.add(ev.partition)
    world.home[ev.partition] = ev.dst
    for txn in run.txns:
        ctx = src.contexts.get(txn)
        if ctx is None:
            # The source lost the transaction in a crash, so it can only
            # abort; nobody would ever reach the moved context otherwise.
            moved = installed.get(txn)
            if moved is not None and moved.state == TwoPCState.RUNNING:
                world.apply_internal(ev.dst, moved, "internal_abort")
            continue
        src.lock.acquire_txn(txn, run.owner)
        if should_add_participant(ev.ts, ctx.last_2pc_log_ts) and world.machine.can_add(ctx, ev.dst):
            world.apply_internal(ev.src, ctx, "add_intermediate_participant", ev.dst)
        if ctx.partitions is not None:
            ctx.partitions.discard(ev.partition)
        ctx.blocked_from_logging = False
        src.lock.release_txn(txn, run.owner)
    if src.lock.holder == run.owner:
        src.lock.release(run.owner)
        world.record_lock(ev.src, "release", run.owner)
    run.status = "done"
    world.transfer_completed(run)
    flush_deferred(world, src)


def rollback_transfer(world, run: TransferRun) -> None:
    """The source crashed before its transfer-out log persisted."""
    run.status = "rolled_back"
    world.record_lock(run.event.src, "rollback", run.owner)


def commit_2pc_logs_under_lock(world, stream: LogStream, ctx: TxnContext, intent: LogIntent, tag=None):
    """Merge pending participants and append the 2PC log, or defer it if a
    transfer holds the lock or has blocked the transaction."""
    if ctx.blocked_from_logging or stream.lock.holder is not None:
        stream.deferred.append((ctx.txn, intent, tag))
        return None
    owner = f"merge:{ctx.txn}"
    stream.lock.acquire(owner)
    world.record_lock(stream.id, "acquire", owner)
    stream.lock.acquire_txn(ctx.txn, owner)
    new = ctx.merge_interm()
    status = None
    if intent.kind == LogKind.PrepareLog:
        status = VoteStatus.OK if ctx.own_status == VoteStatus.OK else VoteStatus.NO
    entry = ReplicatedLogEntry(
        intent.kind,
        stream.id,
        -1,
        world.next_ts(),
        txn=ctx.txn,
        participants=tuple(sorted(ctx.children - ctx.incr_children)),
        incr_parts=tuple(sorted(ctx.incr_children)),
        parent=ctx.parent,
        status=status,
        partitions=() if ctx.partitions is None else tuple(sorted(ctx.partitions)),
    )
    world.submit_log(
        stream.id,
        entry,
        AppendMode.SYNC if intent.sync else AppendMode.ASYNC,
        ("2pc", ctx.txn),
        tag=tag,
    )
    if new:
        world.apply_catch_up(stream.id, ctx, new, intent.kind)
    stream.lock.release_txn(ctx.txn, owner)
    stream.lock.release(owner)
    world.record_lock(stream.id, "release", owner)
    return entry


def flush_deferred(world, stream: LogStream) -> None:
    pending, stream.deferred = stream.deferred, []
    for txn, intent, tag in pending:
        ctx = stream.contexts.get(txn)
        if ctx is None:
            continue
        commit_2pc_logs_under_lock(world, stream, ctx, intent, tag)


# log stream tree and runtime predicates


@dataclass
class LogStreamTree:
    root: int
    edges: dict[int, set[int]] = field(default_factory=dict)

    def nodes(self) -> set[int]:
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            n = queue.popleft()
            for c in sorted(self.edges.get(n, ())):
                if c not in seen:
                    seen.add(c)
                    queue.append(c)
        return seen

    def describe(self) -> str:
        parts = [
            f"{n}->{','.join(str(c) for c in sorted(self.edges[n]))}"
            for n in sorted(self.edges)
            if self.edges[n]
        ]
        return " ".join(parts) or f"{self.root}"


def build_log_stream_tree(
    root: int,
    initial: Iterable[int],
    records: Mapping[int, Iterable[int]],
) -> LogStreamTree:
    """``records[s]`` holds the transfer destinations stream ``s`` recorded
    for the transaction. Cycles are fine: each stream is visited once."""
    tree = LogStreamTree(root, {root: set(initial)})
    seen = {root}
    queue = deque(sorted(tree.edges[root]))
    while queue:
        s = queue.popleft()
        if s in seen:
            continue
        seen.add(s)
        kids = {d for d in records.get(s, ()) if d != s}
        if kids:
            tree.edges.setdefault(s, set()).update(kids)
        queue.extend(sorted(kids - seen))
    return tree


@dataclass(frozen=True)
class Verdict:
    ok: bool
    detail: str = ""
    offending: Optional[ReplicatedLogEntry] = None

    def __bool__(self):
        return self.ok


def check_minimum_set(required: Iterable[int], tree: LogStreamTree) -> Verdict:
    """Every final home of a partition the transaction touched is in the tree."""
    missing = sorted(set(required) - tree.nodes())
    if missing:
        return Verdict(False, f"missing streams {missing}")
    return Verdict(True)


def _transfer_in_for(streams: Mapping[int, list], out: ReplicatedLogEntry):
    for e in streams.get(out.peer, ()):
        if (
            e.kind == LogKind.TransferInLog
            and e.partition == out.partition
            and e.peer == out.stream
            and e.ts == out.ts
        ):
            return e
    return None


def check_transfer_principle(streams: Mapping[int, list]) -> Verdict:
    """Over persisted logs: (a) each 2PC log of an affected transaction that
    persisted before a transfer-out log travels in its migrated context
    set; (b) each one persisted after names the destination."""
    for sid in sorted(streams):
        entries = streams[sid]
        for out in entries:
            if out.kind != LogKind.TransferOutLog:
                continue
            tin = _transfer_in_for(streams, out)
            if tin is None:
                return Verdict(False, f"transfer-out without transfer-in on {out.peer}", out)
            for txn in out.txns:
                refs = {r for m in tin.migrated if m.txn == txn for r in m.log_refs}
                for log in entries:
                    if not log.is_2pc or log.txn != txn:
                        continue
                    if log.seq < out.seq and (sid, log.seq) not in refs:
                        return Verdict(
                            False, f"2PC log {sid}@{log.seq} missing from migrated contexts", log
                        )
                    if log.seq > out.seq and out.peer not in log.all_participants():
                        return Verdict(
                            False, f"2PC log {sid}@{log.seq} after transfer omits {out.peer}", log
                        )
    return Verdict(True)


def check_requirement2(streams: Mapping[int, list]) -> Verdict:
    """For every 2PC log L and every completed transfer e out of the same
    stream affecting L's transaction with ts(e) < ts(L), dst(e) is in L."""
    for sid in sorted(streams):
        entries = streams[sid]
        outs = [e for e in entries if e.kind == LogKind.TransferOutLog]
        for log in entries:
            if not log.is_2pc:
                continue
            for out in outs:
                if log.txn in out.txns and out.ts < log.ts and _transfer_in_for(streams, out):
                    if out.peer not in log.all_participants():
                        return Verdict(False, f"log {sid}@{log.seq} omits {out.peer}", log)
    return Verdict(True)
