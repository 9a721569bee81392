"""Simulated replicated log streams.

Replication is one completion event per append after a configurable latency.
Completions on one stream happen in append order, so a later append never
persists before an earlier one.
"""
from __future__ import annotations

import dataclasses
import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .state_machine import TxnContext
from .types import LogKind, ReplicatedLogEntry, TwoPCState, VoteStatus
from .unknown import TransactionDataTable


class AppendMode(enum.Enum):
    SYNC = "sync"
    ASYNC = "async"


class LockError(RuntimeError):
    pass


@dataclass
class TransferLockState:
    """Stream-level transfer lock plus per-transaction locks."""

    holder: Optional[str] = None
    txn_locks: dict[int, Optional[str]] = field(default_factory=dict)

    def acquire(self, owner: str) -> bool:
        if self.holder is not None and self.holder != owner:
            return False
        self.holder = owner
        return True

    def release(self, owner: str) -> None:
        if self.holder != owner:
            raise LockError(f"{owner} releases a lock held by {self.holder}")
        self.holder = None

    def acquire_txn(self, txn: int, owner: str) -> None:
        cur = self.txn_locks.get(txn)
        if cur is not None and cur != owner:
            raise LockError(f"txn {txn} lock held by {cur}")
        self.txn_locks[txn] = owner

    def release_txn(self, txn: int, owner: str) -> None:
        if self.txn_locks.get(txn) != owner:
            raise LockError(f"txn {txn} lock not held by {owner}")
        self.txn_locks[txn] = None


@dataclass
class AppendRequest:
    id: int
    entry: ReplicatedLogEntry  # seq is -1 until persisted
    mode: AppendMode
    due: int
    token: object = None


_append_ids = itertools.count(1)


@dataclass
class LogStream:
    id: int
    entries: list[ReplicatedLogEntry] = field(default_factory=list)
    pending: dict[int, AppendRequest] = field(default_factory=dict)
    contexts: dict[int, TxnContext] = field(default_factory=dict)
    lock: TransferLockState = field(default_factory=TransferLockState)
    hosted_partitions: set[int] = field(default_factory=set)
    tdt: TransactionDataTable = field(default_factory=TransactionDataTable)
    # 2PC appends held back by a transfer: (txn, LogIntent, cause tag)
    deferred: list[tuple] = field(default_factory=list)
    last_due: int = 0

    def append(
        self, entry: ReplicatedLogEntry, mode: AppendMode, now: int, latency: int, token=None
    ) -> AppendRequest:
        due = max(now + latency, self.last_due)
        self.last_due = due
        req = AppendRequest(next(_append_ids), entry, mode, due, token)
        self.pending[req.id] = req
        return req

    def persist(self, req_id: int) -> Optional[ReplicatedLogEntry]:
        """Complete an append; returns None if it was lost in a crash."""
        req = self.pending.pop(req_id, None)
        if req is None:
            return None
        seq = self.entries[-1].seq + 1 if self.entries else 0
        entry = dataclasses.replace(req.entry, seq=seq)
        self.entries.append(entry)
        return entry

    def reclaim_context(self, txn: int) -> None:
        self.contexts.pop(txn, None)

    def crash_and_recover(self, coordinator: Optional[int] = None) -> list[AppendRequest]:
        """Drop volatile state and rebuild contexts from persisted entries.

        Returns the appends lost in flight. The TDT is durable and kept.
        """
        lost = sorted(self.pending.values(), key=lambda r: r.id)
        self.pending = {}
        self.deferred = []
        self.lock = TransferLockState()
        self.last_due = 0
        self.contexts = recover_contexts(self.id, self.entries)
        return lost

    def entries_for(self, txn: int) -> list[ReplicatedLogEntry]:
        return [e for e in self.entries if e.txn == txn or txn in e.txns]

    def dump(self) -> list[str]:
        return [e.encode() for e in self.entries]


def recover_contexts(stream_id: int, entries: Iterable[ReplicatedLogEntry]) -> dict[int, TxnContext]:
    """Contexts implied by a persisted entry sequence.

    The latest 2PC log of a transaction fixes its state, parent and
    participant lists; transfer-out logs after it restore pending transfer
    destinations; a later clear log means the context was forgotten. A
    transaction with no 2PC log survives only if a transfer-in log brought
    it here while still running.
    """
    entries = list(entries)
    latest: dict[int, ReplicatedLogEntry] = {}
    migrated: dict[int, tuple[int, object]] = {}
    for e in entries:
        if e.is_2pc:
            latest[e.txn] = e
        elif e.kind == LogKind.TransferInLog:
            for m in e.migrated:
                migrated[m.txn] = (e.seq, m)
    out: dict[int, TxnContext] = {}
    for txn in sorted(set(latest) | set(migrated)):
        base = latest.get(txn)
        if base is None:
            _, m = migrated[txn]
            if m.state not in (TwoPCState.RUNNING, TwoPCState.PREPARE):
                continue
            out[txn] = TxnContext(txn, stream_id, partitions=set(m.partitions))
            after = migrated[txn][0]
        else:
            state = {
                LogKind.PrepareLog: TwoPCState.PREPARE,
                LogKind.CommitLog: TwoPCState.COMMIT,
                LogKind.AbortLog: TwoPCState.ABORT,
            }[base.kind]
            kids = set(base.participants) | set(base.incr_parts)
            ctx = TxnContext(
                txn,
                stream_id,
                state=state,
                parent=base.parent,
                children=kids,
                incr_children=set(base.incr_parts),
                partitions=set(base.partitions),
                prepare_log_persisted=True,
                decision_log_persisted=state != TwoPCState.PREPARE,
                last_2pc_log_ts=base.ts,
                is_root=base.parent is None,
                has_data=not (base.parent is None and kids),
            )
            if state == TwoPCState.PREPARE:
                ctx.votes = {c: VoteStatus.UNKNOWN for c in kids}
            else:
                ctx.acks = {c: False for c in kids}
                ctx.locks_released = True
                ctx.replied = True
            out[txn] = ctx
            after = base.seq
        ctx = out[txn]
        for e in entries:
            if e.seq <= after:
                continue
            if e.kind == LogKind.ClearLog and e.txn == txn:
                ctx.state = TwoPCState.TOMBSTONE
            elif e.kind == LogKind.TransferOutLog and txn in e.txns:
                if ctx.state != TwoPCState.TOMBSTONE and e.peer not in ctx.children and e.peer != stream_id:
                    ctx.interm_children.add(e.peer)
    return out
