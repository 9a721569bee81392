"""Per-node tree-shaped 2PC state machine.

Handlers take a context plus one input, mutate the context in place and
return an :class:`Effects` value describing what the node emits. The
simulator owns contexts and applies the effects; nothing here touches the
network or the logs directly.

Two fidelity modes share the handlers. ``ABSTRACT`` has no logs and every
transition is one of the reference actions. ``LOGGED`` adds prepare, commit
and clear log persistence: a participant enters PREPARE only once its
prepare log persists, votes OK only after that, and acks a Commit only
after its commit log persists.
"""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, fields
from typing import Optional

from .types import LogKind, Message, MsgKind, TwoPCState, UserOutcome, VoteStatus
from .unknown import (
    CoordinatorProvenance,
    InquiryAnswer,
    TransactionDataTable,
    resolve_inquiry,
    root_user_response,
)

RUNNING, PREPARE, COMMIT, ABORT, TOMBSTONE = (
    TwoPCState.RUNNING,
    TwoPCState.PREPARE,
    TwoPCState.COMMIT,
    TwoPCState.ABORT,
    TwoPCState.TOMBSTONE,
)
DECIDED = (COMMIT, ABORT)


class Mode(enum.Enum):
    ABSTRACT = "abstract"
    LOGGED = "logged"


class ProtocolError(Exception):
    """A handler was invoked outside its precondition."""


_FLAGS = (
    "clear_stage",
    "coordinator_commit_log",
    "release_messages",
    "d2pc_clear",
    "unknown_states",
    "tdt",
)

PRESETS = {
    "baseline": (),
    "clear_stage": ("clear_stage",),
    "commit_after_reply": ("coordinator_commit_log",),
    "release": ("coordinator_commit_log", "release_messages"),
    "d2pc": ("clear_stage", "d2pc_clear"),
    "unknown": ("coordinator_commit_log", "release_messages", "unknown_states"),
    "tdt": ("coordinator_commit_log", "release_messages", "unknown_states", "tdt"),
}


@dataclass(frozen=True)
class ProtocolVariant:
    clear_stage: bool = False
    coordinator_commit_log: bool = False
    release_messages: bool = False
    d2pc_clear: bool = False
    unknown_states: bool = False
    tdt: bool = False

    def __post_init__(self):
        if self.tdt and not self.unknown_states:
            raise ValueError("tdt requires unknown_states")
        if self.release_messages and not self.coordinator_commit_log:
            raise ValueError("release_messages requires coordinator_commit_log")

    @classmethod
    def parse(cls, text: str) -> "ProtocolVariant":
        """``release``, ``release+tdt``, ``clear_stage,d2pc_clear``, ..."""
        on = set()
        for tok in text.replace("+", ",").split(","):
            tok = tok.strip()
            if not tok:
                continue
            if tok in PRESETS:
                on.update(PRESETS[tok])
            elif tok in _FLAGS:
                on.add(tok)
            else:
                raise ValueError(f"unknown variant {tok!r}; presets: {', '.join(PRESETS)}")
        if "tdt" in on:
            on.add("unknown_states")
        return cls(**{f: True for f in on})

    @property
    def name(self) -> str:
        on = tuple(f for f in _FLAGS if getattr(self, f))
        for preset, flags in PRESETS.items():
            if set(flags) == set(on):
                return preset
        return "+".join(on)

    def flags(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def writes_clear_log(self, is_root: bool) -> bool:
        if is_root:
            return self.coordinator_commit_log or self.d2pc_clear
        return self.clear_stage and not self.d2pc_clear


@dataclass
class TxnContext:
    txn: int
    node: int
    state: TwoPCState = RUNNING
    own_status: VoteStatus = VoteStatus.OK
    parent: Optional[int] = None
    children: set[int] = field(default_factory=set)
    interm_children: set[int] = field(default_factory=set)
    incr_children: set[int] = field(default_factory=set)
    votes: dict[int, VoteStatus] = field(default_factory=dict)
    acks: dict[int, bool] = field(default_factory=dict)
    prepare_log_persisted: bool = False
    blocked_from_logging: bool = False
    last_2pc_log_ts: int = -1
    is_root: bool = False
    provenance: CoordinatorProvenance = CoordinatorProvenance.FRESH
    # None once the recorded set exceeded the cap: every transfer out of
    # the stream then counts as touching this transaction.
    partitions: Optional[set[int]] = field(default_factory=set)
    # The coordinator of a multi-stream transaction holds no rows.
    has_data: bool = True
    # logged-mode bookkeeping
    preparing: bool = False
    vote_sent: Optional[VoteStatus] = None
    decision_log_persisted: bool = False
    deferred_replies: list[int] = field(default_factory=list)
    ack_to: list[int] = field(default_factory=list)
    locks_released: bool = False
    replied: bool = False

    def copy(self) -> "TxnContext":
        return copy.deepcopy(self)

    def merge_interm(self) -> list[int]:
        """Fold pending transfer destinations into the active list."""
        new = sorted(self.interm_children - self.children)
        self.children |= self.interm_children
        self.incr_children |= self.interm_children
        self.interm_children = set()
        return new

    def all_votes_ok(self) -> bool:
        return all(self.votes.get(c) == VoteStatus.OK for c in self.children)

    def any_vote_failed(self) -> bool:
        return any(
            self.votes.get(c) in (VoteStatus.NO, VoteStatus.PREPARE_UNKNOWN) for c in self.children
        )

    def all_acked(self) -> bool:
        return all(self.acks.get(c, False) for c in self.children)

    def in_prepare_phase(self) -> bool:
        return self.state == PREPARE or self.preparing

    def describe(self) -> str:
        parent = "-" if self.parent is None else str(self.parent)
        return (
            f"{self.state.name} p={parent} ch={_ints(self.children)} "
            f"im={_ints(self.interm_children)} inc={_ints(self.incr_children)}"
        )


def _ints(xs) -> str:
    return ",".join(str(x) for x in sorted(xs)) or "-"


@dataclass(frozen=True)
class LogIntent:
    kind: LogKind
    sync: bool


@dataclass
class Effects:
    sends: list[Message] = field(default_factory=list)
    logs: list[LogIntent] = field(default_factory=list)
    user: Optional[UserOutcome] = None
    release_locks: bool = False
    violations: list[str] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)

    def send(self, kind, src, dst, txn, status=None, outcome=None) -> None:
        self.sends.append(Message(kind, src, dst, txn, status, outcome))

    def extend(self, other: "Effects") -> "Effects":
        self.sends += other.sends
        self.logs += other.logs
        self.user = other.user if other.user is not None else self.user
        self.release_locks = self.release_locks or other.release_locks
        self.violations += other.violations
        self.anomalies += other.anomalies
        return self

    def describe(self) -> list[str]:
        out = [str(m) for m in self.sends]
        out += [f"{i.kind.name}({'sync' if i.sync else 'async'})" for i in self.logs]
        if self.user is not None:
            out.append(f"user:{self.user.name}")
        if self.release_locks:
            out.append("locks_released")
        out += [f"violation:{v}" for v in self.violations]
        out += [f"anomaly:{a}" for a in self.anomalies]
        return out


# Dispatch results that are not handler names.
PARK = "park"
DROP = "drop"

INTERNAL = ("handle_2pc_commit_decided", "handle_2pc_abort_decided", "forget_ctx")


@dataclass(frozen=True)
class Machine:
    mode: Mode = Mode.ABSTRACT
    variant: ProtocolVariant = ProtocolVariant()
    # Seeded bug for negative controls: commit once every vote is in,
    # whatever its value.
    mutant_commit_on_no: bool = False

    @property
    def logged(self) -> bool:
        return self.mode == Mode.LOGGED

    def _root_needs_log(self, ctx: TxnContext) -> bool:
        return self.logged and (self.variant.coordinator_commit_log or ctx.has_data)

    # prepare phase

    def handle_prepare_request(self, ctx: TxnContext, src: Optional[int]) -> Effects:
        if ctx.state != RUNNING or ctx.preparing:
            raise ProtocolError(f"prepare request in {ctx.state.name}")
        eff = Effects()
        if not ctx.is_root and ctx.parent is None:
            ctx.parent = src
        ctx.merge_interm()
        ctx.votes = {c: VoteStatus.UNKNOWN for c in ctx.children}
        for c in sorted(ctx.children):
            eff.send(MsgKind.PrepareReq, ctx.node, c, ctx.txn)
        if not self.logged or ctx.is_root:
            ctx.state = PREPARE
            ctx.prepare_log_persisted = ctx.is_root or ctx.prepare_log_persisted
        else:
            ctx.preparing = True
            # The vote waits for this log, so it counts as synchronous even
            # though PrepareReq fan-out does not.
            eff.logs.append(LogIntent(LogKind.PrepareLog, sync=True))
        return eff

    def handle_duplicate_prepare_request(self, ctx: TxnContext, src: int) -> Effects:
        if not ctx.in_prepare_phase() or src == ctx.parent:
            raise ProtocolError("duplicate prepare needs PREPARE and a non-parent sender")
        eff = Effects()
        if self.logged and not ctx.prepare_log_persisted:
            if src not in ctx.deferred_replies:
                ctx.deferred_replies.append(src)
        else:
            eff.send(MsgKind.PrepareResp, ctx.node, src, ctx.txn, VoteStatus.OK)
        return eff

    def handle_prepare_retry(self, ctx: TxnContext, src: int) -> Effects:
        """Logged mode: the parent asked again (it recovered); repeat the
        vote if one was already sent."""
        eff = Effects()
        if ctx.vote_sent is not None:
            eff.send(MsgKind.PrepareResp, ctx.node, src, ctx.txn, ctx.vote_sent)
        return eff

    def handle_orphan_prepare_request(
        self,
        ctx: Optional[TxnContext],
        src: int,
        node: int,
        txn: int,
        now: int = 0,
        tdt: Optional[TransactionDataTable] = None,
    ) -> Effects:
        if ctx is not None and ctx.state not in (ABORT, TOMBSTONE):
            raise ProtocolError(f"orphan prepare in {ctx.state.name}")
        if ctx is not None and ctx.parent is None and not ctx.is_root:
            ctx.parent = src
        if ctx is not None and ctx.state == ABORT:
            answer = InquiryAnswer(VoteStatus.NO)
        else:
            answer = resolve_inquiry(
                txn, now, self.variant.unknown_states, tdt if self.variant.tdt else None
            )
        eff = Effects()
        eff.send(MsgKind.PrepareResp, node, src, txn, answer.status, answer.outcome)
        return eff

    def handle_prepare_response(self, ctx: TxnContext, src: int, status: VoteStatus) -> Effects:
        if ctx.state != PREPARE or src not in ctx.children:
            raise ProtocolError("prepare response needs PREPARE and a known child")
        if ctx.votes.get(src, VoteStatus.UNKNOWN) == VoteStatus.UNKNOWN:
            ctx.votes[src] = status
            if status == VoteStatus.NO:
                ctx.own_status = VoteStatus.NO
        return Effects()

    # decisions

    def commit_enabled(self, ctx: TxnContext) -> bool:
        if self.mutant_commit_on_no:
            if ctx.state != PREPARE or any(
                ctx.votes.get(c, VoteStatus.UNKNOWN) == VoteStatus.UNKNOWN for c in ctx.children
            ):
                return False
        elif ctx.state != PREPARE or not ctx.all_votes_ok() or ctx.own_status != VoteStatus.OK:
            return False
        if ctx.is_root:
            return True
        return ctx.vote_sent is None and (not self.logged or ctx.prepare_log_persisted)

    def abort_enabled(self, ctx: TxnContext) -> bool:
        failed = ctx.any_vote_failed() or ctx.own_status == VoteStatus.NO
        if not failed:
            return False
        if ctx.is_root:
            return ctx.state in (RUNNING, PREPARE) and (ctx.state == PREPARE or ctx.any_vote_failed())
        return ctx.state == PREPARE and ctx.vote_sent is None

    def handle_2pc_commit_decided(self, ctx: TxnContext) -> Effects:
        if not self.commit_enabled(ctx):
            raise ProtocolError("commit not enabled")
        eff = Effects()
        if not ctx.is_root:
            ctx.vote_sent = VoteStatus.OK
            eff.send(MsgKind.PrepareResp, ctx.node, ctx.parent, ctx.txn, VoteStatus.OK)
            return eff
        ctx.state = COMMIT
        ctx.merge_interm()
        ctx.acks = {c: False for c in ctx.children}
        if self._root_needs_log(ctx):
            eff.logs.append(LogIntent(LogKind.CommitLog, sync=True))
            if self.variant.release_messages:
                for c in sorted(ctx.children):
                    eff.send(MsgKind.Release, ctx.node, c, ctx.txn)
            if not self.variant.coordinator_commit_log:
                for c in sorted(ctx.children):
                    eff.send(MsgKind.Commit, ctx.node, c, ctx.txn)
        else:
            ctx.decision_log_persisted = True
            for c in sorted(ctx.children):
                eff.send(MsgKind.Commit, ctx.node, c, ctx.txn)
        # One-phase commit answers only once the data's commit log is durable.
        if not (self.logged and ctx.has_data):
            eff.user = UserOutcome.COMMITTED
            ctx.replied = True
        return eff

    def handle_2pc_abort_decided(self, ctx: TxnContext) -> Effects:
        if not self.abort_enabled(ctx):
            raise ProtocolError("abort not enabled")
        eff = Effects()
        if not ctx.is_root:
            if ctx.own_status == VoteStatus.NO or any(
                v == VoteStatus.NO for v in ctx.votes.values()
            ):
                vote = VoteStatus.NO
            else:
                vote = VoteStatus.PREPARE_UNKNOWN
            ctx.vote_sent = vote
            eff.send(MsgKind.PrepareResp, ctx.node, ctx.parent, ctx.txn, vote)
            return eff
        ctx.state = ABORT
        ctx.merge_interm()
        ctx.acks = {c: False for c in ctx.children}
        votes = [ctx.votes.get(c, VoteStatus.UNKNOWN) for c in sorted(ctx.children)]
        eff.user = root_user_response(ctx.provenance, votes, self.variant.unknown_states)
        ctx.replied = True
        if self._root_needs_log(ctx):
            eff.logs.append(LogIntent(LogKind.AbortLog, sync=True))
            if self.variant.coordinator_commit_log:
                return eff
        else:
            ctx.decision_log_persisted = True
        for c in sorted(ctx.children):
            eff.send(MsgKind.Abort, ctx.node, c, ctx.txn)
        return eff

    # commit phase

    def _enter_decision(self, ctx: TxnContext, src: int, state: TwoPCState) -> Effects:
        if ctx.is_root or ctx.state not in (RUNNING, PREPARE):
            raise ProtocolError(f"{state.name} request in {ctx.state.name}")
        eff = Effects()
        if ctx.parent is None:
            ctx.parent = src
        ctx.merge_interm()
        ctx.state = state
        ctx.preparing = False
        ctx.acks = {c: False for c in ctx.children}
        kind = MsgKind.Commit if state == COMMIT else MsgKind.Abort
        for c in sorted(ctx.children):
            eff.send(kind, ctx.node, c, ctx.txn)
        if self.logged:
            ctx.ack_to.append(src)
            eff.logs.append(
                LogIntent(LogKind.CommitLog if state == COMMIT else LogKind.AbortLog, sync=True)
            )
        else:
            eff.send(MsgKind.Ack, ctx.node, src, ctx.txn)
        return eff

    def handle_commit_request(self, ctx: TxnContext, src: int) -> Effects:
        return self._enter_decision(ctx, src, COMMIT)

    def handle_abort_request(self, ctx: TxnContext, src: int) -> Effects:
        return self._enter_decision(ctx, src, ABORT)

    def _orphan_decision(self, ctx, src, node, txn, state) -> Effects:
        eff = Effects()
        if ctx is not None and ctx.state not in (state, TOMBSTONE):
            raise ProtocolError(f"orphan {state.name} in {ctx.state.name}")
        if self.logged and ctx is not None and ctx.state == state and not ctx.decision_log_persisted:
            if src not in ctx.ack_to:
                ctx.ack_to.append(src)
            return eff
        eff.send(MsgKind.Ack, node, src, txn)
        return eff

    def handle_orphan_commit_request(self, ctx, src: int, node: int, txn: int) -> Effects:
        return self._orphan_decision(ctx, src, node, txn, COMMIT)

    def handle_orphan_abort_request(self, ctx, src: int, node: int, txn: int) -> Effects:
        return self._orphan_decision(ctx, src, node, txn, ABORT)

    def handle_decision_inquiry(
        self, ctx: Optional[TxnContext], src: int, node: int, txn: int, known: Optional[TwoPCState]
    ) -> Effects:
        """Logged mode: a prepared child re-sent its vote to a parent that has
        lost the context. ``known`` is the decision the parent can vouch
        for: the one in its log, or ABORT when a commit would have been
        logged. With None the inquiry goes unanswered."""
        if ctx is not None:
            raise ProtocolError("decision inquiry needs a missing context")
        eff = Effects()
        if known is not None:
            eff.send(MsgKind.Commit if known == COMMIT else MsgKind.Abort, node, src, txn)
        return eff

    def handle_ack(self, ctx: TxnContext, src: int) -> Effects:
        if ctx.state not in DECIDED or src not in ctx.children:
            raise ProtocolError("ack needs a decided context and a known child")
        ctx.acks[src] = True
        return Effects()

    def handle_release(self, ctx: TxnContext, src: int) -> Effects:
        eff = Effects()
        if ctx.locks_released:
            return eff
        ctx.locks_released = True
        eff.release_locks = ctx.has_data
        for c in sorted(ctx.children):
            eff.send(MsgKind.Release, ctx.node, c, ctx.txn)
        return eff

    def forget_enabled(self, ctx: TxnContext) -> bool:
        if ctx.state not in DECIDED or not ctx.all_acked():
            return False
        return not self.logged or ctx.decision_log_persisted

    def forget_ctx(self, ctx: TxnContext) -> Effects:
        if not self.forget_enabled(ctx):
            raise ProtocolError("forget not enabled")
        eff = Effects()
        ctx.state = TOMBSTONE
        if self.logged and self.variant.writes_clear_log(ctx.is_root):
            eff.logs.append(LogIntent(LogKind.ClearLog, sync=False))
        return eff

    # transfers and local failures

    def add_intermediate_participant(self, ctx: TxnContext, new_child: int) -> Effects:
        if ctx.state == TOMBSTONE:
            raise ProtocolError("cannot add a participant to a forgotten context")
        if new_child == ctx.node or new_child in ctx.children or new_child in ctx.interm_children:
            raise ProtocolError(f"{new_child} is already known to node {ctx.node}")
        ctx.interm_children.add(new_child)
        return Effects()

    def can_add(self, ctx: TxnContext, new_child: int) -> bool:
        return not (
            ctx.state == TOMBSTONE
            or new_child == ctx.node
            or new_child in ctx.children
            or new_child in ctx.interm_children
        )

    def internal_abort(self, ctx: TxnContext) -> Effects:
        if ctx.state != RUNNING:
            raise ProtocolError(f"internal abort in {ctx.state.name}")
        eff = Effects()
        ctx.state = ABORT
        ctx.preparing = False
        ctx.own_status = VoteStatus.NO
        ctx.merge_interm()
        ctx.acks = {c: False for c in ctx.children}
        for c in sorted(ctx.children):
            eff.send(MsgKind.Abort, ctx.node, c, ctx.txn)
        if ctx.parent is not None:
            ctx.vote_sent = VoteStatus.NO
            eff.send(MsgKind.PrepareResp, ctx.node, ctx.parent, ctx.txn, VoteStatus.NO)
        if self.logged and (not ctx.is_root or self._root_needs_log(ctx)):
            eff.logs.append(LogIntent(LogKind.AbortLog, sync=True))
        else:
            ctx.decision_log_persisted = True
        return eff

    # logged mode

    def handle_log_persisted(self, ctx: TxnContext, kind: LogKind) -> Effects:
        eff = Effects()
        if kind == LogKind.PrepareLog:
            ctx.prepare_log_persisted = True
            ctx.preparing = False
            if ctx.state == RUNNING:
                ctx.state = PREPARE
            for src in ctx.deferred_replies:
                eff.send(MsgKind.PrepareResp, ctx.node, src, ctx.txn, VoteStatus.OK)
            ctx.deferred_replies = []
        elif kind in (LogKind.CommitLog, LogKind.AbortLog):
            ctx.decision_log_persisted = True
            if ctx.is_root and self.variant.coordinator_commit_log:
                mk = MsgKind.Commit if ctx.state == COMMIT else MsgKind.Abort
                for c in sorted(ctx.children):
                    eff.send(mk, ctx.node, c, ctx.txn)
            for src in ctx.ack_to:
                eff.send(MsgKind.Ack, ctx.node, src, ctx.txn)
            ctx.ack_to = []
            if ctx.has_data and not ctx.locks_released:
                ctx.locks_released = True
                eff.release_locks = True
            if ctx.is_root and not ctx.replied and ctx.state == COMMIT:
                ctx.replied = True
                eff.user = UserOutcome.COMMITTED
        return eff

    def catch_up(self, ctx: TxnContext, new_children: list[int], kind: LogKind) -> Effects:
        """Children merged while a 2PC log was being committed get the
        current phase's request."""
        eff = Effects()
        if kind == LogKind.PrepareLog:
            for c in new_children:
                ctx.votes[c] = VoteStatus.UNKNOWN
                eff.send(MsgKind.PrepareReq, ctx.node, c, ctx.txn)
        elif kind in (LogKind.CommitLog, LogKind.AbortLog):
            mk = MsgKind.Commit if kind == LogKind.CommitLog else MsgKind.Abort
            deferred = ctx.is_root and self.variant.coordinator_commit_log
            for c in new_children:
                ctx.acks[c] = False
                if not deferred:
                    eff.send(mk, ctx.node, c, ctx.txn)
        return eff

    # routing

    def classify(self, ctx: Optional[TxnContext], msg: Message) -> str:
        """Name of the handler for ``msg``, or PARK (not yet applicable) or
        DROP (can never apply)."""
        k = msg.kind
        if ctx is None:
            return {
                MsgKind.PrepareReq: "handle_orphan_prepare_request",
                MsgKind.Commit: "handle_orphan_commit_request",
                MsgKind.Abort: "handle_orphan_abort_request",
                MsgKind.PrepareResp: "handle_decision_inquiry" if self.logged else DROP,
            }.get(k, DROP)
        st = ctx.state
        if k == MsgKind.PrepareReq:
            if st == RUNNING and not ctx.preparing:
                # Without logs nothing else holds the vote back while a
                # transfer is moving this transaction's data.
                if not self.logged and ctx.blocked_from_logging:
                    return PARK
                return "handle_prepare_request"
            if ctx.in_prepare_phase() and st not in DECIDED:
                if msg.src != ctx.parent:
                    return "handle_duplicate_prepare_request"
                return "handle_prepare_retry" if self.logged else DROP
            if st in (ABORT, TOMBSTONE):
                return "handle_orphan_prepare_request"
            return DROP
        if k == MsgKind.PrepareResp:
            if st in DECIDED or st == TOMBSTONE:
                return DROP
            if st == PREPARE and msg.src in ctx.children:
                if ctx.votes.get(msg.src, VoteStatus.UNKNOWN) != VoteStatus.UNKNOWN:
                    return DROP
                return "handle_prepare_response"
            return PARK
        if k in (MsgKind.Commit, MsgKind.Abort):
            mine, other = (COMMIT, ABORT) if k == MsgKind.Commit else (ABORT, COMMIT)
            if ctx.is_root:
                return DROP
            if st in (RUNNING, PREPARE):
                if not self.logged and ctx.blocked_from_logging:
                    return PARK
                return "handle_commit_request" if k == MsgKind.Commit else "handle_abort_request"
            if st in (mine, TOMBSTONE):
                return "handle_orphan_commit_request" if k == MsgKind.Commit else "handle_orphan_abort_request"
            return "conflict"
        if k == MsgKind.Ack:
            if st in DECIDED:
                if msg.src not in ctx.children:
                    return DROP
                return DROP if ctx.acks.get(msg.src) else "handle_ack"
            return DROP if st == TOMBSTONE else PARK
        if k == MsgKind.Release:
            return DROP if ctx.is_root else "handle_release"
        return DROP

    def internal_action(self, ctx: TxnContext) -> Optional[str]:
        """The spontaneous step enabled on ``ctx``, if any."""
        if self.commit_enabled(ctx):
            return "handle_2pc_commit_decided"
        if self.abort_enabled(ctx):
            return "handle_2pc_abort_decided"
        if self.forget_enabled(ctx):
            return "forget_ctx"
        return None
