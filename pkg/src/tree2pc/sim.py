"""Deterministic discrete-event simulator.

Events fire in ``(time, seq)`` order from one heap; all randomness comes
from ``random.Random(config.seed)``. Every handler invocation appends one
trace record. In abstract mode each record also carries the projection of
the transaction onto the reference variables, so the trace can be replayed
against the model checker's transition relation.

Critical paths are tracked with a ``(hops, syncs)`` tag on every event: a
delivered message adds one hop to its sender's tag, a persisted log adds one
sync to its writer's tag, and a handler runs with the tag of the input that
triggered it (the latest one to arrive).
"""
from __future__ import annotations

import hashlib
import heapq
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from . import transfer as T
from .checker import _kernel_py as K
from .log_engine import AppendMode, LogStream
from .state_machine import (
    DROP,
    PARK,
    Effects,
    Machine,
    Mode,
    ProtocolError,
    ProtocolVariant,
    TxnContext,
)
from .types import (
    USER,
    LogKind,
    Message,
    MsgKind,
    ReplicatedLogEntry,
    TwoPCState,
    UserOutcome,
    VoteStatus,
)
from .unknown import DEFAULT_TDT_RETENTION, CoordinatorProvenance, TransactionDataTable

TRACE_VERSION = 1
# Timer resends per context before it is left for the liveness check.
MAX_RETRIES = 20
COMMIT, ABORT, TOMBSTONE = TwoPCState.COMMIT, TwoPCState.ABORT, TwoPCState.TOMBSTONE


class ScenarioError(ValueError):
    """A scenario refers to something that does not exist."""


@dataclass
class SimConfig:
    msg_delay: int = 1
    log_sync_delay: int = 1
    jitter: int = 0
    seed: int = 0
    variant: ProtocolVariant = field(default_factory=ProtocolVariant)
    mode: Mode = Mode.LOGGED
    tdt_retention: int = DEFAULT_TDT_RETENTION
    partition_cap: Optional[int] = None
    max_events: int = 1_000_000
    # Resend outstanding requests after this many ticks; only needed when
    # crashes can swallow a request.
    retry_timeout: Optional[int] = None
    duplicate_prob: float = 0.0
    # Negative control only; see Machine.mutant_commit_on_no.
    mutant: bool = False

    def __post_init__(self):
        if self.msg_delay < 1 or self.log_sync_delay < 0 or self.jitter < 0:
            raise ValueError("delays must be positive and jitter non-negative")
        if self.mode == Mode.ABSTRACT and self.variant != ProtocolVariant():
            raise ValueError("abstract mode runs the baseline variant only")


@dataclass
class TxnSpec:
    txn: int
    partitions: tuple[int, ...] = ()
    start: int = 0
    commit_at: int = 1
    # Explicit initial tree: stream -> children. The coordinator's entry
    # names the first-level participants.
    tree: Optional[dict[int, tuple[int, ...]]] = None
    # None: one-phase commit when only one stream is involved.
    one_phase: Optional[bool] = None


@dataclass
class TransferSpec:
    at: int
    partition: int
    src: int
    dst: int


FAULT_KINDS = (
    "drop_user_response",
    "reclaim_context",
    "crash",
    "duplicate",
    "internal_abort",
    "vote_no",
    "user_retry",
)


@dataclass
class FaultSpec:
    kind: str
    at: int = 0
    stream: Optional[int] = None
    txn: Optional[int] = None
    msg: Optional[str] = None
    src: Optional[int] = None
    dst: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ScenarioError(f"unknown fault {self.kind!r}; known: {', '.join(FAULT_KINDS)}")


@dataclass
class Topology:
    coordinator: int
    streams: tuple[int, ...]
    partitions: dict[int, int] = field(default_factory=dict)  # partition -> home


# event payloads


@dataclass
class Deliver:
    msg: Message
    tag: tuple
    dup: bool = False


@dataclass
class LogPersisted:
    stream: int
    req: int
    tag: tuple


@dataclass
class TransferBegin:
    run: int


@dataclass
class Fault:
    spec: FaultSpec


@dataclass
class TxnStart:
    txn: int


@dataclass
class UserRequest:
    txn: int
    retry: bool = False


@dataclass
class Timer:
    stream: int
    txn: int


@dataclass
class TraceRecord:
    time: int
    node: int
    txn: Optional[int]
    handler: str
    input: str = "-"
    before: str = "-"
    after: str = "-"
    outputs: tuple[str, ...] = ()
    world: Optional[tuple] = None

    def encode(self) -> str:
        out = ";".join(o.replace(" ", "_") for o in self.outputs) or "-"
        parts = [
            f"t={self.time}",
            f"node={self.node}",
            f"txn={'-' if self.txn is None else self.txn}",
            f"handler={self.handler}",
            f"in={self.input.replace(' ', '_')}",
            f"before={self.before}",
            f"after={self.after}",
            f"out={out}",
        ]
        if self.world is not None:
            parts.append("world=" + ".".join(format(x, "x") for x in self.world))
        return "step " + " ".join(parts)


@dataclass
class OutcomeRecord:
    time: int
    outcome: UserOutcome
    provenance: CoordinatorProvenance
    delivered: bool
    tag: tuple
    latency: int


@dataclass
class Violation:
    kind: str
    txn: Optional[int]
    time: int
    detail: str = ""

    def __str__(self):
        return f"{self.kind} txn={self.txn} t={self.time} {self.detail}".rstrip()


# Violations that mean a safety property broke, as opposed to liveness.
LIVENESS_KINDS = ("no_outcome", "non_terminal", "event_bound")


@dataclass
class TxnRecord:
    spec: TxnSpec
    root: int
    initial: tuple[int, ...]
    static_children: dict[int, set]
    commit_requested_at: Optional[int] = None
    msgs: dict = field(default_factory=lambda: defaultdict(int))
    dup_msgs: int = 0
    logs: dict = field(default_factory=lambda: defaultdict(int))  # (kind, is_root, mode) -> n
    lock_release: dict = field(default_factory=dict)  # stream -> (time, tag)
    reclaim: dict = field(default_factory=dict)  # stream -> (time, tag) at TOMBSTONE
    children_seen: dict = field(default_factory=dict)  # stream -> set
    interm_adds: list = field(default_factory=list)  # (stream, dst, state name)
    phase_children: dict = field(default_factory=dict)  # (stream, state) -> tuple
    sent: set = field(default_factory=set)  # (word, src, dst) for the projection
    dyn: int = 0
    committed_somewhere: bool = False
    transfers: list = field(default_factory=list)  # (src, dst) affecting this txn
    start_homes: dict = field(default_factory=dict)  # partition -> stream when it began


_PROJ_WORD = {
    (MsgKind.PrepareReq, None): K.M_REQ,
    (MsgKind.PrepareResp, VoteStatus.OK): K.M_OK,
    (MsgKind.PrepareResp, VoteStatus.NO): K.M_NO,
    (MsgKind.Commit, None): K.M_COMMIT,
    (MsgKind.Abort, None): K.M_ABORT,
    (MsgKind.Ack, None): K.M_ACK,
}


def _tag_max(a: tuple, b: tuple) -> tuple:
    return a if a >= b else b


class World:
    def __init__(
        self,
        config: SimConfig,
        topology: Topology,
        txns: list[TxnSpec],
        transfers: list[TransferSpec] = (),
        faults: list[FaultSpec] = (),
        name: str = "scenario",
    ):
        self.config = config
        self.name = name
        self.machine = Machine(config.mode, config.variant, config.mutant)
        self.rng = random.Random(config.seed)
        self.now = 0
        self._seq = 0
        self._ts = 0
        self.heap: list = []
        self.topology = topology
        self.coordinator = topology.coordinator
        streams = sorted(set(topology.streams) | {topology.coordinator})
        if USER in streams:
            raise ScenarioError(f"stream id {USER} is reserved for the user")
        self.streams: dict[int, LogStream] = {
            s: LogStream(s, tdt=TransactionDataTable(config.tdt_retention)) for s in streams
        }
        self.home: dict[int, int] = {}
        for p, s in sorted(topology.partitions.items()):
            if s not in self.streams:
                raise ScenarioError(f"partition {p} homed on unknown stream {s}")
            self.home[p] = s
            self.streams[s].hosted_partitions.add(p)
        self.cap = T.PartitionRecordCap(config.partition_cap) if config.partition_cap else None
        self.trace: list[TraceRecord] = []
        self.outcomes: dict[int, list[OutcomeRecord]] = defaultdict(list)
        self.violations: list[Violation] = []
        self.anomalies: list[str] = []
        self.parked: dict[tuple, list] = defaultdict(list)
        # Root commit requests waiting for a transfer (abstract mode).
        self.held_commits: set[int] = set()
        self.held_aborts: set[tuple] = set()
        self.settled: dict[int, dict] = {}
        self.runs: dict[int, T.TransferRun] = {}
        self.waiting: dict[int, list[int]] = defaultdict(list)
        self.txns: dict[int, TxnRecord] = {}
        self.faults = list(faults)
        self.dup_rules: list[FaultSpec] = []
        self.drop_rules: set[int] = set()
        self.timers: set[tuple] = set()
        self.retries: dict[tuple, int] = defaultdict(int)
        self._ctx_tag: dict[tuple, tuple] = {}
        self.sent_count = 0
        self.delivered_count = 0
        self.scheduled_dups = 0
        self.events = 0
        self.node_order = streams
        self.index = {s: i for i, s in enumerate(streams)}
        self.project = config.mode == Mode.ABSTRACT and len(streams) <= K.MAX_NODES

        for spec in sorted(txns, key=lambda t: t.txn):
            self._register_txn(spec)
        for i, tr in enumerate(sorted(transfers, key=lambda t: t.at)):
            for s in (tr.src, tr.dst):
                if s not in self.streams:
                    raise ScenarioError(f"transfer names unknown stream {s}")
            run = T.TransferRun(i, T.TransferEvent(tr.partition, tr.src, tr.dst))
            self.runs[i] = run
            self.schedule(tr.at, TransferBegin(i))
        for f in self.faults:
            self._validate_fault(f)
            if f.kind == "duplicate":
                self.dup_rules.append(f)
            elif f.kind == "drop_user_response":
                self.drop_rules.add(f.txn)
            else:
                self.schedule(f.at, Fault(f))

    # setup

    def _register_txn(self, spec: TxnSpec) -> None:
        if spec.txn in self.txns:
            raise ScenarioError(f"txn {spec.txn} defined twice")
        for p in spec.partitions:
            if p not in self.home:
                raise ScenarioError(f"txn {spec.txn} touches unknown partition {p}")
        if spec.commit_at < spec.start:
            raise ScenarioError(f"txn {spec.txn} commits before it starts")
        if spec.tree is not None:
            for s, kids in spec.tree.items():
                for x in (s, *kids):
                    if x not in self.streams:
                        raise ScenarioError(f"txn {spec.txn} tree names unknown stream {x}")
            root = self.coordinator
            static = {s: set(k) for s, k in spec.tree.items()}
            initial = tuple(sorted(static.get(root, ())))
        else:
            root = self.coordinator
            static = {}
            initial = ()
        rec = TxnRecord(spec, root, initial, static)
        self.txns[spec.txn] = rec
        self.schedule(spec.start, TxnStart(spec.txn))
        self.schedule(spec.commit_at, UserRequest(spec.txn))

    def _validate_fault(self, f: FaultSpec) -> None:
        if f.txn is not None and f.txn not in self.txns:
            raise ScenarioError(f"fault {f.kind} names unknown txn {f.txn}")
        if f.stream is not None and f.stream not in self.streams:
            raise ScenarioError(f"fault {f.kind} names unknown stream {f.stream}")
        needs = {
            "drop_user_response": ("txn",),
            "reclaim_context": ("stream", "txn"),
            "crash": ("stream",),
            "duplicate": ("msg",),
            "internal_abort": ("stream", "txn"),
            "vote_no": ("stream", "txn"),
            "user_retry": ("txn",),
        }[f.kind]
        for attr in needs:
            if getattr(f, attr) is None:
                raise ScenarioError(f"fault {f.kind} needs {attr}")
        if f.kind == "duplicate" and f.msg not in MsgKind.__members__:
            raise ScenarioError(f"duplicate names unknown message kind {f.msg!r}")
        if self.config.mode == Mode.ABSTRACT and f.kind in (
            "reclaim_context",
            "crash",
            "vote_no",
            "user_retry",
            "drop_user_response",
        ):
            raise ScenarioError(f"fault {f.kind} needs logged mode")

    # plumbing used by the transfer engine

    def schedule(self, time: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (time, self._seq, payload))

    def next_ts(self) -> int:
        self._ts += 1
        return self._ts

    def _delay(self, base: int) -> int:
        return base + (self.rng.randint(0, self.config.jitter) if self.config.jitter else 0)

    def submit_log(self, sid: int, entry: ReplicatedLogEntry, mode: AppendMode, token, tag=None):
        tag = tag if tag is not None else self._cur_tag
        stream = self.streams[sid]
        req = stream.append(entry, mode, self.now, self._delay(self.config.log_sync_delay), token)
        self.schedule(req.due, LogPersisted(sid, req.id, (tag[0], tag[1] + 1)))
        if entry.txn is not None and entry.txn in self.txns:
            ctx = stream.contexts.get(entry.txn)
            is_root = bool(ctx and ctx.is_root)
            self.txns[entry.txn].logs[(entry.kind, is_root, mode)] += 1
        return req

    def record_lock(self, sid: int, what: str, owner: str) -> None:
        self.trace.append(TraceRecord(self.now, sid, None, f"lock_{what}", owner))

    def on_context_created(self, sid: int, ctx: TxnContext, why: str) -> None:
        self.trace.append(
            TraceRecord(self.now, sid, ctx.txn, "create_context", why.replace(" ", "_"), "-", ctx.state.name)
        )

    def apply_internal(self, sid: int, ctx: TxnContext, handler: str, *args) -> None:
        self._invoke(sid, ctx.txn, ctx, handler, "-" if not args else str(args[0]), args)

    def apply_catch_up(self, sid: int, ctx: TxnContext, new, kind: LogKind) -> None:
        before = ctx.state.name
        eff = self.machine.catch_up(ctx, new, kind)
        self._finish_step(sid, ctx.txn, ctx, "commit_2pc_logs_under_lock", kind.name, before, eff)

    def transfer_completed(self, run: T.TransferRun) -> None:
        ev = run.event
        for txn in run.txns:
            if txn in self.txns:
                self.txns[txn].transfers.append((ev.src, ev.dst))
        self.trace.append(
            TraceRecord(
                self.now,
                ev.src,
                None,
                "transfer_done",
                f"p{ev.partition}:{ev.src}->{ev.dst}",
                outputs=(f"ts={ev.ts}", "txns=" + ",".join(map(str, run.txns))),
            )
        )
        for txn in run.txns:
            if (ev.src, txn) in self.held_aborts:
                self.held_aborts.discard((ev.src, txn))
                ctx = self.streams[ev.src].contexts.get(txn)
                if ctx is not None and ctx.state == TwoPCState.RUNNING:
                    self._invoke(ev.src, txn, ctx, "internal_abort", "fault", ())
            self._unpark(ev.src, txn)
            if txn in self.held_commits and self.txns[txn].root == ev.src:
                self.held_commits.discard(txn)
                self._user_request(txn, False)
        self._start_waiting(ev.src)

    # main loop

    _cur_tag: tuple = (0, 0)

    def run(self) -> "World":
        while self.heap:
            if self.events >= self.config.max_events:
                self._violation("event_bound", None, f"more than {self.config.max_events} events")
                break
            time, _, payload = heapq.heappop(self.heap)
            self.now = time
            self.events += 1
            self._dispatch(payload)
        self._quiescence_checks()
        return self

    def _dispatch(self, p) -> None:
        if isinstance(p, Deliver):
            self.delivered_count += 1
            self._deliver(p.msg, p.tag)
        elif isinstance(p, LogPersisted):
            self._on_persisted(p)
        elif isinstance(p, TxnStart):
            self._txn_start(p.txn)
        elif isinstance(p, UserRequest):
            self._user_request(p.txn, p.retry)
        elif isinstance(p, TransferBegin):
            self._transfer_begin(p.run)
        elif isinstance(p, Fault):
            self._fault(p.spec)
        elif isinstance(p, Timer):
            self._timer(p)

    # transactions

    def _txn_start(self, txn: int) -> None:
        rec = self.txns[txn]
        spec = rec.spec
        by_stream: dict[int, set] = defaultdict(set)
        for p in spec.partitions:
            by_stream[self.home[p]].add(p)
            rec.start_homes[p] = self.home[p]
        if spec.tree is None:
            homes = tuple(sorted(by_stream))
            one_phase = spec.one_phase if spec.one_phase is not None else len(homes) == 1
            if one_phase and len(homes) != 1:
                raise ScenarioError(f"txn {txn}: one-phase commit needs exactly one stream")
            if one_phase:
                rec.root = homes[0]
                rec.initial = ()
            else:
                rec.initial = homes
            rec.static_children = {rec.root: set(rec.initial)}
        members = {rec.root} | set(rec.initial)
        for s, kids in rec.static_children.items():
            members |= {s} | set(kids)
        for s in sorted(members):
            is_root = s == rec.root
            ctx = TxnContext(
                txn,
                s,
                children=set(rec.static_children.get(s, ())),
                is_root=is_root,
                has_data=not is_root or not rec.initial,
            )
            T.record_partitions(ctx, by_stream.get(s, ()), self.cap)
            self.streams[s].contexts[txn] = ctx
            rec.children_seen[s] = set(ctx.children)
        self.trace.append(
            TraceRecord(self.now, rec.root, txn, "txn_start", "-", outputs=(f"streams={_ints(members)}",))
        )

    def _user_request(self, txn: int, retry: bool) -> None:
        rec = self.txns[txn]
        root = self.streams[rec.root]
        ctx = root.contexts.get(txn)
        if retry and any(o.delivered for o in self.outcomes.get(txn, ())):
            return  # the user only retries after a lost or missing response
        if rec.commit_requested_at is None or retry:
            rec.commit_requested_at = self.now
        self._ctx_tag.pop((rec.root, txn), None)
        self._cur_tag = (0, 0)
        if retry and (ctx is None or ctx.state == TOMBSTONE):
            ctx = TxnContext(
                txn,
                rec.root,
                children=set(rec.initial),
                is_root=True,
                has_data=not rec.initial,
                provenance=CoordinatorProvenance.RECREATED,
            )
            root.contexts[txn] = ctx
            self.on_context_created(rec.root, ctx, "user retry")
        if ctx is None:
            self.anomalies.append(f"t={self.now} txn {txn}: commit request found no root context")
            return
        if ctx.state == TwoPCState.RUNNING and not ctx.preparing:
            if not self.machine.logged and ctx.blocked_from_logging:
                self.held_commits.add(txn)
                return
            self._invoke(rec.root, txn, ctx, "handle_prepare_request", "user_commit", (None,))
        elif ctx.state in (COMMIT, ABORT):
            outcome = UserOutcome.COMMITTED if ctx.state == COMMIT else UserOutcome.ABORTED
            self._user_outcome(txn, outcome, ctx, (0, 0))

    def _user_outcome(self, txn: int, outcome: UserOutcome, ctx: TxnContext, tag) -> None:
        rec = self.txns[txn]
        delivered = txn not in self.drop_rules
        self.drop_rules.discard(txn)
        latency = self.now - (rec.commit_requested_at or 0)
        self.outcomes[txn].append(
            OutcomeRecord(self.now, outcome, ctx.provenance, delivered, tag, latency)
        )
        self.trace.append(
            TraceRecord(
                self.now,
                ctx.node,
                txn,
                "user_response",
                ctx.provenance.name,
                outputs=(outcome.name + ("" if delivered else ":dropped"),),
            )
        )
        if outcome == UserOutcome.ABORTED and rec.committed_somewhere:
            self._violation("lying_abort", txn, "user told ABORTED after a participant committed")
        if outcome == UserOutcome.TRANS_UNKNOWN and ctx.provenance != CoordinatorProvenance.RECREATED:
            self._violation("unknown_from_fresh_root", txn)

    # messages

    def _send(self, m: Message, tag) -> None:
        rec = self.txns.get(m.txn)
        if self.config.variant.unknown_states is False and m.status == VoteStatus.PREPARE_UNKNOWN:
            self._violation("unexpected_prepare_unknown", m.txn, str(m))
        if m.dst not in self.streams:
            raise ScenarioError(f"message to unknown stream {m.dst}")
        if rec is not None:
            rec.msgs[m.kind] += 1
            key = (m.kind, m.status if m.kind == MsgKind.PrepareResp else None)
            if key in _PROJ_WORD:
                rec.sent.add((_PROJ_WORD[key], m.src, m.dst))
        self.sent_count += 1
        ntag = (tag[0] + 1, tag[1])
        self.schedule(self.now + self._delay(self.config.msg_delay), Deliver(m, ntag))
        dup = False
        for rule in self.dup_rules:
            if (
                rule.msg == m.kind.name
                and rule.src in (None, m.src)
                and rule.dst in (None, m.dst)
                and rule.txn in (None, m.txn)
            ):
                self.dup_rules.remove(rule)
                dup = True
                break
        if not dup and self.config.duplicate_prob and self.rng.random() < self.config.duplicate_prob:
            dup = True
        if dup:
            self.scheduled_dups += 1
            if rec is not None:
                rec.dup_msgs += 1
            self.schedule(self.now + self._delay(self.config.msg_delay), Deliver(m, ntag, dup=True))

    def _deliver(self, m: Message, tag) -> None:
        stream = self.streams[m.dst]
        ctx = stream.contexts.get(m.txn)
        name = self.machine.classify(ctx, m)
        if name == PARK:
            self.parked[(m.dst, m.txn)].append((m, tag))
            return
        if name == DROP:
            if m.kind == MsgKind.Ack and ctx is not None and m.src not in ctx.children:
                self.anomalies.append(f"t={self.now} ack from unknown child {m}")
            return
        if name == "conflict":
            self._violation("decision_conflict", m.txn, f"{m} reached a node in {ctx.state.name}")
            self.trace.append(
                TraceRecord(self.now, m.dst, m.txn, "conflict", str(m), ctx.state.name, ctx.state.name)
            )
            return
        self._cur_tag = tag
        args = {
            "handle_prepare_request": (m.src,),
            "handle_duplicate_prepare_request": (m.src,),
            "handle_prepare_retry": (m.src,),
            "handle_prepare_response": (m.src, m.status),
            "handle_commit_request": (m.src,),
            "handle_abort_request": (m.src,),
            "handle_ack": (m.src,),
            "handle_release": (m.src,),
            "handle_orphan_prepare_request": (m.src, m.dst, m.txn, self.now, stream.tdt),
            "handle_orphan_commit_request": (m.src, m.dst, m.txn),
            "handle_orphan_abort_request": (m.src, m.dst, m.txn),
            "handle_decision_inquiry": (m.src, m.dst, m.txn, self._logged_decision(m.dst, m.txn)),
        }[name]
        if m.kind == MsgKind.PrepareResp and m.outcome is not None and ctx is not None:
            self._tdt_answer_check(m)
        self._invoke(m.dst, m.txn, ctx, name, str(m), args, tag=tag)

    def _logged_decision(self, sid: int, txn: int) -> Optional[TwoPCState]:
        for e in reversed(self.streams[sid].entries):
            if e.txn == txn and e.kind == LogKind.CommitLog:
                return COMMIT
            if e.txn == txn and e.kind == LogKind.AbortLog:
                return ABORT
        # A participant votes OK only after its prepare log persists, so a
        # missing context means it never did. A root that logs its decision
        # would have a commit log. A log-free root can vouch for nothing.
        rec = self.txns.get(txn)
        if rec is None or sid != rec.root:
            return ABORT
        if self.config.variant.coordinator_commit_log or not rec.initial:
            return ABORT
        return None

    def _tdt_answer_check(self, m: Message) -> None:
        """An outcome served from a TDT must match the stream's own log."""
        logs = [
            e
            for e in self.streams[m.src].entries
            if e.txn == m.txn and e.kind in (LogKind.CommitLog, LogKind.AbortLog)
        ]
        want = UserOutcome.COMMITTED if logs and logs[-1].kind == LogKind.CommitLog else UserOutcome.ABORTED
        if logs and want != m.outcome:
            self._violation("tdt_mismatch", m.txn, str(m))

    # handler invocation

    def _invoke(self, sid, txn, ctx, name, input_desc, args, tag=None) -> None:
        if tag is not None:
            self._cur_tag = tag
        key = (sid, txn)
        prev = self._ctx_tag.get(key)
        if prev is not None and prev[0] == self.now:
            self._cur_tag = _tag_max(self._cur_tag, prev[1])
        self._ctx_tag[key] = (self.now, self._cur_tag)
        before = ctx.state.name if ctx is not None else "-"
        fn = getattr(self.machine, name)
        try:
            eff = fn(ctx, *args)
        except ProtocolError as exc:
            self._violation("protocol_error", txn, f"{name} at {sid}: {exc}")
            return
        if name == "add_intermediate_participant":
            rec = self.txns.get(txn)
            if rec is not None:
                rec.interm_adds.append((sid, args[0], ctx.state.name))
                rec.dyn += 1
        self._finish_step(sid, txn, ctx, name, input_desc, before, eff)

    def _finish_step(self, sid, txn, ctx, name, input_desc, before, eff: Effects) -> None:
        tag = self._cur_tag
        rec = self.txns.get(txn)
        for m in eff.sends:
            self._send(m, tag)
        after = ctx.state.name if ctx is not None else "-"
        world = self.projection(txn) if self.project and rec is not None else None
        self.trace.append(
            TraceRecord(self.now, sid, txn, name, input_desc, before, after, tuple(eff.describe()), world)
        )
        if ctx is not None and rec is not None:
            self._observe(sid, rec, ctx, before)
        for v in eff.violations:
            self._violation(v, txn)
        self.anomalies += eff.anomalies
        if eff.release_locks and rec is not None:
            rec.lock_release.setdefault(sid, (self.now, tag))
        if eff.user is not None:
            self._user_outcome(txn, eff.user, ctx, tag)
        for intent in eff.logs:
            self._log_intent(sid, ctx, intent, tag)
        if ctx is None:
            return
        step = self.machine.internal_action(ctx)
        if step is not None:
            self._invoke(sid, txn, ctx, step, "-", ())
            return
        self._arm_timer(sid, ctx)
        self._unpark(sid, txn)

    def _observe(self, sid, rec: TxnRecord, ctx: TxnContext, before: str) -> None:
        after = ctx.state
        if before in ("COMMIT", "ABORT") and after.name not in (before, "TOMBSTONE"):
            self._violation("decision_stability", ctx.txn, f"node {sid} {before}->{after.name}")
        if after.name != before and after in (TwoPCState.PREPARE, COMMIT, ABORT):
            rec.phase_children[(sid, after.name)] = tuple(sorted(ctx.children))
        if after == COMMIT:
            rec.committed_somewhere = True
        if after == TOMBSTONE and before != "TOMBSTONE":
            rec.reclaim.setdefault(sid, (self.now, self._cur_tag))
        rec.children_seen[sid] = rec.children_seen.get(sid, set()) | ctx.children
        states = {
            c.state
            for s in self.streams.values()
            for c in [s.contexts.get(ctx.txn)]
            if c is not None
        }
        if COMMIT in states and ABORT in states:
            self._violation("consistency", ctx.txn, "COMMIT and ABORT coexist")

    def _log_intent(self, sid, ctx, intent, tag) -> None:
        if not self.machine.logged or ctx is None:
            return
        stream = self.streams[sid]
        if intent.kind == LogKind.ClearLog:
            entry = ReplicatedLogEntry(LogKind.ClearLog, sid, -1, self.next_ts(), txn=ctx.txn)
            self.submit_log(sid, entry, AppendMode.ASYNC, ("clear", ctx.txn), tag=tag)
            return
        T.commit_2pc_logs_under_lock(self, stream, ctx, intent, tag)

    def _unpark(self, sid, txn) -> None:
        key = (sid, txn)
        while self.parked.get(key):
            waiting = self.parked.pop(key)
            ctx = self.streams[sid].contexts.get(txn)
            ready = []
            for m, tag in waiting:
                if self.machine.classify(ctx, m) == PARK:
                    self.parked[key].append((m, tag))
                else:
                    ready.append((m, tag))
            if not ready:
                return
            cur = self._cur_tag
            for m, tag in ready:
                self._deliver(m, _tag_max(tag, cur))

    def _violation(self, kind, txn, detail="") -> None:
        self.violations.append(Violation(kind, txn, self.now, detail))

    # logs and transfers

    def _on_persisted(self, p: LogPersisted) -> None:
        stream = self.streams[p.stream]
        req = stream.pending.get(p.req)
        entry = stream.persist(p.req)
        if entry is None:
            return
        token = req.token
        self._cur_tag = p.tag
        kind = token[0]
        if kind == "2pc":
            txn = token[1]
            ctx = stream.contexts.get(txn)
            # A recreated root decides only its retry, never the original outcome.
            recreated = ctx is not None and ctx.provenance == CoordinatorProvenance.RECREATED
            if entry.kind in (LogKind.CommitLog, LogKind.AbortLog) and self.config.variant.tdt and not recreated:
                outcome = UserOutcome.COMMITTED if entry.kind == LogKind.CommitLog else UserOutcome.ABORTED
                stream.tdt.record(txn, outcome, self.now)
            if ctx is not None:
                ctx.last_2pc_log_ts = max(ctx.last_2pc_log_ts, entry.ts)
                self._invoke(p.stream, txn, ctx, "handle_log_persisted", entry.kind.name, (entry.kind,), tag=p.tag)
        elif kind == "transfer_out":
            run = self.runs[token[1]]
            self.trace.append(TraceRecord(self.now, p.stream, None, "transfer_out_persisted", f"ts={entry.ts}"))
            T.on_transfer_out_persisted(self, run, entry)
        elif kind == "transfer_in":
            run = self.runs[token[1]]
            self.trace.append(TraceRecord(self.now, p.stream, None, "transfer_in_persisted", f"ts={entry.ts}"))
            T.on_transfer_in_persisted(self, run, entry)

    def _transfer_begin(self, rid: int) -> None:
        run = self.runs[rid]
        self._cur_tag = (0, 0)
        ev = run.event
        if ev.partition not in self.streams[ev.src].hosted_partitions:
            raise ScenarioError(
                f"transfer of partition {ev.partition} from {ev.src} at t={self.now}: "
                f"partition is homed on {self.home.get(ev.partition)}"
            )
        if not T.begin_transfer(self, run):
            self.waiting[ev.src].append(rid)
            return
        self.trace.append(
            TraceRecord(
                self.now,
                ev.src,
                None,
                "transfer_begin",
                f"p{ev.partition}:{ev.src}->{ev.dst}",
                outputs=(f"ts={ev.ts}", "txns=" + (",".join(map(str, run.txns)) or "-")),
            )
        )

    def _start_waiting(self, sid: int) -> None:
        queue, self.waiting[sid] = self.waiting[sid], []
        for rid in queue:
            self._transfer_begin(rid)

    # faults

    def _fault(self, f: FaultSpec) -> None:
        self._cur_tag = (0, 0)
        self.trace.append(
            TraceRecord(
                self.now,
                f.stream if f.stream is not None else -1,
                f.txn,
                f"fault_{f.kind}",
            )
        )
        if f.kind == "reclaim_context":
            self.streams[f.stream].reclaim_context(f.txn)
        elif f.kind == "internal_abort":
            ctx = self.streams[f.stream].contexts.get(f.txn)
            if ctx is not None and ctx.state == TwoPCState.RUNNING:
                if not self.machine.logged and ctx.blocked_from_logging:
                    # Without an abort log to defer, hold the abort itself
                    # until the transfer has recorded its destination.
                    self.held_aborts.add((f.stream, f.txn))
                    return
                self._invoke(f.stream, f.txn, ctx, "internal_abort", "fault", ())
        elif f.kind == "vote_no":
            ctx = self.streams[f.stream].contexts.get(f.txn)
            if ctx is not None:
                ctx.own_status = VoteStatus.NO
                step = self.machine.internal_action(ctx)
                if step is not None:
                    self._invoke(f.stream, f.txn, ctx, step, "-", ())
        elif f.kind == "user_retry":
            self._user_request(f.txn, True)
        elif f.kind == "crash":
            self._crash(f.stream)

    def _crash(self, sid: int) -> None:
        stream = self.streams[sid]
        lost = stream.crash_and_recover()
        for req in lost:
            token = req.token
            if token[0] == "transfer_out":
                run = self.runs[token[1]]
                T.rollback_transfer(self, run)
                self._start_waiting(sid)
            elif token[0] == "transfer_in":
                # The source's transfer-out log is durable: finish the move.
                self.submit_log(sid, req.entry, req.mode, token)
        # A running transaction lost here can only abort; tell the streams
        # its partitions moved to, which would otherwise wait forever.
        lost_txns: dict[int, set] = defaultdict(set)
        for e in stream.entries:
            if e.kind == LogKind.TransferOutLog:
                for txn in e.txns:
                    if txn not in stream.contexts and txn in self.txns:
                        lost_txns[txn].add(e.peer)
        for txn, peers in sorted(lost_txns.items()):
            eff = Effects()
            for peer in sorted(peers):
                eff.send(MsgKind.Abort, sid, peer, txn)
            self._finish_step(sid, txn, None, "abort_lost_transfers", "-", "-", eff)
        for txn, ctx in sorted(stream.contexts.items()):
            self.trace.append(
                TraceRecord(self.now, sid, txn, "recover_context", "-", "-", ctx.state.name)
            )
            if txn in self.txns:
                self._resume(sid, ctx)
        for (s, txn) in list(self.parked):
            if s == sid:
                self._unpark(sid, txn)

    def _migrated_state(self, sid: int, txn: int) -> Optional[TwoPCState]:
        state = None
        for e in self.streams[sid].entries:
            if e.kind == LogKind.TransferInLog:
                for m in e.migrated:
                    if m.txn == txn:
                        state = m.state if state is None else max(state, m.state)
        return state

    def _resume(self, sid: int, ctx: TxnContext) -> None:
        """Re-issue what a recovered context was waiting on."""
        if ctx.state == TwoPCState.RUNNING and self._migrated_state(sid, ctx.txn) == TwoPCState.RUNNING:
            # Unprepared work did not survive the crash. Data that moved
            # here already prepared is covered by the source's prepare log.
            self._invoke(sid, ctx.txn, ctx, "internal_abort", "recovery", ())
            return
        eff = Effects()
        if ctx.state == TwoPCState.PREPARE:
            for c in sorted(ctx.children):
                eff.send(MsgKind.PrepareReq, sid, c, ctx.txn)
        elif ctx.state in (COMMIT, ABORT):
            kind = MsgKind.Commit if ctx.state == COMMIT else MsgKind.Abort
            for c in sorted(ctx.children):
                eff.send(kind, sid, c, ctx.txn)
            if ctx.parent is not None:
                eff.send(MsgKind.Ack, sid, ctx.parent, ctx.txn)
        self._finish_step(sid, ctx.txn, ctx, "resume_after_recovery", "-", ctx.state.name, eff)

    def _arm_timer(self, sid: int, ctx: TxnContext) -> None:
        if not self.config.retry_timeout or (sid, ctx.txn) in self.timers:
            return
        if self._waiting_on_children(ctx) and self.retries[(sid, ctx.txn)] < MAX_RETRIES:
            self.retries[(sid, ctx.txn)] += 1
            self.timers.add((sid, ctx.txn))
            self.schedule(self.now + self.config.retry_timeout, Timer(sid, ctx.txn))

    @staticmethod
    def _waiting_on_children(ctx: TxnContext) -> bool:
        if ctx.state == TwoPCState.PREPARE:
            if not ctx.is_root and ctx.vote_sent is not None:
                return True
            return any(ctx.votes.get(c, VoteStatus.UNKNOWN) == VoteStatus.UNKNOWN for c in ctx.children)
        if ctx.state in (COMMIT, ABORT):
            return ctx.decision_log_persisted and not ctx.all_acked()
        return False

    def _timer(self, p: Timer) -> None:
        self.timers.discard((p.stream, p.txn))
        ctx = self.streams[p.stream].contexts.get(p.txn)
        if ctx is None or not self._waiting_on_children(ctx):
            return
        self._cur_tag = (0, 0)
        eff = Effects()
        if ctx.state == TwoPCState.PREPARE:
            for c in sorted(ctx.children):
                if ctx.votes.get(c, VoteStatus.UNKNOWN) == VoteStatus.UNKNOWN:
                    eff.send(MsgKind.PrepareReq, p.stream, c, p.txn)
            if not ctx.is_root and ctx.vote_sent is not None:
                # Ask the parent for the decision by repeating the vote.
                eff.send(MsgKind.PrepareResp, p.stream, ctx.parent, p.txn, ctx.vote_sent)
        else:
            kind = MsgKind.Commit if ctx.state == COMMIT else MsgKind.Abort
            for c in sorted(ctx.children):
                if not ctx.acks.get(c):
                    eff.send(kind, p.stream, c, p.txn)
        self._finish_step(p.stream, p.txn, ctx, "retry_timeout", "-", ctx.state.name, eff)

    # end of run

    def _quiescence_checks(self) -> None:
        if self.heap:
            return
        for txn, rec in sorted(self.txns.items()):
            if not self.outcomes.get(txn):
                self._violation("no_outcome", txn, "no user outcome at quiescence")
            for sid, stream in sorted(self.streams.items()):
                ctx = stream.contexts.get(txn)
                if ctx is not None and ctx.state not in (COMMIT, ABORT, TOMBSTONE):
                    self._violation("non_terminal", txn, f"node {sid} in {ctx.state.name}")
        if self.sent_count + self.scheduled_dups != self.delivered_count:
            self._violation(
                "event_conservation",
                None,
                f"sent {self.sent_count} + dup {self.scheduled_dups} != delivered {self.delivered_count}",
            )

    # views

    def projection(self, txn: int) -> tuple:
        rec = self.txns[txn]
        idx = self.index
        words = []
        for s in self.node_order:
            ctx = self.streams[s].contexts.get(txn)
            if ctx is None:
                words.append(K.pack_node(K.RUNNING, K.NONE, 0, 0, 0, 0))
                continue
            votes = 0
            for c, v in ctx.votes.items():
                if v in (VoteStatus.OK, VoteStatus.NO):
                    votes |= int(v) << (2 * idx[c])
            words.append(
                K.pack_node(
                    int(ctx.state),
                    K.NONE if ctx.parent is None else idx[ctx.parent],
                    _mask(ctx.children, idx),
                    _mask(ctx.interm_children, idx),
                    votes,
                    _mask([c for c, a in ctx.acks.items() if a], idx),
                )
            )
        msgs = [0] * K.N_MSG_WORDS
        for word, src, dst in rec.sent:
            msgs[word] |= 1 << (idx[src] * 8 + idx[dst])
        return tuple(words) + tuple(msgs) + (rec.dyn,)

    def initial_masks(self, txn: int) -> tuple[int, ...]:
        rec = self.txns[txn]
        return tuple(_mask(rec.static_children.get(s, ()), self.index) for s in self.node_order)

    def abstract_steps(self, txn: int):
        """``(CheckConfig, init, steps)`` for replaying ``txn`` against the
        checker's transition relation."""
        from .checker.explore import CheckConfig

        if not self.project:
            raise ValueError("projections exist only for abstract runs on at most 8 streams")
        cfg = CheckConfig(len(self.node_order), self.initial_masks(txn), self.index[self.txns[txn].root])
        steps = [r.world for r in self.trace if r.txn == txn and r.world is not None]
        return cfg, cfg.initial(), steps

    def txn_states(self, txn: int) -> dict[int, TwoPCState]:
        out = {}
        for sid, stream in sorted(self.streams.items()):
            ctx = stream.contexts.get(txn)
            if ctx is not None:
                out[sid] = ctx.state
        return out

    def final_outcome(self, txn: int) -> Optional[UserOutcome]:
        recs = self.outcomes.get(txn)
        return recs[-1].outcome if recs else None

    def log_stream_tree(self, txn: int) -> T.LogStreamTree:
        rec = self.txns[txn]
        records: dict[int, set] = defaultdict(set)
        for s, kids in rec.static_children.items():
            if s != rec.root:
                records[s] |= set(kids)
        for src, dst in rec.transfers:
            records[src].add(dst)
        return T.build_log_stream_tree(rec.root, rec.initial, records)

    def required_streams(self, txn: int) -> set[int]:
        """Streams holding the txn's data: each partition's home when the
        txn began, followed through every persisted move that carried it."""
        rec = self.txns[txn]
        if not rec.start_homes:
            return set()
        moves = sorted(
            (e.ts, e.partition, e.peer, sid)
            for sid, s in self.streams.items()
            for e in s.entries
            if e.kind == LogKind.TransferInLog and txn in e.txns
        )
        where = dict(rec.start_homes)
        for _, p, src, dst in moves:
            if where.get(p) == src:
                where[p] = dst
        return set(where.values())

    def entries(self) -> dict[int, list]:
        return {sid: list(s.entries) for sid, s in self.streams.items()}

    def phase_sets(self, txn: int) -> dict[str, dict[int, tuple]]:
        out: dict[str, dict[int, tuple]] = defaultdict(dict)
        for (sid, phase), kids in sorted(self.txns[txn].phase_children.items()):
            out[phase][sid] = kids
        return dict(out)

    def header_lines(self) -> list[str]:
        lines = [
            f"trace version={TRACE_VERSION} scenario={self.name} mode={self.config.mode.value} "
            f"variant={self.config.variant.name} seed={self.config.seed}"
        ]
        for txn, rec in sorted(self.txns.items()):
            lines.append(
                f"txn id={txn} root={self.index[rec.root]} nodes={'.'.join(map(str, self.node_order))} "
                f"init={'.'.join(format(m, 'x') for m in self.initial_masks(txn))}"
            )
        return lines

    def trace_text(self) -> str:
        return "\n".join(self.header_lines() + [r.encode() for r in self.trace]) + "\n"

    def trace_hash(self) -> str:
        return hashlib.sha256(self.trace_text().encode()).hexdigest()

    def safety_violations(self) -> list[Violation]:
        return [v for v in self.violations if v.kind not in LIVENESS_KINDS]

    def liveness_violations(self) -> list[Violation]:
        return [v for v in self.violations if v.kind in LIVENESS_KINDS]


def _mask(nodes, idx) -> int:
    m = 0
    for c in nodes:
        m |= 1 << idx[c]
    return m


def _ints(xs) -> str:
    return ",".join(str(x) for x in sorted(xs)) or "-"


def run_to_quiescence(world: World) -> World:
    return world.run()
