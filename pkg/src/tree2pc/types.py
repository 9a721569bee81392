"""Identifiers, enumerations, messages and log entries shared by every module.

Every value type here has a canonical one-line ``key=value`` text form used
in trace files; ``decode_message(m.encode()) == m`` and likewise for log
entries.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NewType, Optional

LogStreamId = NewType("LogStreamId", int)
PartitionId = NewType("PartitionId", int)
TxnId = NewType("TxnId", int)

# The user/scheduler is not a log stream; it gets a reserved id outside the
# range scenarios may use.
USER = LogStreamId(9999)


class TwoPCState(enum.IntEnum):
    RUNNING = 0
    PREPARE = 1
    COMMIT = 2
    ABORT = 3
    TOMBSTONE = 4


class VoteStatus(enum.IntEnum):
    UNKNOWN = 0
    OK = 1
    NO = 2
    PREPARE_UNKNOWN = 3


class UserOutcome(enum.IntEnum):
    COMMITTED = 0
    ABORTED = 1
    TRANS_UNKNOWN = 2


class MsgKind(enum.IntEnum):
    PrepareReq = 0
    PrepareResp = 1
    Commit = 2
    Abort = 3
    Ack = 4
    Release = 5


class LogKind(enum.IntEnum):
    PrepareLog = 0
    CommitLog = 1
    AbortLog = 2
    ClearLog = 3
    TransferOutLog = 4
    TransferInLog = 5


TWO_PC_LOGS = frozenset({LogKind.PrepareLog, LogKind.CommitLog, LogKind.AbortLog})


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    kind: MsgKind
    src: int
    dst: int
    txn: int
    status: Optional[VoteStatus] = None
    # Set only on PrepareResp answered from the transaction data table.
    outcome: Optional[UserOutcome] = None

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"message to self: {self.src}")
        if (self.kind == MsgKind.PrepareResp) != (self.status is not None):
            raise ValueError("PrepareResp carries exactly one status, others none")
        if self.status == VoteStatus.UNKNOWN:
            raise ValueError("UNKNOWN is not a vote that can be sent")

    def ordering_key(self) -> tuple:
        return (
            self.txn,
            int(self.kind),
            self.src,
            self.dst,
            -1 if self.status is None else int(self.status),
            -1 if self.outcome is None else int(self.outcome),
        )

    def encode(self) -> str:
        parts = [f"kind={self.kind.name}", f"src={self.src}", f"dst={self.dst}", f"txn={self.txn}"]
        if self.status is not None:
            parts.append(f"status={self.status.name}")
        if self.outcome is not None:
            parts.append(f"outcome={self.outcome.name}")
        return "msg " + " ".join(parts)

    def __str__(self):
        extra = f"[{self.status.name}]" if self.status is not None else ""
        return f"{self.kind.name}{extra}({self.src}->{self.dst})"


def message_ordering_key(m: Message) -> tuple:
    return m.ordering_key()


@dataclass(frozen=True)
class MigratedContext:
    """Snapshot of one transaction context carried by a transfer-in log."""

    txn: int
    state: TwoPCState
    # (stream, seq) of every 2PC log the source had persisted for this txn.
    log_refs: tuple[tuple[int, int], ...] = ()
    partitions: tuple[int, ...] = ()

    def encode(self) -> str:
        refs = ".".join(f"{s}@{q}" for s, q in self.log_refs) or "-"
        parts = ".".join(str(p) for p in self.partitions) or "-"
        return f"{self.txn}:{self.state.name}:{refs}:{parts}"

    @classmethod
    def decode(cls, text: str) -> "MigratedContext":
        txn, state, refs, parts = text.split(":")
        log_refs = ()
        if refs != "-":
            log_refs = tuple(tuple(int(x) for x in r.split("@")) for r in refs.split("."))
        partitions = () if parts == "-" else tuple(int(p) for p in parts.split("."))
        return cls(int(txn), TwoPCState[state], log_refs, partitions)


@dataclass(frozen=True)
class ReplicatedLogEntry:
    kind: LogKind
    stream: int
    seq: int
    ts: int
    txn: Optional[int] = None
    participants: tuple[int, ...] = ()
    incr_parts: tuple[int, ...] = ()
    parent: Optional[int] = None
    status: Optional[VoteStatus] = None
    partitions: tuple[int, ...] = ()
    # transfer logs
    partition: Optional[int] = None
    peer: Optional[int] = None
    txns: tuple[int, ...] = ()
    migrated: tuple[MigratedContext, ...] = field(default=())

    def __post_init__(self):
        transfer = self.kind in (LogKind.TransferOutLog, LogKind.TransferInLog)
        if transfer and (self.partition is None or self.peer is None):
            raise ValueError("transfer logs need partition and peer")
        if not transfer and self.txn is None:
            raise ValueError(f"{self.kind.name} needs a txn")

    @property
    def is_2pc(self) -> bool:
        return self.kind in TWO_PC_LOGS

    def all_participants(self) -> frozenset:
        return frozenset(self.participants) | frozenset(self.incr_parts)

    def encode(self) -> str:
        p = [f"kind={self.kind.name}", f"stream={self.stream}", f"seq={self.seq}", f"ts={self.ts}"]
        if self.txn is not None:
            p.append(f"txn={self.txn}")
        if self.kind in TWO_PC_LOGS:
            p.append("participants=" + _ints(self.participants))
            p.append("incr=" + _ints(self.incr_parts))
            p.append("parent=" + ("-" if self.parent is None else str(self.parent)))
            p.append("partitions=" + _ints(self.partitions))
        if self.status is not None:
            p.append(f"status={self.status.name}")
        if self.partition is not None:
            p.append(f"partition={self.partition}")
            p.append(f"peer={self.peer}")
            p.append("txns=" + _ints(self.txns))
        if self.kind == LogKind.TransferInLog:
            p.append("migrated=" + (";".join(m.encode() for m in self.migrated) or "-"))
        return "log " + " ".join(p)


def _ints(xs) -> str:
    return ",".join(str(x) for x in xs) or "-"


def _parse_ints(s: str) -> tuple[int, ...]:
    return () if s == "-" else tuple(int(x) for x in s.split(","))


def parse_record(line: str) -> tuple[str, dict[str, str]]:
    """Split ``tag k=v k=v`` into the tag and an ordered field dict."""
    tag, _, rest = line.strip().partition(" ")
    fields: dict[str, str] = {}
    for tok in rest.split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise EncodingError(f"bad field {tok!r} in {line!r}")
        fields[key] = val
    return tag, fields


def decode_message(line: str) -> Message:
    tag, f = parse_record(line)
    if tag != "msg":
        raise EncodingError(f"not a message record: {line!r}")
    try:
        return Message(
            MsgKind[f["kind"]],
            int(f["src"]),
            int(f["dst"]),
            int(f["txn"]),
            VoteStatus[f["status"]] if "status" in f else None,
            UserOutcome[f["outcome"]] if "outcome" in f else None,
        )
    except KeyError as exc:
        raise EncodingError(f"missing/unknown field {exc} in {line!r}") from None


def decode_log_entry(line: str) -> ReplicatedLogEntry:
    tag, f = parse_record(line)
    if tag != "log":
        raise EncodingError(f"not a log record: {line!r}")
    kind = LogKind[f["kind"]]
    kw = dict(kind=kind, stream=int(f["stream"]), seq=int(f["seq"]), ts=int(f["ts"]))
    if "txn" in f:
        kw["txn"] = int(f["txn"])
    if kind in TWO_PC_LOGS:
        kw["participants"] = _parse_ints(f["participants"])
        kw["incr_parts"] = _parse_ints(f["incr"])
        kw["parent"] = None if f["parent"] == "-" else int(f["parent"])
        kw["partitions"] = _parse_ints(f["partitions"])
    if "status" in f:
        kw["status"] = VoteStatus[f["status"]]
    if "partition" in f:
        kw["partition"] = int(f["partition"])
        kw["peer"] = int(f["peer"])
        kw["txns"] = _parse_ints(f["txns"])
    if "migrated" in f and f["migrated"] != "-":
        kw["migrated"] = tuple(MigratedContext.decode(m) for m in f["migrated"].split(";"))
    return ReplicatedLogEntry(**kw)
