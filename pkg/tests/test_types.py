import pytest
from hypothesis import given
from hypothesis import strategies as st

from tree2pc.types import (
    EncodingError,
    LogKind,
    Message,
    MigratedContext,
    MsgKind,
    ReplicatedLogEntry,
    TwoPCState,
    UserOutcome,
    VoteStatus,
    decode_log_entry,
    decode_message,
    message_ordering_key,
)

ids = st.integers(min_value=0, max_value=500)
small_sets = st.lists(ids, max_size=5, unique=True).map(lambda xs: tuple(sorted(xs)))


@st.composite
def messages(draw):
    kind = draw(st.sampled_from(list(MsgKind)))
    src = draw(ids)
    dst = draw(ids.filter(lambda d: d != src))
    status = outcome = None
    if kind == MsgKind.PrepareResp:
        status = draw(st.sampled_from([VoteStatus.OK, VoteStatus.NO, VoteStatus.PREPARE_UNKNOWN]))
        outcome = draw(st.none() | st.sampled_from([UserOutcome.COMMITTED, UserOutcome.ABORTED]))
    return Message(kind, src, dst, draw(ids), status, outcome)


@st.composite
def log_entries(draw):
    kind = draw(st.sampled_from(list(LogKind)))
    base = dict(kind=kind, stream=draw(ids), seq=draw(ids), ts=draw(ids))
    if kind in (LogKind.TransferOutLog, LogKind.TransferInLog):
        base.update(partition=draw(ids), peer=draw(ids), txns=draw(small_sets))
        if kind == LogKind.TransferInLog:
            base["migrated"] = tuple(
                MigratedContext(
                    t,
                    draw(st.sampled_from(list(TwoPCState))),
                    tuple((draw(ids), draw(ids)) for _ in range(draw(st.integers(0, 3)))),
                    draw(small_sets),
                )
                for t in base["txns"]
            )
        return ReplicatedLogEntry(**base)
    base["txn"] = draw(ids)
    if kind != LogKind.ClearLog:
        base.update(
            participants=draw(small_sets),
            incr_parts=draw(small_sets),
            parent=draw(st.none() | ids),
            partitions=draw(small_sets),
        )
    if kind == LogKind.PrepareLog:
        base["status"] = draw(st.sampled_from([VoteStatus.OK, VoteStatus.NO]))
    return ReplicatedLogEntry(**base)


@given(messages())
def test_message_roundtrip(m):
    assert decode_message(m.encode()) == m


@given(log_entries())
def test_log_entry_roundtrip(e):
    assert decode_log_entry(e.encode()) == e


@given(st.lists(messages(), max_size=12))
def test_message_order_is_total_and_stable(ms):
    # Distinct messages have distinct keys, so input order never matters.
    assert len({message_ordering_key(m) for m in ms}) == len(set(ms))
    assert sorted(ms, key=message_ordering_key) == sorted(reversed(ms), key=message_ordering_key)


def test_message_validation():
    with pytest.raises(ValueError):
        Message(MsgKind.Commit, 1, 1, 0)
    with pytest.raises(ValueError):
        Message(MsgKind.PrepareResp, 1, 2, 0)
    with pytest.raises(ValueError):
        Message(MsgKind.Commit, 1, 2, 0, VoteStatus.OK)
    with pytest.raises(ValueError):
        Message(MsgKind.PrepareResp, 1, 2, 0, VoteStatus.UNKNOWN)


def test_log_entry_validation():
    with pytest.raises(ValueError):
        ReplicatedLogEntry(LogKind.TransferOutLog, 1, 0, 0)
    with pytest.raises(ValueError):
        ReplicatedLogEntry(LogKind.CommitLog, 1, 0, 0)


def test_decode_rejects_garbage():
    with pytest.raises(EncodingError):
        decode_message("log kind=Commit")
    with pytest.raises(EncodingError):
        decode_message("msg kind=Commit src=1")
    with pytest.raises(EncodingError):
        decode_log_entry("msg kind=Commit src=1 dst=2 txn=3")
    with pytest.raises(EncodingError):
        decode_message("msg kind=Commit src")


def test_all_participants_unions_lists():
    e = ReplicatedLogEntry(LogKind.CommitLog, 1, 0, 0, txn=1, participants=(2, 3), incr_parts=(3, 4))
    assert e.all_participants() == {2, 3, 4}
    assert e.is_2pc
