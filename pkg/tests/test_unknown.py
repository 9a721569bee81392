import pytest
from hypothesis import given
from hypothesis import strategies as st

from tree2pc.unknown import (
    DEFAULT_TDT_RETENTION,
    CoordinatorProvenance,
    TransactionDataTable,
    resolve_inquiry,
    root_user_response,
)
from tree2pc.types import UserOutcome, VoteStatus

OK, NO, PU = VoteStatus.OK, VoteStatus.NO, VoteStatus.PREPARE_UNKNOWN
FRESH, RECREATED = CoordinatorProvenance.FRESH, CoordinatorProvenance.RECREATED


def test_inquiry_without_context():
    assert resolve_inquiry(1, 0, unknown_states=False).status == NO
    assert resolve_inquiry(1, 0, unknown_states=True).status == PU


def test_inquiry_answered_from_tdt_within_retention():
    tdt = TransactionDataTable(retention=100)
    tdt.record(1, UserOutcome.COMMITTED, now=10)
    tdt.record(2, UserOutcome.ABORTED, now=10)
    a = resolve_inquiry(1, 110, True, tdt)
    assert (a.status, a.outcome) == (OK, UserOutcome.COMMITTED)
    assert resolve_inquiry(2, 50, True, tdt).status == NO
    # expired
    assert resolve_inquiry(1, 111, True, tdt).status == PU


def test_tdt_is_write_once():
    tdt = TransactionDataTable()
    tdt.record(1, UserOutcome.COMMITTED, 0)
    tdt.record(1, UserOutcome.COMMITTED, 5)
    assert tdt.entries[1] == (UserOutcome.COMMITTED, 0)
    with pytest.raises(ValueError):
        tdt.record(1, UserOutcome.ABORTED, 6)
    with pytest.raises(ValueError):
        tdt.record(2, UserOutcome.TRANS_UNKNOWN, 0)


def test_default_retention_is_thirty_minutes_of_ticks():
    assert DEFAULT_TDT_RETENTION == 30 * 60 * 1000


votes = st.lists(st.sampled_from([OK, NO, PU]), max_size=6)


@given(votes, st.sampled_from([FRESH, RECREATED]), st.booleans())
def test_root_response_never_commits_without_all_ok(vs, prov, unknown):
    out = root_user_response(prov, vs, unknown)
    if out == UserOutcome.COMMITTED:
        assert all(v == OK for v in vs)
    if out == UserOutcome.TRANS_UNKNOWN:
        assert unknown and prov == RECREATED and PU in vs and NO not in vs


def test_root_response_table():
    assert root_user_response(FRESH, [OK, OK]) == UserOutcome.COMMITTED
    assert root_user_response(FRESH, [OK, PU]) == UserOutcome.ABORTED
    assert root_user_response(RECREATED, [OK, PU]) == UserOutcome.TRANS_UNKNOWN
    assert root_user_response(RECREATED, [PU, NO]) == UserOutcome.ABORTED
    assert root_user_response(RECREATED, [OK, PU], unknown_states=False) == UserOutcome.ABORTED
