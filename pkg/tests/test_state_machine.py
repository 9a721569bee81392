import pytest

from tree2pc.state_machine import (
    DROP,
    PARK,
    LogIntent,
    Machine,
    Mode,
    ProtocolError,
    ProtocolVariant,
    TxnContext,
)
from tree2pc.types import LogKind, Message, MsgKind, TwoPCState, UserOutcome, VoteStatus

RUNNING, PREPARE, COMMIT, ABORT, TOMBSTONE = list(TwoPCState)
OK, NO = VoteStatus.OK, VoteStatus.NO


def sends(eff):
    return [(m.kind, m.src, m.dst) + ((m.status,) if m.status is not None else ()) for m in eff.sends]


def root(children=(1, 2)):
    return TxnContext(1, 0, children=set(children), is_root=True, has_data=False)


def part(node, children=()):
    return TxnContext(1, node, children=set(children))


# variants


def test_variant_presets_and_flags():
    assert ProtocolVariant.parse("baseline") == ProtocolVariant()
    rel = ProtocolVariant.parse("release")
    assert rel.coordinator_commit_log and rel.release_messages
    assert ProtocolVariant.parse("tdt").unknown_states
    assert ProtocolVariant.parse("unknown+tdt").name == "tdt"
    assert ProtocolVariant.parse("clear_stage,d2pc_clear").name == "d2pc"
    with pytest.raises(ValueError):
        ProtocolVariant.parse("bogus")
    with pytest.raises(ValueError):
        ProtocolVariant(release_messages=True)
    with pytest.raises(ValueError):
        ProtocolVariant(tdt=True)


def test_clear_log_writers():
    assert not ProtocolVariant().writes_clear_log(True)
    assert not ProtocolVariant().writes_clear_log(False)
    assert ProtocolVariant.parse("clear_stage").writes_clear_log(False)
    assert ProtocolVariant.parse("release").writes_clear_log(True)
    d2pc = ProtocolVariant.parse("d2pc")
    assert d2pc.writes_clear_log(True) and not d2pc.writes_clear_log(False)


# abstract mode, one full commit round


def test_abstract_commit_round():
    m = Machine(Mode.ABSTRACT)
    r, a, b = root(), part(1, [3]), part(2)
    leaf = part(3)
    eff = m.handle_prepare_request(r, None)
    assert r.state == PREPARE
    assert sends(eff) == [(MsgKind.PrepareReq, 0, 1), (MsgKind.PrepareReq, 0, 2)]

    eff = m.handle_prepare_request(a, 0)
    assert a.parent == 0 and a.state == PREPARE
    assert sends(eff) == [(MsgKind.PrepareReq, 1, 3)]
    # an intermediate node cannot vote before its child
    assert m.internal_action(a) is None
    m.handle_prepare_request(leaf, 1)
    assert m.internal_action(leaf) == "handle_2pc_commit_decided"
    assert sends(m.handle_2pc_commit_decided(leaf)) == [(MsgKind.PrepareResp, 3, 1, OK)]
    m.handle_prepare_response(a, 3, OK)
    assert sends(m.handle_2pc_commit_decided(a)) == [(MsgKind.PrepareResp, 1, 0, OK)]
    m.handle_prepare_request(b, 0)
    m.handle_2pc_commit_decided(b)

    m.handle_prepare_response(r, 1, OK)
    assert m.internal_action(r) is None
    m.handle_prepare_response(r, 2, OK)
    eff = m.handle_2pc_commit_decided(r)
    assert r.state == COMMIT and eff.user == UserOutcome.COMMITTED
    assert sends(eff) == [(MsgKind.Commit, 0, 1), (MsgKind.Commit, 0, 2)]

    eff = m.handle_commit_request(a, 0)
    assert a.state == COMMIT
    assert sends(eff) == [(MsgKind.Commit, 1, 3), (MsgKind.Ack, 1, 0)]
    m.handle_ack(r, 1)
    assert not m.forget_enabled(r)
    m.handle_ack(r, 2)
    assert m.internal_action(r) == "forget_ctx"
    m.forget_ctx(r)
    assert r.state == TOMBSTONE


def test_no_vote_aborts_and_root_reports_aborted():
    m = Machine(Mode.ABSTRACT)
    r = root()
    m.handle_prepare_request(r, None)
    m.handle_prepare_response(r, 1, NO)
    assert not m.commit_enabled(r)
    eff = m.handle_2pc_abort_decided(r)
    assert r.state == ABORT and eff.user == UserOutcome.ABORTED
    assert sends(eff) == [(MsgKind.Abort, 0, 1), (MsgKind.Abort, 0, 2)]


def test_mutant_commits_despite_no():
    m = Machine(Mode.ABSTRACT, mutant_commit_on_no=True)
    r = root()
    m.handle_prepare_request(r, None)
    m.handle_prepare_response(r, 1, NO)
    assert not m.commit_enabled(r)
    m.handle_prepare_response(r, 2, OK)
    assert m.internal_action(r) == "handle_2pc_commit_decided"


def test_internal_abort_only_while_running():
    m = Machine(Mode.ABSTRACT)
    p = part(1, [3])
    p.parent = 0
    eff = m.internal_abort(p)
    assert p.state == ABORT
    assert sends(eff) == [(MsgKind.Abort, 1, 3), (MsgKind.PrepareResp, 1, 0, NO)]
    with pytest.raises(ProtocolError):
        m.internal_abort(p)


def test_orphan_prepare_answers_by_variant():
    base = Machine(Mode.ABSTRACT)
    eff = base.handle_orphan_prepare_request(None, 0, 1, 7)
    assert sends(eff) == [(MsgKind.PrepareResp, 1, 0, NO)]
    unk = Machine(Mode.LOGGED, ProtocolVariant.parse("unknown"))
    eff = unk.handle_orphan_prepare_request(None, 0, 1, 7)
    assert sends(eff) == [(MsgKind.PrepareResp, 1, 0, VoteStatus.PREPARE_UNKNOWN)]


def test_intermediate_participants_merge_at_next_stage():
    m = Machine(Mode.ABSTRACT)
    p = part(1)
    m.add_intermediate_participant(p, 5)
    assert not m.can_add(p, 5) and not m.can_add(p, 1)
    with pytest.raises(ProtocolError):
        m.add_intermediate_participant(p, 5)
    eff = m.handle_prepare_request(p, 0)
    assert p.children == {5} and p.incr_children == {5} and not p.interm_children
    assert sends(eff) == [(MsgKind.PrepareReq, 1, 5)]


# logged mode


def test_logged_participant_votes_after_prepare_log():
    m = Machine(Mode.LOGGED)
    p = part(1)
    eff = m.handle_prepare_request(p, 0)
    assert p.state == RUNNING and p.preparing
    assert eff.logs == [LogIntent(LogKind.PrepareLog, sync=True)]
    assert m.internal_action(p) is None
    m.handle_log_persisted(p, LogKind.PrepareLog)
    assert p.state == PREPARE
    assert sends(m.handle_2pc_commit_decided(p)) == [(MsgKind.PrepareResp, 1, 0, OK)]
    eff = m.handle_commit_request(p, 0)
    # the ack waits for the commit log
    assert sends(eff) == [] and eff.logs == [LogIntent(LogKind.CommitLog, sync=True)]
    eff = m.handle_log_persisted(p, LogKind.CommitLog)
    assert sends(eff) == [(MsgKind.Ack, 1, 0)] and eff.release_locks


def test_logged_duplicate_prepare_deferred_until_own_log():
    m = Machine(Mode.LOGGED)
    p = part(1, [2])
    m.handle_prepare_request(p, 0)
    # a second parent in a circular transfer
    assert m.classify(p, Message(MsgKind.PrepareReq, 2, 1, 1)) == "handle_duplicate_prepare_request"
    eff = m.handle_duplicate_prepare_request(p, 2)
    assert sends(eff) == []
    eff = m.handle_log_persisted(p, LogKind.PrepareLog)
    # answered directly, without waiting on downstream votes
    assert sends(eff) == [(MsgKind.PrepareResp, 1, 2, OK)]


def test_release_variant_root_sends_release_and_logs():
    m = Machine(Mode.LOGGED, ProtocolVariant.parse("release"))
    r = root([1])
    m.handle_prepare_request(r, None)
    m.handle_prepare_response(r, 1, OK)
    eff = m.handle_2pc_commit_decided(r)
    assert eff.user == UserOutcome.COMMITTED
    assert sends(eff) == [(MsgKind.Release, 0, 1)]
    assert eff.logs == [LogIntent(LogKind.CommitLog, sync=True)]
    eff = m.handle_log_persisted(r, LogKind.CommitLog)
    assert sends(eff) == [(MsgKind.Commit, 0, 1)]


def test_commit_after_reply_root_waits_for_log_before_commit():
    m = Machine(Mode.LOGGED, ProtocolVariant.parse("commit_after_reply"))
    r = root([1])
    m.handle_prepare_request(r, None)
    m.handle_prepare_response(r, 1, OK)
    eff = m.handle_2pc_commit_decided(r)
    assert eff.user == UserOutcome.COMMITTED and sends(eff) == []


def test_decision_inquiry():
    m = Machine(Mode.LOGGED)
    assert sends(m.handle_decision_inquiry(None, 1, 0, 9, COMMIT)) == [(MsgKind.Commit, 0, 1)]
    assert sends(m.handle_decision_inquiry(None, 1, 0, 9, ABORT)) == [(MsgKind.Abort, 0, 1)]
    assert sends(m.handle_decision_inquiry(None, 1, 0, 9, None)) == []
    with pytest.raises(ProtocolError):
        m.handle_decision_inquiry(part(0), 1, 0, 9, None)


def test_classify():
    m = Machine(Mode.ABSTRACT)
    p = part(1)
    p.parent = 0
    req = Message(MsgKind.PrepareReq, 0, 1, 1)
    assert m.classify(p, req) == "handle_prepare_request"
    assert m.classify(None, req) == "handle_orphan_prepare_request"
    assert m.classify(p, Message(MsgKind.Ack, 2, 1, 1)) == PARK
    assert m.classify(None, Message(MsgKind.Ack, 2, 1, 1)) == DROP
    p.blocked_from_logging = True
    # abstract mode holds the vote while a transfer moves the data
    assert m.classify(p, req) == PARK
    assert Machine(Mode.LOGGED).classify(p, req) == "handle_prepare_request"
    p.blocked_from_logging = False
    p.state = COMMIT
    assert m.classify(p, Message(MsgKind.Abort, 0, 1, 1)) == "conflict"
    assert m.classify(p, Message(MsgKind.Commit, 0, 1, 1)) == "handle_orphan_commit_request"


def test_context_copy_is_deep():
    p = part(1, [2])
    q = p.copy()
    q.children.add(3)
    assert p.children == {2}
