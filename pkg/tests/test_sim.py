import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tree2pc.scenario import run_check
from tree2pc.sim import (
    FaultSpec,
    ScenarioError,
    SimConfig,
    Topology,
    TransferSpec,
    TxnSpec,
    World,
    run_to_quiescence,
)
from tree2pc.state_machine import Mode, ProtocolVariant
from tree2pc.types import LogKind, TwoPCState, UserOutcome

VARIANTS = ["baseline", "clear_stage", "commit_after_reply", "release", "d2pc", "unknown", "tdt"]


def world(variant="baseline", mode=Mode.LOGGED, txns=None, transfers=(), faults=(), **cfg):
    topo = Topology(0, (1, 2, 3), {1: 1, 2: 2, 3: 3, 4: 1})
    txns = txns or [TxnSpec(1, (1, 2, 3), commit_at=1)]
    return World(SimConfig(variant=ProtocolVariant.parse(variant), mode=mode, **cfg), topo, txns, transfers, faults)


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_commits_cleanly(variant):
    w = world(variant).run()
    assert w.final_outcome(1) == UserOutcome.COMMITTED
    assert not w.violations
    assert all(s in (TwoPCState.TOMBSTONE, TwoPCState.COMMIT) for s in w.txn_states(1).values())


def test_abstract_mode_rejects_variants():
    with pytest.raises(ValueError):
        SimConfig(mode=Mode.ABSTRACT, variant=ProtocolVariant.parse("release"))
    with pytest.raises(ValueError):
        SimConfig(msg_delay=0)


def test_same_seed_same_trace_different_seed_may_differ():
    a = world(jitter=3, seed=11).run()
    b = world(jitter=3, seed=11).run()
    assert a.trace_text() == b.trace_text()
    hashes = {world(jitter=3, seed=s).run().trace_hash() for s in range(6)}
    assert len(hashes) > 1


def test_trace_header_and_step_format():
    w = world(mode=Mode.ABSTRACT).run()
    lines = w.trace_text().splitlines()
    assert lines[0].startswith("trace version=1 ")
    assert lines[1].startswith("txn id=1 root=0 nodes=0.1.2.3 init=")
    steps = [l for l in lines if l.startswith("step ")]
    assert all(" handler=" in l and " out=" in l for l in steps)
    assert any(" world=" in l for l in steps)


def test_one_phase_single_stream():
    w = world(txns=[TxnSpec(1, (1, 4), commit_at=1)]).run()
    assert w.txns[1].root == 1
    assert w.final_outcome(1) == UserOutcome.COMMITTED
    assert not any(m.name == "PrepareReq" for m in w.txns[1].msgs)
    with pytest.raises(ScenarioError):
        world(txns=[TxnSpec(1, (1, 2), one_phase=True)]).run()


def test_vote_no_aborts_everywhere():
    w = world(faults=[FaultSpec("vote_no", at=0, stream=2, txn=1)]).run()
    assert w.final_outcome(1) == UserOutcome.ABORTED
    assert not w.violations


def test_internal_abort_before_commit():
    w = world(faults=[FaultSpec("internal_abort", at=0, stream=3, txn=1)], mode=Mode.ABSTRACT).run()
    assert w.final_outcome(1) == UserOutcome.ABORTED
    assert not w.violations


def test_duplicate_messages_are_harmless():
    for seed in range(20):
        w = world("release", duplicate_prob=0.5, seed=seed, jitter=2).run()
        assert w.final_outcome(1) == UserOutcome.COMMITTED, seed
        assert not w.violations
        assert w.txns[1].dup_msgs > 0 or seed


def test_lost_response_without_unknown_states_lies():
    faults = [
        FaultSpec("drop_user_response", at=0, txn=1),
        FaultSpec("reclaim_context", at=100, stream=1, txn=1),
        FaultSpec("reclaim_context", at=100, stream=2, txn=1),
        FaultSpec("reclaim_context", at=100, stream=3, txn=1),
        FaultSpec("reclaim_context", at=100, stream=0, txn=1),
        FaultSpec("user_retry", at=200, txn=1),
    ]
    lie = world("baseline", faults=faults).run()
    assert lie.final_outcome(1) == UserOutcome.ABORTED
    assert [v.kind for v in lie.violations] == ["lying_abort"]
    honest = world("unknown", faults=faults).run()
    assert honest.final_outcome(1) == UserOutcome.TRANS_UNKNOWN
    assert not honest.violations
    resolved = world("tdt", faults=faults).run()
    assert resolved.final_outcome(1) == UserOutcome.COMMITTED
    assert not resolved.violations


def test_tdt_expired_falls_back_to_unknown():
    faults = [
        FaultSpec("drop_user_response", at=0, txn=1),
        *[FaultSpec("reclaim_context", at=100, stream=s, txn=1) for s in (0, 1, 2, 3)],
        FaultSpec("user_retry", at=200, txn=1),
    ]
    w = world("tdt", faults=faults, tdt_retention=10).run()
    assert w.final_outcome(1) == UserOutcome.TRANS_UNKNOWN


def test_participant_crash_after_prepare_log_recovers_and_commits():
    w = world("release", faults=[FaultSpec("crash", at=4, stream=2)], retry_timeout=20).run()
    assert w.final_outcome(1) == UserOutcome.COMMITTED
    assert not w.violations
    # the recovered participant re-sends its vote from the prepare log
    recovered = [r for r in w.trace if r.node == 2 and r.handler == "resume_after_recovery"]
    assert recovered and recovered[0].after == "PREPARE"


def test_participant_crash_before_prepare_log_aborts():
    # the prepare log is still in flight at t=3 and is lost
    w = world("release", faults=[FaultSpec("crash", at=3, stream=2)], retry_timeout=20).run()
    assert w.final_outcome(1) == UserOutcome.ABORTED
    assert not w.violations


def test_transfer_during_running_joins_the_tree():
    w = world(transfers=[TransferSpec(0, 1, 1, 2)], txns=[TxnSpec(1, (1, 3), commit_at=5)]).run()
    assert w.final_outcome(1) == UserOutcome.COMMITTED
    assert (1, 2, "RUNNING") in w.txns[1].interm_adds
    assert w.required_streams(1) == {2, 3}
    assert 2 in w.log_stream_tree(1).nodes()
    kinds = [e.kind for e in w.streams[1].entries]
    assert LogKind.TransferOutLog in kinds
    assert LogKind.TransferInLog in [e.kind for e in w.streams[2].entries]


def test_transfer_of_unhosted_partition_is_rejected():
    with pytest.raises(ScenarioError):
        world(transfers=[TransferSpec(0, 2, 1, 3)]).run()


def test_event_bound_is_a_liveness_violation():
    w = world(max_events=5).run()
    assert any(v.kind == "event_bound" for v in w.liveness_violations())
    assert not w.safety_violations()


def test_run_to_quiescence_returns_world():
    w = world()
    assert run_to_quiescence(w) is w


# property: crashes, duplicates, transfers and votes never break safety


def fuzz_world(seed):
    r = random.Random(seed)
    var = r.choice(VARIANTS)
    cfg = SimConfig(
        variant=ProtocolVariant.parse(var), seed=seed, jitter=r.randint(0, 3),
        retry_timeout=50, duplicate_prob=0.1, max_events=20000,
    )
    topo = Topology(0, (1, 2, 3), {1: 1, 2: 2, 3: 3, 4: 1})
    # A root without a decision log blocks if it crashes after deciding;
    # only crash it in variants that log the decision.
    roots = [0, 1, 2, 3] if cfg.variant.coordinator_commit_log else [1, 2, 3]
    faults = [
        FaultSpec("crash", at=r.randint(0, 15), stream=r.choice(roots)),
        FaultSpec("crash", at=r.randint(0, 25), stream=r.choice([1, 2, 3])),
    ]
    faults += [FaultSpec("user_retry", at=faults[0].at + 40, txn=t) for t in (1, 2)]
    if r.random() < 0.3:
        faults.append(FaultSpec("vote_no", at=r.randint(0, 6), stream=r.choice([1, 2, 3]), txn=1))
    transfers = [TransferSpec(r.randint(0, 8), r.choice([1, 4]), 1, r.choice([2, 3]))]
    txns = [TxnSpec(1, (1, 2, 3, 4), commit_at=r.randint(1, 5)), TxnSpec(2, (4, 3), commit_at=3)]
    return World(cfg, topo, txns, transfers, faults)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_fault_fuzz_keeps_safety_and_liveness(seed):
    w = fuzz_world(seed).run()
    assert not w.violations, [str(v) for v in w.violations]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_abstract_runs_conform_to_checker(seed):
    r = random.Random(seed)
    n = r.randint(1, 4)
    streams = tuple(range(1, n + 1))
    homes = {p: r.choice(streams) for p in range(1, 6)}
    txns = [TxnSpec(1, tuple(sorted(r.sample(range(1, 6), r.randint(1, 5)))), commit_at=r.randint(1, 4), one_phase=False)]
    faults = []
    if r.random() < 0.3:
        faults.append(FaultSpec("internal_abort", at=r.randint(0, 4), stream=r.choice(streams), txn=1))
    transfers = []
    if n > 1 and r.random() < 0.6:
        p = r.choice(sorted(homes))
        dst = r.choice([s for s in streams if s != homes[p]])
        transfers.append(TransferSpec(r.randint(0, 5), p, homes[p], dst))
    cfg = SimConfig(mode=Mode.ABSTRACT, seed=seed, jitter=r.randint(0, 2))
    w = World(cfg, Topology(0, streams, homes), txns, transfers, faults).run()
    assert not w.violations
    verdict = run_check("conformance", w, 1)
    assert verdict, verdict.detail
