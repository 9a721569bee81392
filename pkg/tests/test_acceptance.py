"""The ten acceptance criteria, each printing one PASS/FAIL line."""
import dataclasses
import time

import pytest

from tree2pc import transfer as T
from tree2pc.checker import CheckConfig, ExplorationBudget, explore, tree_configs
from tree2pc.checker import _kernel_py as K
from tree2pc.interleave import check_interleaving
from tree2pc.metrics import granularity_sweep, residuals, run_shape
from tree2pc.scenario import bundled_names, check_expectations, load_scenario, run_check
from tree2pc.state_machine import Mode, ProtocolVariant
from tree2pc.types import LogKind, MigratedContext, ReplicatedLogEntry, UserOutcome

BUDGET = 1_000_000
RELEASE = ProtocolVariant.parse("release")


@pytest.fixture(scope="module")
def exhaustive():
    """Every tree of at most 4 nodes and depth 3, with one dynamic add.

    A config whose unreduced space exceeds the budget is re-run keeping one
    state per orbit of its automorphisms.
    """
    reports = []
    budget = ExplorationBudget(max_states=BUDGET, max_dynamic_adds=1)
    for cfg in tree_configs(4, 3):
        rep = explore(cfg, budget)
        if rep.truncated and cfg.automorphisms():
            rep = explore(cfg, budget, symmetry=True)
        reports.append(rep)
    return reports


def _describe(reports):
    return ", ".join(
        f"{r.config.describe()}:{r.states}{'r' if r.reduced else ''}/{r.seconds:.0f}s" for r in reports
    )


def test_criterion_01_exhaustive_safety(exhaustive, verdict):
    ok = len(exhaustive) == 8 and all(r.safety_ok and r.seconds < 60 for r in exhaustive)
    verdict(1, ok, f"{len(exhaustive)} configs, zero Consistency/DecisionStability violations; {_describe(exhaustive)}")
    assert ok


def test_criterion_02_bounded_liveness(exhaustive, verdict):
    ok = all(r.liveness_ok and r.sinks > 0 for r in exhaustive)
    sinks = sum(r.sinks for r in exhaustive)
    verdict(2, ok, f"every maximal path ends in an agreed terminal state ({sinks} quiescent states)")
    assert ok


def test_criterion_03_cost_formulas(verdict):
    bad = []
    for H in (1, 2, 3):
        for N in (1, 2, 4, 8):
            _, s = run_shape(H, N, RELEASE)
            res = residuals(s, RELEASE)
            if any(res.values()) or s.outcome != UserOutcome.COMMITTED:
                bad.append((H, N, res))
    verdict(3, not bad, "12 uniform trees, every residual 0" if not bad else f"nonzero residuals {bad[:3]}")
    assert not bad


def test_criterion_04_flat_accounting(verdict):
    got = {}
    for N in (1, 2, 4, 8, 16):
        c = run_shape(1, N, RELEASE)[1].counters
        got[N] = (c.msgs_total, c.sync_logs, c.async_logs)
    ok = all(v == (5 * N, 2 * N + 1, 1) for N, v in got.items())
    verdict(4, ok, f"(msgs, sync logs, async logs) by N: {got}")
    assert ok


def test_criterion_05_participant_reduction(verdict):
    rows = {r["granularity"]: r for r in granularity_sweep([100])}
    ls, part = rows["LOG_STREAM"], rows["PARTITION"]
    ok = (
        (ls["participants"], part["participants"]) == (1, 100)
        and ls["prepare_msgs"] * 100 <= part["prepare_msgs"]
        and ls["outcome"] == part["outcome"] == "COMMITTED"
    )
    verdict(5, ok, f"participants {ls['participants']} vs {part['participants']}, "
            f"prepare msgs {ls['prepare_msgs']} vs {part['prepare_msgs']}")
    assert ok


def _violating_fixture():
    E = ReplicatedLogEntry
    mig = (MigratedContext(1, 1, ((1, 0),), (7,)),)
    return {
        1: [
            E(LogKind.PrepareLog, 1, 0, 1, txn=1, parent=0, participants=()),
            E(LogKind.TransferOutLog, 1, 1, 2, partition=7, peer=2, txns=(1,)),
            # the commit log omits the stream the partition moved to
            E(LogKind.CommitLog, 1, 2, 3, txn=1, parent=0),
        ],
        2: [E(LogKind.TransferInLog, 2, 0, 2, partition=7, peer=1, txns=(1,), migrated=mig)],
    }


def test_criterion_06_transfer_correctness(verdict):
    t0 = time.perf_counter()
    sc = load_scenario("fig4_transfer")
    w = sc.build().run()
    example = not check_expectations(sc, w) and bool(run_check("minimum_set", w, 1)) and bool(
        run_check("transfer_principle", w, 1)
    )
    failed = [s for s in range(1000) if not check_interleaving(s).ok]
    caught = not T.check_transfer_principle(_violating_fixture())
    elapsed = time.perf_counter() - t0
    ok = example and not failed and caught and elapsed < 120
    verdict(6, ok, f"fig4_transfer phases+checks {'ok' if example else 'FAIL'}, {1000 - len(failed)}/1000 interleavings, "
            f"violating fixture {'rejected' if caught else 'ACCEPTED'}, {elapsed:.1f}s")
    assert ok, failed[:5]


def test_criterion_07_circular(verdict):
    sc = load_scenario("circular_transfer")
    w = sc.build().run()
    a, b = sc.names["A"], sc.names["B"]
    recs = [r for r in w.trace if r.txn == 1]
    dup = next(i for i, r in enumerate(recs) if r.node == a and r.handler == "handle_duplicate_prepare_request")
    answer = next(
        i for i, r in enumerate(recs)
        if r.node == a and r.handler == "handle_log_persisted" and f"PrepareResp[OK]({a}->{b})" in r.outputs
    )
    vote_from_b = [
        i for i, r in enumerate(recs) if r.node == a and r.input.startswith("PrepareResp") and f"({b}->{a})" in r.input
    ]
    direct = dup < answer and all(i > answer for i in vote_from_b)
    ok = (
        w.final_outcome(1) == UserOutcome.COMMITTED and not w.violations and direct and not check_expectations(sc, w)
    )
    verdict(7, ok, "A->B->A commits; A answers B after its own prepare log, before B's vote")
    assert ok


def test_criterion_08_unknown_states(verdict):
    lie = load_scenario("lying_baseline").build().run()
    lied = lie.final_outcome(1) == UserOutcome.ABORTED and [v.kind for v in lie.violations] == ["lying_abort"]
    unknown = load_scenario("unknown_response")
    outcomes = set()
    for seed in range(1000):
        w = unknown.with_overrides(seed=seed).build().run()
        outcomes.add(w.final_outcome(1))
        assert not w.violations, seed
    tdt = load_scenario("tdt_resolves").build().run()
    ok = lied and outcomes == {UserOutcome.TRANS_UNKNOWN} and tdt.final_outcome(1) == UserOutcome.COMMITTED
    verdict(8, ok, f"baseline ABORTED+flagged={lied}; unknown over 1000 seeds {sorted(o.name for o in outcomes)}; "
            f"tdt {tdt.final_outcome(1).name}")
    assert ok


def test_criterion_09_trends(verdict):
    msg, log = 3, 5
    depth = [run_shape(H, 2, RELEASE, msg_delay=msg, log_sync_delay=log)[1].counters.latency_ticks for H in range(1, 7)]
    width = [run_shape(2, N, RELEASE, msg_delay=msg, log_sync_delay=log)[1].counters.latency_ticks for N in (1, 2, 4, 8)]
    ok = depth == [2 * H * msg + log for H in range(1, 7)] and len(set(width)) == 1
    verdict(9, ok, f"depth H=1..6 latency {depth} (2H*{msg}+{log}); width N=1,2,4,8 latency {width}")
    assert ok


def test_criterion_10_conformance_and_mutant(verdict):
    replayed, bad = 0, []
    for name in bundled_names():
        sc = load_scenario(name)
        if sc.config.mode != Mode.ABSTRACT:
            continue
        w = sc.build().run()
        for txn in sorted(w.txns):
            replayed += 1
            if not run_check("conformance", w, txn):
                bad.append((name, txn))
    mutant_check = explore(CheckConfig.flat(3), ExplorationBudget(max_states=BUDGET, max_dynamic_adds=1),
                           mutant=K.MUTANT_COMMIT_ON_NO)
    sc = load_scenario("abstract_internal_abort")
    mw = dataclasses.replace(sc, config=dataclasses.replace(sc.config, mutant=True)).build().run()
    mutant_replay = run_check("conformance", mw, 1)
    ok = replayed > 0 and not bad and not mutant_check.safety_ok and not mutant_replay
    verdict(10, ok, f"{replayed} abstract traces conform; mutant: checker "
            f"{'FAIL' if not mutant_check.safety_ok else 'pass'}, replay {'FAIL' if not mutant_replay else 'pass'}")
    assert ok, bad
