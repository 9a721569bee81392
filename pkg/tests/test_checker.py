import random

import pytest

from tree2pc.checker import (
    KERNEL_NAME,
    CheckConfig,
    ExplorationBudget,
    WorldState,
    conformance_replay,
    enabled_actions,
    explore,
    tree_configs,
)
from tree2pc.checker import _kernel_py as K
from tree2pc.types import TwoPCState

try:
    from tree2pc.checker import _kernel as KC
except ImportError:  # pure-Python install
    KC = None


def test_tree_configs_enumerates_rooted_trees():
    # rooted unlabeled trees on 1..4 nodes: 1, 1, 2, 4
    assert len(tree_configs(4, 3)) == 8
    assert len(tree_configs(4, 2)) == 7  # drops the 4-chain
    assert [c.nodes for c in tree_configs(3, 3)] == [1, 2, 3, 3]


def test_config_constructors():
    chain = CheckConfig.chain(3)
    assert chain.depth() == 2 and chain.children_of == (0b10, 0b100, 0)
    flat = CheckConfig.flat(4)
    assert flat.depth() == 1 and flat.children_of[0] == 0b1110
    assert len(flat.automorphisms()) == 5  # S3 minus identity
    assert CheckConfig.from_parents([1, None]).root == 1
    assert "0->1" in chain.describe()
    with pytest.raises(ValueError):
        CheckConfig(9, (0,) * 9)


def test_pack_roundtrip():
    w = K.pack_node(TwoPCState.PREPARE, 3, 0b1010, 0b100, 0, 0b10)
    assert K.get_state(w) == TwoPCState.PREPARE
    assert K.get_parent(w) == 3
    assert K.get_children(w) == 0b1010
    assert K.get_interm(w) == 0b100
    assert K.get_acks(w) == 0b10


@pytest.mark.parametrize("cfg", tree_configs(3, 2), ids=lambda c: c.describe())
def test_small_configs_pass(cfg):
    for dyn in (0, 1):
        report = explore(cfg, ExplorationBudget(max_dynamic_adds=dyn))
        assert report.passed, report.summary()
        assert report.verdicts() == dict.fromkeys(
            ("Consistency", "DecisionStability", "Termination", "ProgressMeasure"), "PASS"
        )
        # every quiescent state is unanimous
        for outcome in report.outcomes:
            decided = {s for s in outcome if s in (TwoPCState.COMMIT, TwoPCState.ABORT)}
            assert len(decided) <= 1


def test_both_outcomes_reachable_and_contexts_end_forgotten():
    cfg = CheckConfig.flat(2)
    seen, frontier = {cfg.initial()}, [cfg.initial()]
    while frontier:
        s = frontier.pop()
        for _, _, _, nxt in K.successors(s, 2, 0, 0, 0):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    root_states = {K.get_state(s[0]) for s in seen}
    assert {TwoPCState.COMMIT, TwoPCState.ABORT} <= root_states
    report = explore(cfg)
    assert report.outcomes == {(TwoPCState.TOMBSTONE, TwoPCState.TOMBSTONE)}


def test_budget_exhaustion_is_inconclusive():
    report = explore(CheckConfig.flat(3), ExplorationBudget(max_states=50))
    assert report.truncated and not report.passed
    assert set(report.verdicts().values()) == {"INCONCLUSIVE"}
    assert "INCONCLUSIVE" in report.summary()


def test_mutant_yields_consistency_counterexample():
    report = explore(CheckConfig.flat(3), mutant=K.MUTANT_COMMIT_ON_NO)
    assert not report.safety_ok
    v = report.violations[0]
    assert v.invariant == "Consistency"
    names = [step[0] for step in v.path]
    assert names[0] == "Init" and "InternalAbort" in names
    last = WorldState(v.path[-1][3], 3)
    assert not last.consistent()


@pytest.mark.parametrize("cfg", [CheckConfig.flat(3), CheckConfig.flat(4)], ids=["flat3", "flat4"])
def test_symmetry_reduction_counts_orbits_exactly(cfg):
    full = explore(cfg, stop_at_first=False)
    reduced = explore(cfg, symmetry=True, stop_at_first=False)
    assert reduced.reduced and reduced.passed == full.passed
    # independent count: canonicalize every state of the full search
    kern = KC or K
    perms = cfg.automorphisms()
    seen, frontier = {cfg.initial()}, [cfg.initial()]
    while frontier:
        s = frontier.pop()
        for _, _, _, nxt in kern.successors(s, cfg.nodes, cfg.root, 0, 0):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    assert len(seen) == full.states
    assert len({kern.canonical(s, cfg.nodes, perms) for s in seen}) == reduced.states


def _random_walk_states(cfg, rng, steps, max_dyn):
    s = cfg.initial()
    out = [s]
    for _ in range(steps):
        succ = K.successors(s, cfg.nodes, cfg.root, max_dyn, 0)
        if not succ:
            break
        s = rng.choice(succ)[3]
        out.append(s)
    return out


@pytest.mark.skipif(KC is None, reason="compiled kernel not built")
def test_compiled_kernel_matches_python_kernel():
    rng = random.Random(7)
    for cfg in tree_configs(4, 3):
        perms = cfg.automorphisms()
        for _ in range(15):
            for s in _random_walk_states(cfg, rng, 40, 1):
                for mutant in (0, K.MUTANT_COMMIT_ON_NO):
                    a = sorted(K.successors(s, cfg.nodes, cfg.root, 1, mutant))
                    b = sorted(KC.successors(s, cfg.nodes, cfg.root, 1, mutant))
                    assert a == b
                    a = sorted(K.expand(s, cfg.nodes, cfg.root, 1, mutant, perms))
                    b = sorted(KC.expand(s, cfg.nodes, cfg.root, 1, mutant, perms))
                    assert a == b
                assert K.canonical(s, cfg.nodes, perms) == KC.canonical(s, cfg.nodes, perms)
                assert K.terminal_agreement(s, cfg.nodes) == KC.terminal_agreement(s, cfg.nodes)


def test_conformance_replay_accepts_paths_and_rejects_jumps():
    cfg = CheckConfig.chain(3)
    rng = random.Random(3)
    walk = _random_walk_states(cfg, rng, 30, 1)
    ok, where = conformance_replay(walk[0], walk[1:], cfg)
    assert ok and where is None
    # stutters are allowed
    assert conformance_replay(walk[0], [walk[0]] + walk[1:], cfg)[0]
    # skipping a step is not
    ok, (idx, pre, post) = conformance_replay(walk[0], walk[2:], cfg)
    assert not ok and idx == 0
    assert isinstance(pre, WorldState) and "n0:" in str(pre)


def test_enabled_actions_from_init():
    cfg = CheckConfig.flat(3)
    names = {a[0] for a in enabled_actions(cfg.initial(), cfg, max_dyn=1)}
    assert "RootStartToCommit" in names and "InternalAbort" in names
    assert any(n.startswith("Add") or "Intermediate" in n for n in names)


def test_world_state_encoding_roundtrip():
    cfg = CheckConfig.flat(2)
    s = cfg.initial()
    w = WorldState(s, 2)
    assert WorldState.decode(w.encode(), 2) == w
    assert [m for m in w.messages()] == []


def test_kernel_name():
    assert KERNEL_NAME in ("cython", "python")


@pytest.mark.slow
def test_flat4_with_dynamic_add_passes_unreduced():
    # above the 10^6 default budget; the orbit-reduced search covers it there
    report = explore(CheckConfig.flat(4), ExplorationBudget(max_states=2_000_000, max_dynamic_adds=1))
    assert report.passed and not report.reduced
    assert report.states == 1_705_768
