import pytest

from tree2pc.scenario import (
    ScenarioParseError,
    ScenarioValidationError,
    bundled_names,
    check_expectations,
    load_scenario,
    parse_scenario,
)
from tree2pc.state_machine import Mode
from tree2pc.types import UserOutcome

BASE = """\
version: 1
name: t
config: {seed: 1}
topology:
  coordinator: C
  streams: [A, B]
  partitions: {1: A, 2: B}
transactions:
  - {txn: 1, partitions: [1, 2], commit_at: 2}
"""


def test_minimal_scenario_runs():
    sc = parse_scenario(BASE + "expected: {outcomes: {1: COMMITTED}, violations: []}\n")
    assert sc.names == {"C": 0, "A": 1, "B": 2}
    assert sc.topology.partitions == {1: 1, 2: 2}
    w = sc.build().run()
    assert w.final_outcome(1) == UserOutcome.COMMITTED
    assert check_expectations(sc, w) == []


def test_numeric_stream_ids():
    text = BASE.replace("coordinator: C", "coordinator: 0").replace("[A, B]", "[1, 2]")
    text = text.replace("{1: A, 2: B}", "{1: 1, 2: 2}")
    assert parse_scenario(text).names == {"0": 0, "1": 1, "2": 2}


def test_yaml_error_reports_line():
    with pytest.raises(ScenarioParseError, match="line 5: found character"):
        parse_scenario(BASE.replace("  coordinator: C", "\tcoordinator: C"))


@pytest.mark.parametrize(
    "old,new,match",
    [
        ("version: 1", "version: 2", "version"),
        ("name: t\n", "", "missing field 'name'"),
        ("config: {seed: 1}", "config: {seed: 1, speed: 3}", "config: unknown field 'speed'"),
        ("commit_at: 2}", "commit_at: x}", r"transactions\[0\].commit_at"),
        ("name: t", "name: t\nbogus: 1", "unknown field 'bogus'"),
    ],
)
def test_parse_errors_name_the_field(old, new, match):
    with pytest.raises(ScenarioParseError, match=match):
        parse_scenario(BASE.replace(old, new))


@pytest.mark.parametrize(
    "extra,match",
    [
        ("transfers:\n  - {at: 1, partition: 1, src: A, dst: Z}\n", r"transfers\[0\].dst: unknown stream 'Z'"),
        ("transfers:\n  - {at: 1, partition: 1, src: B, dst: A}\n", r"transfers\[0\].src: partition 1 is on A"),
        ("transfers:\n  - {at: 1, partition: 9, src: A, dst: B}\n", "unknown partition 9"),
        ("faults:\n  - {kind: crash, at: 1, stream: Q}\n", r"faults\[0\].stream: unknown stream 'Q'"),
        ("faults:\n  - {kind: vote_no, at: 1, stream: A, txn: 7}\n", r"faults\[0\].txn: unknown transaction 7"),
        ("expected: {outcomes: {5: COMMITTED}}\n", "unknown transaction 5"),
    ],
)
def test_validation_errors_name_the_reference(extra, match):
    with pytest.raises(ScenarioValidationError, match=match):
        parse_scenario(BASE + extra)


def test_unknown_fault_kind_and_check_are_parse_errors():
    with pytest.raises(ScenarioParseError, match="unknown fault 'meteor'"):
        parse_scenario(BASE + "faults:\n  - {kind: meteor, at: 1}\n")
    with pytest.raises(ScenarioParseError, match="unknown check"):
        parse_scenario(BASE + "expected: {checks: [vibes]}\n")


def test_abstract_mode_with_variant_is_a_validation_error():
    with pytest.raises(ScenarioValidationError, match="config"):
        parse_scenario(BASE.replace("{seed: 1}", "{seed: 1, mode: abstract, variant: release}"))


def test_overrides():
    sc = parse_scenario(BASE)
    assert sc.with_overrides() is sc
    o = sc.with_overrides(seed=9, variant="release", budget=50)
    assert (o.config.seed, o.config.variant.name, o.config.max_events) == (9, "release", 50)
    with pytest.raises(ScenarioValidationError):
        sc.with_overrides(mode=Mode.ABSTRACT, variant="release")


def test_missing_file():
    with pytest.raises(ScenarioParseError, match="no such file"):
        load_scenario("/nonexistent/nothing.yaml")


def test_mismatches_are_reported():
    sc = parse_scenario(BASE + "expected: {outcomes: {1: ABORTED}, trace_hash: deadbeef}\n")
    kinds = sorted(m.kind for m in check_expectations(sc, sc.build().run()))
    assert kinds == ["expected", "golden"]


@pytest.mark.parametrize("name", bundled_names())
def test_bundled_scenarios_meet_expectations(name):
    sc = load_scenario(name)
    assert sc.expected.trace_hash, "every bundled scenario pins its trace"
    w = sc.build().run()
    assert check_expectations(sc, w) == []
    # golden traces are stable across reruns
    assert sc.build().run().trace_hash() == w.trace_hash()
