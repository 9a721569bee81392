"""Scenario files: YAML with a ``version`` header.

Streams may be named (``A``, ``B``) or numbered; names are mapped to ids in
listed order with the coordinator first. Every error names the offending
field, and YAML syntax errors carry the line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from . import transfer as T
from .sim import FAULT_KINDS, FaultSpec, SimConfig, Topology, TransferSpec, TxnSpec, World
from .state_machine import Mode, ProtocolVariant
from .types import UserOutcome

SCHEMA_VERSION = 1
CHECKS = ("minimum_set", "transfer_principle", "requirement2", "conformance")


class ScenarioParseError(ValueError):
    """The file is not valid YAML or has the wrong shape."""


class ScenarioValidationError(ValueError):
    """The file parses but refers to something that does not exist."""


@dataclass
class Expected:
    outcomes: dict[int, UserOutcome] = field(default_factory=dict)
    violations: Optional[list[str]] = None  # None: not checked; []: none allowed
    trace_hash: Optional[str] = None
    phases: dict[int, dict[str, dict[int, tuple[int, ...]]]] = field(default_factory=dict)
    interm_adds: dict[int, list[tuple[int, int, str]]] = field(default_factory=dict)
    checks: tuple[str, ...] = ()


@dataclass
class Scenario:
    name: str
    config: SimConfig
    topology: Topology
    txns: list[TxnSpec]
    transfers: list[TransferSpec]
    faults: list[FaultSpec]
    expected: Expected
    names: dict[str, int]  # stream name -> id
    version: int = SCHEMA_VERSION
    path: Optional[str] = None

    def stream_name(self, sid: int) -> str:
        for n, i in self.names.items():
            if i == sid:
                return n
        return str(sid)

    def build(self) -> World:
        return World(self.config, self.topology, self.txns, self.transfers, self.faults, name=self.name)

    def with_overrides(self, seed=None, variant=None, mode=None, budget=None) -> "Scenario":
        cfg = self.config
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if variant is not None:
            changes["variant"] = ProtocolVariant.parse(variant) if isinstance(variant, str) else variant
        if mode is not None:
            changes["mode"] = Mode(mode) if isinstance(mode, str) else mode
        if budget is not None:
            changes["max_events"] = budget
        if not changes:
            return self
        try:
            new_cfg = dataclasses.replace(cfg, **changes)
        except ValueError as exc:
            raise ScenarioValidationError(f"config: {exc}") from exc
        return dataclasses.replace(self, config=new_cfg)


# parsing helpers


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ScenarioParseError(f"{where}: missing field {key!r}")
    return d[key]


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioParseError(f"{where}: expected an integer, got {v!r}")
    return v


def _check_keys(d: dict, allowed: tuple[str, ...], where: str) -> None:
    if not isinstance(d, dict):
        raise ScenarioParseError(f"{where}: expected a mapping")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ScenarioParseError(f"{where}: unknown field {extra[0]!r}")


_CONFIG_KEYS = (
    "msg_delay",
    "log_sync_delay",
    "jitter",
    "seed",
    "variant",
    "mode",
    "tdt_retention",
    "partition_cap",
    "max_events",
    "retry_timeout",
    "duplicate_prob",
)


def _config(raw: dict) -> SimConfig:
    raw = raw or {}
    _check_keys(raw, _CONFIG_KEYS, "config")
    kw: dict[str, Any] = {}
    for k in ("msg_delay", "log_sync_delay", "jitter", "seed", "tdt_retention", "partition_cap", "max_events", "retry_timeout"):
        if raw.get(k) is not None:
            kw[k] = _int(raw[k], f"config.{k}")
    if "duplicate_prob" in raw:
        kw["duplicate_prob"] = float(raw["duplicate_prob"])
    try:
        if "variant" in raw:
            kw["variant"] = ProtocolVariant.parse(str(raw["variant"]))
        if "mode" in raw:
            kw["mode"] = Mode(str(raw["mode"]))
        return SimConfig(**kw)
    except ValueError as exc:
        raise ScenarioValidationError(f"config: {exc}") from exc


def parse_scenario(text: str, path: Optional[str] = None) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"line {mark.line + 1}: " if mark is not None else ""
        raise ScenarioParseError(f"{line}{getattr(exc, 'problem', None) or exc}") from exc
    _check_keys(
        doc,
        ("version", "name", "config", "topology", "transactions", "transfers", "faults", "expected", "description"),
        "scenario",
    )
    version = _int(_need(doc, "version", "scenario"), "version")
    if version != SCHEMA_VERSION:
        raise ScenarioParseError(f"version: unsupported {version}, expected {SCHEMA_VERSION}")
    name = str(_need(doc, "name", "scenario"))
    config = _config(doc.get("config"))

    topo = _need(doc, "topology", "scenario")
    _check_keys(topo, ("coordinator", "streams", "partitions"), "topology")
    coord_raw = _need(topo, "coordinator", "topology")
    streams_raw = list(_need(topo, "streams", "topology") or [])
    names: dict[str, int] = {}
    if all(isinstance(s, int) and not isinstance(s, bool) for s in [coord_raw, *streams_raw]):
        ids = {coord_raw, *streams_raw}
        names = {str(s): s for s in sorted(ids)}
    else:
        for s in [coord_raw, *streams_raw]:
            if str(s) not in names:
                names[str(s)] = len(names)

    def sid(v, where: str) -> int:
        key = str(v)
        if key not in names:
            raise ScenarioValidationError(f"{where}: unknown stream {v!r}")
        return names[key]

    partitions = {}
    for p, home in (topo.get("partitions") or {}).items():
        partitions[_int(p, "topology.partitions")] = sid(home, f"topology.partitions.{p}")
    topology = Topology(
        sid(coord_raw, "topology.coordinator"),
        tuple(sid(s, "topology.streams") for s in streams_raw),
        partitions,
    )

    txns = []
    for i, t in enumerate(_need(doc, "transactions", "scenario") or []):
        where = f"transactions[{i}]"
        _check_keys(t, ("txn", "partitions", "start", "commit_at", "tree", "one_phase"), where)
        tree = None
        if t.get("tree") is not None:
            tree = {
                sid(k, f"{where}.tree"): tuple(sid(c, f"{where}.tree.{k}") for c in (v or []))
                for k, v in t["tree"].items()
            }
        parts = tuple(_int(p, f"{where}.partitions") for p in (t.get("partitions") or []))
        for p in parts:
            if p not in partitions:
                raise ScenarioValidationError(f"{where}.partitions: unknown partition {p}")
        txns.append(
            TxnSpec(
                _int(_need(t, "txn", where), f"{where}.txn"),
                parts,
                _int(t.get("start", 0), f"{where}.start"),
                _int(t.get("commit_at", 1), f"{where}.commit_at"),
                tree,
                t.get("one_phase"),
            )
        )
    if not txns:
        raise ScenarioParseError("transactions: at least one transaction is required")
    txn_ids = {t.txn for t in txns}

    transfers = []
    for i, tr in enumerate(doc.get("transfers") or []):
        where = f"transfers[{i}]"
        _check_keys(tr, ("at", "partition", "src", "dst"), where)
        transfers.append(
            TransferSpec(
                _int(_need(tr, "at", where), f"{where}.at"),
                _int(_need(tr, "partition", where), f"{where}.partition"),
                sid(_need(tr, "src", where), f"{where}.src"),
                sid(_need(tr, "dst", where), f"{where}.dst"),
            )
        )
    _validate_transfer_schedule(transfers, partitions, names)

    faults = []
    for i, f in enumerate(doc.get("faults") or []):
        where = f"faults[{i}]"
        _check_keys(f, ("kind", "at", "stream", "txn", "msg", "src", "dst"), where)
        kind = _need(f, "kind", where)
        if kind not in FAULT_KINDS:
            raise ScenarioParseError(f"{where}.kind: unknown fault {kind!r}; known: {', '.join(FAULT_KINDS)}")
        txn = f.get("txn")
        if txn is not None and txn not in txn_ids:
            raise ScenarioValidationError(f"{where}.txn: unknown transaction {txn!r}")
        faults.append(
            FaultSpec(
                kind,
                _int(f.get("at", 0), f"{where}.at"),
                sid(f["stream"], f"{where}.stream") if f.get("stream") is not None else None,
                txn,
                f.get("msg"),
                sid(f["src"], f"{where}.src") if f.get("src") is not None else None,
                sid(f["dst"], f"{where}.dst") if f.get("dst") is not None else None,
            )
        )

    expected = _expected(doc.get("expected") or {}, sid, txn_ids)
    scenario = Scenario(name, config, topology, txns, transfers, faults, expected, names, version, path)
    try:
        scenario.build()  # resolves every remaining reference
    except ValueError as exc:
        raise ScenarioValidationError(str(exc)) from exc
    return scenario


def _validate_transfer_schedule(transfers, partitions, names) -> None:
    """Each transfer's source must host the partition at its scheduled time,
    replaying the schedule in time order."""
    home = dict(partitions)
    rev = {v: k for k, v in names.items()}
    for i, tr in sorted(enumerate(transfers), key=lambda x: (x[1].at, x[0])):
        where = f"transfers[{i}]"
        if tr.partition not in home:
            raise ScenarioValidationError(f"{where}.partition: unknown partition {tr.partition}")
        if home[tr.partition] != tr.src:
            raise ScenarioValidationError(
                f"{where}.src: partition {tr.partition} is on {rev.get(home[tr.partition])} at t={tr.at}, "
                f"not {rev.get(tr.src)}"
            )
        if tr.src == tr.dst:
            raise ScenarioValidationError(f"{where}.dst: source and destination are the same stream")
        home[tr.partition] = tr.dst


def _expected(raw: dict, sid, txn_ids) -> Expected:
    _check_keys(raw, ("outcomes", "violations", "trace_hash", "phases", "interm_adds", "checks"), "expected")
    exp = Expected()
    for txn, outcome in (raw.get("outcomes") or {}).items():
        if txn not in txn_ids:
            raise ScenarioValidationError(f"expected.outcomes: unknown transaction {txn!r}")
        try:
            exp.outcomes[txn] = UserOutcome[str(outcome)]
        except KeyError as exc:
            raise ScenarioParseError(f"expected.outcomes.{txn}: unknown outcome {outcome!r}") from exc
    if "violations" in raw:
        exp.violations = sorted(str(v) for v in (raw["violations"] or []))
    exp.trace_hash = raw.get("trace_hash")
    for txn, phases in (raw.get("phases") or {}).items():
        if txn not in txn_ids:
            raise ScenarioValidationError(f"expected.phases: unknown transaction {txn!r}")
        exp.phases[txn] = {
            str(ph): {
                sid(n, f"expected.phases.{txn}.{ph}"): tuple(sorted(sid(c, f"expected.phases.{txn}.{ph}.{n}") for c in (kids or [])))
                for n, kids in (per or {}).items()
            }
            for ph, per in phases.items()
        }
    for txn, adds in (raw.get("interm_adds") or {}).items():
        where = f"expected.interm_adds.{txn}"
        exp.interm_adds[txn] = [(sid(a[0], where), sid(a[1], where), str(a[2])) for a in adds]
    checks = tuple(raw.get("checks") or ())
    for c in checks:
        if c not in CHECKS:
            raise ScenarioParseError(f"expected.checks: unknown check {c!r}; known: {', '.join(CHECKS)}")
    exp.checks = checks
    return exp


def load_scenario(path) -> Scenario:
    p = Path(path)
    if not p.exists():
        bundled = bundled_path(str(path))
        if bundled is None:
            raise ScenarioParseError(f"{path}: no such file or bundled scenario")
        p = bundled
    return parse_scenario(p.read_text(), str(p))


def bundled_names() -> list[str]:
    root = resources.files("tree2pc") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_path(name: str) -> Optional[Path]:
    root = resources.files("tree2pc") / "scenarios"
    cand = root / (name if name.endswith(".yaml") else name + ".yaml")
    return Path(str(cand)) if cand.is_file() else None


# expectations


@dataclass
class Mismatch:
    kind: str  # "golden" or "expected"
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.detail}"


def check_expectations(scenario: Scenario, world: World) -> list[Mismatch]:
    exp = scenario.expected
    out: list[Mismatch] = []
    nm = scenario.stream_name
    for txn, want in sorted(exp.outcomes.items()):
        got = world.final_outcome(txn)
        if got != want:
            out.append(Mismatch("expected", f"txn {txn} outcome {got.name if got is not None else None} != {want.name}"))
    if exp.violations is not None:
        got = sorted({v.kind for v in world.violations})
        if got != sorted(set(exp.violations)):
            out.append(Mismatch("expected", f"violations {got} != {exp.violations}"))
    for txn, phases in sorted(exp.phases.items()):
        got = world.phase_sets(txn)
        for ph, per in sorted(phases.items()):
            for n, kids in sorted(per.items()):
                have = got.get(ph, {}).get(n)
                if have != kids:
                    out.append(
                        Mismatch(
                            "expected",
                            f"txn {txn} {ph} children of {nm(n)}: "
                            f"{_names(have, nm)} != {_names(kids, nm)}",
                        )
                    )
    for txn, adds in sorted(exp.interm_adds.items()):
        got = world.txns[txn].interm_adds
        if sorted(got) != sorted(adds):
            out.append(
                Mismatch(
                    "expected",
                    f"txn {txn} interm adds {[(nm(a), nm(b), s) for a, b, s in got]} != "
                    f"{[(nm(a), nm(b), s) for a, b, s in adds]}",
                )
            )
    for check in exp.checks:
        for txn in sorted(world.txns):
            verdict = run_check(check, world, txn)
            if not verdict.ok:
                out.append(Mismatch("expected", f"{check} txn {txn}: {verdict.detail}"))
            if check in ("transfer_principle", "requirement2"):
                break  # stream-wide checks
    if exp.trace_hash is not None and world.trace_hash() != exp.trace_hash:
        out.append(Mismatch("golden", f"trace hash {world.trace_hash()} != {exp.trace_hash}"))
    return out


def run_check(check: str, world: World, txn: int) -> T.Verdict:
    if check == "minimum_set":
        return T.check_minimum_set(world.required_streams(txn), world.log_stream_tree(txn))
    if check == "transfer_principle":
        return T.check_transfer_principle(world.entries())
    if check == "requirement2":
        return T.check_requirement2(world.entries())
    if check == "conformance":
        from .checker.explore import conformance_replay

        cfg, init, steps = world.abstract_steps(txn)
        ok, where = conformance_replay(init, steps, cfg)
        if ok:
            return T.Verdict(True, "replay matches")
        idx, pre, post = where
        return T.Verdict(False, f"step {idx} diverges:\n  pre  {pre}\n  post {post}")
    raise ValueError(f"unknown check {check!r}")


def _names(ids, nm) -> str:
    if ids is None:
        return "missing"
    return "{" + ",".join(nm(i) for i in ids) + "}"
