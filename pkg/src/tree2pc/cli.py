"""Command-line entry point: run scenarios, check the abstract protocol,
sweep costs and replay traces.

Exit codes: 0 ok, 2 usage, 3 parse error, 4 validation error, 5 invariant
violation, 6 liveness failure, 7 golden or expected mismatch, 8 checker
budget exhausted.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

from . import metrics
from .checker import CheckConfig, ExplorationBudget, conformance_replay, explore, tree_configs
from .checker._kernel_py import MUTANT_COMMIT_ON_NO
from .scenario import (
    ScenarioParseError,
    ScenarioValidationError,
    bundled_names,
    check_expectations,
    load_scenario,
)
from .sim import ScenarioError, run_to_quiescence
from .state_machine import Mode, ProtocolVariant

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_INVARIANT = 5
EXIT_LIVENESS = 6
EXIT_MISMATCH = 7
EXIT_INCONCLUSIVE = 8


def _int_list(text: str) -> list[int]:
    """``1,2,4`` or an inclusive range ``1-6``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def _variant(text: str) -> ProtocolVariant:
    try:
        return ProtocolVariant.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return n


# run


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        overridden = any(v is not None for v in (args.seed, args.variant, args.mode))
        scenario = scenario.with_overrides(args.seed, args.variant, args.mode, args.budget)
        if args.mutant:
            scenario = dataclasses.replace(scenario, config=dataclasses.replace(scenario.config, mutant=True))
        world = scenario.build()
    except ScenarioParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ScenarioValidationError, ScenarioError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    run_to_quiescence(world)
    out_dir = Path(args.out_dir or Path("runs") / scenario.name)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "trace.txt").write_text(world.trace_text())
    rows = []
    for txn in sorted(world.txns):
        summary = metrics.summarize(world, txn)
        rows.append(
            metrics.row(
                summary, world.config.variant, world.config.mode, metrics.Granularity.LOG_STREAM,
                len(world.txns[txn].spec.partitions),
            )
        )
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        metrics.write_csv(rows, fh)

    exp = scenario.expected
    if overridden:
        # A pinned hash belongs to the pinned seed, variant and mode.
        exp = dataclasses.replace(exp, trace_hash=None)
    mismatches = check_expectations(dataclasses.replace(scenario, expected=exp), world)
    safety = world.safety_violations()
    liveness = world.liveness_violations()
    # Violations named in the expected block are the point of the scenario.
    judged_by_expected = exp.violations is not None

    summary = {
        "scenario": scenario.name,
        "seed": world.config.seed,
        "variant": world.config.variant.name,
        "mode": world.config.mode.value,
        "outcomes": {str(t): (o.name if o is not None else None) for t, o in ((t, world.final_outcome(t)) for t in sorted(world.txns))},
        "violations": [str(v) for v in world.violations],
        "anomalies": list(world.anomalies),
        "mismatches": [f"{m.kind}: {m.detail}" for m in mismatches],
        "trace_hash": world.trace_hash(),
        "events": world.events,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    print(f"scenario {scenario.name} seed={world.config.seed} variant={world.config.variant.name} "
          f"mode={world.config.mode.value}")
    for txn, outcome in summary["outcomes"].items():
        print(f"  txn {txn}: {outcome}")
    for v in world.violations:
        print(f"  violation: {v}")
    for m in mismatches:
        print(f"  {m.kind} mismatch: {m.detail}")
    print(f"  trace {out_dir / 'trace.txt'} sha256={summary['trace_hash'][:16]}")

    if mismatches:
        return EXIT_MISMATCH
    if not judged_by_expected:
        if safety:
            return EXIT_INVARIANT
        if liveness:
            return EXIT_LIVENESS
    return EXIT_OK


# check


def _check_configs(args) -> list[CheckConfig]:
    if args.shape == "chain":
        return [CheckConfig.chain(args.nodes)]
    if args.shape == "flat":
        return [CheckConfig.flat(args.nodes)]
    return tree_configs(args.nodes, args.depth)


def _format_path(path) -> str:
    return "\n".join(f"    {name}(node={node}, arg={arg})" for name, node, arg, _ in path)


def cmd_check(args) -> int:
    budget = ExplorationBudget(max_states=args.budget, max_dynamic_adds=args.dynamic_adds)
    mutant = MUTANT_COMMIT_ON_NO if args.mutant else 0
    worst = EXIT_OK
    for cfg in _check_configs(args):
        if cfg.depth() > args.depth:
            continue
        report = explore(cfg, budget, mutant=mutant)
        if report.truncated and not args.no_symmetry and cfg.automorphisms():
            report = explore(cfg, budget, mutant=mutant, symmetry=True)
        print(report.summary())
        for v in report.violations[:1]:
            print(f"  counterexample for {v.invariant} ({len(v.path) - 1} steps):")
            print(_format_path(v.path))
        print()
        if not report.safety_ok and not report.truncated:
            code = EXIT_INVARIANT
        elif report.truncated:
            code = EXIT_INCONCLUSIVE
        elif not report.liveness_ok:
            code = EXIT_LIVENESS
        else:
            code = EXIT_OK
        worst = code if _rank(code) > _rank(worst) else worst
    return worst


def _rank(code: int) -> int:
    return {EXIT_OK: 0, EXIT_INCONCLUSIVE: 1, EXIT_LIVENESS: 2, EXIT_INVARIANT: 3}.get(code, 0)


# bench


def cmd_bench(args) -> int:
    granularity = metrics.Granularity(args.granularity.upper())
    mode = Mode(args.mode) if args.mode else Mode.LOGGED
    if args.partitions:
        rows = metrics.granularity_sweep(args.partitions, args.variant, mode)
    else:
        rows = metrics.sweep(
            args.heights, args.fanouts, granularity, args.variant, mode,
            msg_delay=args.msg_delay, log_sync_delay=args.log_sync_delay,
        )
    if args.out:
        with open(args.out, "w", newline="") as fh:
            metrics.write_csv(rows, fh)
    else:
        sys.stdout.write(metrics.write_csv(rows))
    return EXIT_OK


# replay


class NoProjection(ValueError):
    """The trace carries no abstract world states to replay."""


def parse_trace(text: str) -> dict[int, tuple[CheckConfig, list]]:
    """Per-transaction ``(config, steps)`` from a trace written by ``run``."""
    headers: dict[int, CheckConfig] = {}
    steps: dict[int, list] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        fields = dict(f.split("=", 1) for f in rest.split() if "=" in f)
        try:
            if kind == "trace" and fields.get("mode", "abstract") != "abstract":
                raise NoProjection(f"trace was recorded in {fields['mode']} mode; replay needs --mode abstract")
            if kind == "txn":
                txn = int(fields["id"])
                nodes = fields["nodes"].split(".")
                masks = tuple(int(m, 16) for m in fields["init"].split("."))
                headers[txn] = CheckConfig(len(nodes), masks, int(fields["root"]))
                steps[txn] = []
            elif kind == "step" and "world" in fields and fields.get("txn", "-") != "-":
                txn = int(fields["txn"])
                if txn not in headers:
                    raise ValueError(f"txn {txn} has no header")
                steps[txn].append(tuple(int(x, 16) for x in fields["world"].split(".")))
            elif kind not in ("trace", "step"):
                raise ValueError(f"unknown record {kind!r}")
        except NoProjection:
            raise
        except (KeyError, ValueError) as exc:
            raise ScenarioParseError(f"line {lineno}: {exc}") from exc
    return {txn: (cfg, steps[txn]) for txn, cfg in headers.items()}


def cmd_replay(args) -> int:
    if args.trace:
        try:
            per_txn = parse_trace(Path(args.trace).read_text())
        except OSError as exc:
            print(f"parse error: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except NoProjection as exc:
            print(f"validation error: {args.trace}: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        except ScenarioParseError as exc:
            print(f"parse error: {args.trace}: {exc}", file=sys.stderr)
            return EXIT_PARSE
    else:
        try:
            scenario = load_scenario(args.scenario).with_overrides(args.seed, None, "abstract", args.budget)
            world = run_to_quiescence(scenario.build())
        except ScenarioParseError as exc:
            print(f"parse error: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except (ScenarioValidationError, ScenarioError, ValueError) as exc:
            print(f"validation error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        try:
            per_txn = {}
            for txn in sorted(world.txns):
                cfg, _, steps = world.abstract_steps(txn)
                per_txn[txn] = (cfg, steps)
        except ValueError as exc:
            print(f"validation error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
    if not per_txn or not any(steps for _, steps in per_txn.values()):
        print("validation error: trace has no abstract projection (run with --mode abstract)", file=sys.stderr)
        return EXIT_VALIDATION
    code = EXIT_OK
    for txn, (cfg, steps) in sorted(per_txn.items()):
        ok, where = conformance_replay(cfg.initial(), steps, cfg)
        if ok:
            print(f"txn {txn}: {len(steps)} steps conform ({cfg.describe()})")
        else:
            idx, pre, post = where
            print(f"txn {txn}: step {idx} is not an enabled action")
            print(f"  pre  {pre}")
            print(f"  post {post}")
            code = EXIT_INVARIANT
    return code


def cmd_list(args) -> int:
    for name in bundled_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tree2pc", description="Tree-shaped 2PC over log streams.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and write trace, metrics and summary")
    p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", type=_variant, help="preset or flags, e.g. release or unknown+tdt")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--out-dir", help="default: runs/<scenario>")
    p.add_argument("--budget", type=_positive, help="maximum number of simulated events")
    p.add_argument("--mutant", action="store_true", help="commit despite a NO vote (negative control)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="exhaustively check the abstract protocol")
    p.add_argument("--nodes", type=_positive, default=3)
    p.add_argument("--depth", type=_positive, default=3)
    p.add_argument("--dynamic-adds", type=int, default=0)
    p.add_argument("--budget", type=_positive, default=1_000_000, help="maximum stored states")
    p.add_argument("--shape", choices=["all", "chain", "flat"], default="all")
    p.add_argument("--mutant", action="store_true", help="commit despite a NO vote (negative control)")
    p.add_argument("--no-symmetry", action="store_true", help="never fall back to orbit reduction")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("bench", help="cost sweep as CSV")
    p.add_argument("--heights", type=_int_list, default=[1, 2, 3])
    p.add_argument("--fanouts", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--granularity", choices=["log_stream", "partition"], default="log_stream")
    p.add_argument("--partitions", type=_int_list, help="granularity sweep over these partition counts")
    p.add_argument("--variant", type=_variant, default=None, help="default: release")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--msg-delay", type=_positive, default=1)
    p.add_argument("--log-sync-delay", type=int, default=1)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="replay an abstract trace against the checker's actions")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", help="trace file written by run --mode abstract")
    src.add_argument("--scenario", help="run this scenario in abstract mode and replay it")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=_positive)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("list", help="list bundled scenarios")
    p.set_defaults(func=cmd_list)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
