"""Compare the compiled and pure-Python checker kernels.

Runs the same exhaustive exploration with each kernel and reports states per
second. Both runs must visit the same number of states.

    python benchmarks/bench_kernel.py --nodes 3 --dynamic-adds 1
"""
import argparse
import importlib
import os
import sys
import time


def run(pure: bool, nodes: int, shape: str, dyn: int):
    if pure:
        os.environ["TREE2PC_PURE_KERNEL"] = "1"
    else:
        os.environ.pop("TREE2PC_PURE_KERNEL", None)
    for mod in [m for m in sys.modules if m.startswith("tree2pc.checker")]:
        del sys.modules[mod]
    checker = importlib.import_module("tree2pc.checker")
    cfg = checker.CheckConfig.flat(nodes) if shape == "flat" else checker.CheckConfig.chain(nodes)
    t0 = time.perf_counter()
    report = checker.explore(cfg, checker.ExplorationBudget(max_states=5_000_000, max_dynamic_adds=dyn))
    return checker.KERNEL_NAME, report.states, time.perf_counter() - t0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=3)
    ap.add_argument("--shape", choices=["flat", "chain"], default="flat")
    ap.add_argument("--dynamic-adds", type=int, default=1)
    args = ap.parse_args(argv)

    rows = [run(pure, args.nodes, args.shape, args.dynamic_adds) for pure in (False, True)]
    if rows[0][0] == rows[1][0]:
        print("compiled kernel not built; only the pure-Python kernel is available")
    print(f"{'kernel':8} {'states':>9} {'seconds':>9} {'states/s':>10}")
    for name, states, secs in rows:
        print(f"{name:8} {states:9d} {secs:9.2f} {states / secs:10.0f}")
    if rows[0][1] != rows[1][1]:
        print("MISMATCH: kernels visited different state counts")
        return 1
    print(f"speedup: {rows[1][2] / rows[0][2]:.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
