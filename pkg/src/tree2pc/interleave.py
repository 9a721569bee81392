"""Seeded random interleavings of partition transfers with 2PC log commits.

Each world has two participant streams, two transactions and two
transfers; jitter and start times vary with the seed so transfers land in
every commit stage, including between a prepare request and its log.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from . import transfer as T
from .sim import SimConfig, Topology, TransferSpec, TxnSpec, World
from .state_machine import Mode, ProtocolVariant

STREAMS = (1, 2)
COORDINATOR = 0
VARIANTS = ("baseline", "clear_stage", "release", "d2pc")


def random_transfer_world(seed: int, mode: Mode = Mode.LOGGED) -> World:
    rng = random.Random(seed)
    # Two partitions per stream so a stream keeps data after a move.
    homes = {1: 1, 2: 1, 3: 2, 4: 2}
    txns = []
    for txn in (1, 2):
        parts = tuple(sorted(rng.sample(sorted(homes), rng.randint(1, 3))))
        start = rng.randint(0, 3)
        txns.append(TxnSpec(txn, parts, start, start + rng.randint(1, 8), one_phase=False))
    transfers = []
    # Distinct partitions: a queued transfer may still be pending when the
    # next one is due, so chaining moves of one partition is not schedulable.
    at = 0
    for p in rng.sample(sorted(homes), 2):
        at += rng.randint(0, 5)
        src = homes[p]
        dst = STREAMS[1] if src == STREAMS[0] else STREAMS[0]
        transfers.append(TransferSpec(at, p, src, dst))
    variant = "baseline" if mode == Mode.ABSTRACT else rng.choice(VARIANTS)
    cfg = SimConfig(
        msg_delay=1,
        log_sync_delay=rng.randint(1, 3),
        jitter=rng.randint(0, 2),
        seed=seed,
        variant=ProtocolVariant.parse(variant),
        mode=mode,
    )
    return World(cfg, Topology(COORDINATOR, STREAMS, homes), txns, transfers, name=f"interleave{seed}")


@dataclass
class InterleavingResult:
    seed: int
    minimum_set: T.Verdict
    transfer_principle: T.Verdict
    requirement2: T.Verdict
    violations: list

    @property
    def ok(self) -> bool:
        return bool(self.minimum_set and self.transfer_principle and self.requirement2) and not self.violations


def check_interleaving(seed: int, mode: Mode = Mode.LOGGED) -> InterleavingResult:
    world = random_transfer_world(seed, mode).run()
    minimum = T.Verdict(True)
    for txn in sorted(world.txns):
        v = T.check_minimum_set(world.required_streams(txn), world.log_stream_tree(txn))
        if not v:
            minimum = T.Verdict(False, f"txn {txn}: {v.detail}")
            break
    entries = world.entries()
    return InterleavingResult(
        seed,
        minimum,
        T.check_transfer_principle(entries),
        T.check_requirement2(entries),
        [str(v) for v in world.violations],
    )
