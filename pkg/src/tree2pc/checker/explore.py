"""Breadth-first exploration, invariants and the liveness check."""
from __future__ import annotations

import itertools
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..types import Message, MsgKind, TwoPCState, VoteStatus
from . import _kernel_py as K

_MSG_WORDS = (
    (K.M_REQ, MsgKind.PrepareReq, None),
    (K.M_OK, MsgKind.PrepareResp, VoteStatus.OK),
    (K.M_NO, MsgKind.PrepareResp, VoteStatus.NO),
    (K.M_COMMIT, MsgKind.Commit, None),
    (K.M_ABORT, MsgKind.Abort, None),
    (K.M_ACK, MsgKind.Ack, None),
)


def _kernel():
    from . import kernel

    return kernel


@dataclass(frozen=True)
class CheckConfig:
    """A static tree: ``children_of[i]`` is the child bitmask of node ``i``."""

    nodes: int
    children_of: tuple[int, ...]
    root: int = 0

    def __post_init__(self):
        if not 1 <= self.nodes <= K.MAX_NODES:
            raise ValueError(f"nodes must be in 1..{K.MAX_NODES}")
        if len(self.children_of) != self.nodes:
            raise ValueError("children_of needs one mask per node")

    @classmethod
    def from_parents(cls, parents: Iterable[Optional[int]]) -> "CheckConfig":
        parents = list(parents)
        masks = [0] * len(parents)
        root = None
        for i, p in enumerate(parents):
            if p is None:
                root = i
            else:
                masks[p] |= 1 << i
        return cls(len(parents), tuple(masks), root if root is not None else 0)

    @classmethod
    def chain(cls, nodes: int) -> "CheckConfig":
        return cls.from_parents([None] + list(range(nodes - 1)))

    @classmethod
    def flat(cls, nodes: int) -> "CheckConfig":
        return cls.from_parents([None] + [0] * (nodes - 1))

    def depth(self) -> int:
        def d(i):
            kids = [c for c in range(self.nodes) if (self.children_of[i] >> c) & 1]
            return 1 + max((d(c) for c in kids), default=0)

        return d(self.root) - 1

    def initial(self) -> tuple:
        return K.initial_state(self.nodes, dict(enumerate(self.children_of)))

    def automorphisms(self) -> tuple[tuple[int, ...], ...]:
        """Node renamings that fix the root and map the initial tree onto
        itself, excluding the identity."""
        kids = [
            frozenset(c for c in range(self.nodes) if (self.children_of[i] >> c) & 1)
            for i in range(self.nodes)
        ]
        out = []
        for perm in itertools.permutations(range(self.nodes)):
            if perm[self.root] != self.root or perm == tuple(range(self.nodes)):
                continue
            if all(frozenset(perm[c] for c in kids[i]) == kids[perm[i]] for i in range(self.nodes)):
                out.append(perm)
        return tuple(out)

    def describe(self) -> str:
        edges = [
            f"{i}->{c}"
            for i in range(self.nodes)
            for c in range(self.nodes)
            if (self.children_of[i] >> c) & 1
        ]
        return f"nodes={self.nodes} root={self.root} edges={','.join(edges) or '-'}"


def tree_configs(max_nodes: int = 4, max_depth: int = 3) -> list[CheckConfig]:
    """Every rooted tree shape (up to isomorphism) within the bounds."""

    def canon(parents, i):
        kids = sorted(canon(parents, c) for c in range(len(parents)) if parents[c] == i)
        return "(" + "".join(kids) + ")"

    seen = {}

    def grow(parents):
        cfg = CheckConfig.from_parents(parents)
        if cfg.depth() > max_depth:
            return
        key = canon(parents, 0)
        if key not in seen:
            seen[key] = cfg
        if len(parents) < max_nodes:
            for p in range(len(parents)):
                grow(parents + [p])

    grow([None])
    return sorted(seen.values(), key=lambda c: (c.nodes, c.depth(), c.children_of))


@dataclass(frozen=True)
class WorldState:
    """Decoded view of a packed state; equality is that of the packed tuple."""

    packed: tuple
    nodes: int

    def node(self, i: int) -> dict:
        w = self.packed[i]
        kids = [c for c in range(self.nodes) if (K.get_children(w) >> c) & 1]
        par = K.get_parent(w)
        return {
            "rmState": TwoPCState(K.get_state(w)),
            "parent": None if par == K.NONE else par,
            "children": kids,
            "intermediate_children": [
                c for c in range(self.nodes) if (K.get_interm(w) >> c) & 1
            ],
            "votes": {c: ("unknown", "ok", "no")[K.get_vote(w, c)] for c in kids},
            "acks": {c: bool((K.get_acks(w) >> c) & 1) for c in kids},
        }

    def states(self) -> list[TwoPCState]:
        return [TwoPCState(K.get_state(self.packed[i])) for i in range(self.nodes)]

    def messages(self) -> list[Message]:
        out = []
        for idx, kind, status in _MSG_WORDS:
            word = self.packed[self.nodes + idx]
            for bit in range(64):
                if (word >> bit) & 1:
                    out.append(Message(kind, bit // 8, bit % 8, 0, status))
        return sorted(out, key=Message.ordering_key)

    def consistent(self) -> bool:
        return consistency(self.packed, self.nodes)

    def encode(self) -> str:
        return ".".join(format(x, "x") for x in self.packed)

    @classmethod
    def decode(cls, text: str, nodes: int) -> "WorldState":
        return cls(tuple(int(x, 16) for x in text.split(".")), nodes)

    def __str__(self):
        parts = []
        for i in range(self.nodes):
            d = self.node(i)
            parts.append(
                f"n{i}:{d['rmState'].name} p={d['parent']} ch={d['children']} "
                f"im={d['intermediate_children']} v={d['votes']} a={d['acks']}"
            )
        msgs = " ".join(str(m) for m in self.messages())
        return " | ".join(parts) + f" | msgs: {msgs or '-'}"


def consistency(packed, n) -> bool:
    """No node in COMMIT while another is in ABORT."""
    return K.consistent(packed, n)


@dataclass(frozen=True)
class ExplorationBudget:
    max_states: int = 1_000_000
    max_depth: int = 10_000
    max_dynamic_adds: int = 0


@dataclass
class Violation:
    invariant: str
    path: list  # [(action_name, node, arg, packed_state), ...] from Init
    detail: str = ""


@dataclass
class Report:
    config: CheckConfig
    budget: ExplorationBudget
    kernel: str
    states: int = 0
    edges: int = 0
    diameter: int = 0
    sinks: int = 0
    truncated: bool = False
    violations: list[Violation] = field(default_factory=list)
    seconds: float = 0.0
    outcomes: set = field(default_factory=set)
    reduced: bool = False

    def violated(self, name: str) -> bool:
        return any(v.invariant == name for v in self.violations)

    @property
    def safety_ok(self) -> bool:
        return not self.truncated and not (
            self.violated("Consistency") or self.violated("DecisionStability")
        )

    @property
    def liveness_ok(self) -> bool:
        return not self.truncated and not (
            self.violated("Termination") or self.violated("ProgressMeasure")
        )

    @property
    def passed(self) -> bool:
        return not self.truncated and not self.violations

    def verdicts(self) -> dict[str, str]:
        if self.truncated:
            return {k: "INCONCLUSIVE" for k in ("Consistency", "DecisionStability", "Termination")}
        return {
            name: "FAIL" if self.violated(name) else "PASS"
            for name in ("Consistency", "DecisionStability", "Termination", "ProgressMeasure")
        }

    def summary(self) -> str:
        lines = [
            f"config: {self.config.describe()} dynamic_adds<={self.budget.max_dynamic_adds}",
            f"kernel: {self.kernel}",
            f"states visited: {self.states}" + (" (orbit representatives)" if self.reduced else ""),
            f"edges: {self.edges}",
            f"diameter: {self.diameter}",
            f"quiescent states: {self.sinks}",
            f"elapsed: {self.seconds:.2f}s",
        ]
        if self.truncated:
            lines.append("budget exhausted: result INCONCLUSIVE")
        for name, verdict in self.verdicts().items():
            lines.append(f"{name}: {verdict}")
        return "\n".join(lines)


def enabled_actions(state, config: CheckConfig, max_dyn: int = 0, mutant: int = 0):
    """``[(action_name, node, arg, successor), ...]`` for a packed state."""
    kern = _kernel()
    return [
        (K.ACTION_NAMES[a], node, arg, succ)
        for a, node, arg, succ in kern.successors(state, config.nodes, config.root, max_dyn, mutant)
    ]


def _path(parents, state):
    path = []
    while state is not None:
        prev, step = parents[state]
        path.append(step + (state,) if step else ("Init", -1, -1, state))
        state = prev
    path.reverse()
    return path


def explore(
    config: CheckConfig,
    budget: ExplorationBudget = ExplorationBudget(),
    mutant: int = 0,
    stop_at_first: bool = True,
    symmetry: bool = False,
) -> Report:
    """Breadth-first search over every reachable state.

    With ``symmetry`` the search stores one representative per orbit of the
    tree's automorphism group. The transition relation and every checked
    invariant are invariant under those renamings, so the verdicts are the
    same; counterexample paths then list representatives.
    """
    from . import KERNEL_NAME

    kern = _kernel()
    expand = kern.expand
    terminal_ok = kern.terminal_agreement
    n, root, max_dyn = config.nodes, config.root, budget.max_dynamic_adds
    perms = config.automorphisms() if symmetry else ()
    report = Report(config, budget, KERNEL_NAME, reduced=bool(perms))
    t0 = time.perf_counter()

    init = config.initial()
    if perms:
        init = kern.canonical(init, n, perms)
    parents = {init: (None, None)}
    depth_of = {init: 0}
    frontier = deque([init])
    names = K.ACTION_NAMES

    def flag(name, state, detail=""):
        report.violations.append(Violation(name, _path(parents, state), detail))

    while frontier:
        state = frontier.popleft()
        d = depth_of[state]
        if d > report.diameter:
            report.diameter = d
        succs = expand(state, n, root, max_dyn, mutant, perms)
        if not succs:
            report.sinks += 1
            report.outcomes.add(tuple(state[i] & 7 for i in range(n)))
            if not terminal_ok(state, n):
                flag("Termination", state, "quiescent state with a non-terminal node or disagreement")
        for action, node, arg, nxt, flags in succs:
            report.edges += 1
            if flags & (K.F_UNSTABLE | K.F_NO_PROGRESS):
                parents.setdefault(nxt, (state, (names[action], node, arg)))
                if flags & K.F_UNSTABLE:
                    flag("DecisionStability", nxt)
                if flags & K.F_NO_PROGRESS:
                    flag("ProgressMeasure", nxt)
            if nxt in parents:
                continue
            parents[nxt] = (state, (names[action], node, arg))
            depth_of[nxt] = d + 1
            if flags & K.F_INCONSISTENT:
                flag("Consistency", nxt)
            if len(parents) > budget.max_states or d + 1 > budget.max_depth:
                report.truncated = True
                frontier.clear()
                break
            frontier.append(nxt)
        if stop_at_first and report.violations:
            break

    report.states = len(parents)
    report.seconds = time.perf_counter() - t0
    return report


def conformance_replay(init, steps, config: CheckConfig, max_dyn: int = 1 << 30):
    """Check that each packed state in ``steps`` follows from its predecessor
    by one enabled action (or is a stutter).

    Returns ``(True, None)`` or ``(False, (index, pre, post))`` for the first
    divergent transition.
    """
    kern = _kernel()
    cur = init
    for idx, post in enumerate(steps):
        if post != cur:
            succs = kern.successors(cur, config.nodes, config.root, max_dyn, 0)
            if not any(s == post for _, _, _, s in succs):
                return False, (idx, WorldState(cur, config.nodes), WorldState(post, config.nodes))
        cur = post
    return True, None
