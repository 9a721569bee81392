"""Tree-shaped two-phase commit over replicated log streams, with partition
transfer, unknown transaction states, a deterministic simulator, an
explicit-state checker and cost accounting."""
from .scenario import Scenario, check_expectations, load_scenario, parse_scenario
from .sim import FaultSpec, SimConfig, Topology, TransferSpec, TxnSpec, World, run_to_quiescence
from .state_machine import Machine, Mode, ProtocolVariant, TxnContext
from .types import LogKind, MsgKind, TwoPCState, UserOutcome, VoteStatus

__version__ = "0.1.0"

__all__ = [
    "FaultSpec",
    "LogKind",
    "Machine",
    "Mode",
    "MsgKind",
    "ProtocolVariant",
    "Scenario",
    "SimConfig",
    "Topology",
    "TransferSpec",
    "TwoPCState",
    "TxnContext",
    "TxnSpec",
    "UserOutcome",
    "VoteStatus",
    "World",
    "check_expectations",
    "load_scenario",
    "parse_scenario",
    "run_to_quiescence",
]
