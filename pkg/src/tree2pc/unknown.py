"""Context-loss handling: prepare_unknown, trans_unknown and the per-stream
transaction data table (TDT)."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .types import UserOutcome, VoteStatus

# One tick is one millisecond of simulated time.
TICKS_PER_SECOND = 1000
DEFAULT_TDT_RETENTION = 30 * 60 * TICKS_PER_SECOND


class CoordinatorProvenance(enum.Enum):
    FRESH = "FRESH"
    # Rebuilt by a user retry after the original root context was lost or
    # its response never reached the user.
    RECREATED = "RECREATED"


@dataclass
class TransactionDataTable:
    """Decided outcomes of transactions that finished on one log stream.

    Entries never change once written and expire ``retention`` ticks after
    the decision.
    """

    retention: int = DEFAULT_TDT_RETENTION
    entries: dict[int, tuple[UserOutcome, int]] = field(default_factory=dict)

    def record(self, txn: int, outcome: UserOutcome, now: int) -> None:
        if outcome not in (UserOutcome.COMMITTED, UserOutcome.ABORTED):
            raise ValueError(f"only decided outcomes go in the TDT, got {outcome.name}")
        prev = self.entries.get(txn)
        if prev is not None:
            if prev[0] != outcome:
                raise ValueError(f"TDT outcome for txn {txn} cannot change")
            return
        self.entries[txn] = (outcome, now)

    def lookup(self, txn: int, now: int) -> Optional[UserOutcome]:
        hit = self.entries.get(txn)
        if hit is None or now > hit[1] + self.retention:
            return None
        return hit[0]


@dataclass(frozen=True)
class InquiryAnswer:
    status: VoteStatus
    outcome: Optional[UserOutcome] = None


def resolve_inquiry(
    txn: int,
    now: int,
    unknown_states: bool,
    tdt: Optional[TransactionDataTable] = None,
) -> InquiryAnswer:
    """Reply to a PrepareReq for a transaction this stream no longer holds."""
    if tdt is not None:
        outcome = tdt.lookup(txn, now)
        if outcome == UserOutcome.COMMITTED:
            return InquiryAnswer(VoteStatus.OK, outcome)
        if outcome == UserOutcome.ABORTED:
            return InquiryAnswer(VoteStatus.NO, outcome)
    if unknown_states:
        return InquiryAnswer(VoteStatus.PREPARE_UNKNOWN)
    return InquiryAnswer(VoteStatus.NO)


def root_user_response(
    provenance: CoordinatorProvenance,
    votes: Iterable[VoteStatus],
    unknown_states: bool = True,
) -> UserOutcome:
    """What the root reports to the user once its votes are in."""
    votes = list(votes)
    if all(v == VoteStatus.OK for v in votes):
        return UserOutcome.COMMITTED
    if (
        unknown_states
        and provenance == CoordinatorProvenance.RECREATED
        and any(v == VoteStatus.PREPARE_UNKNOWN for v in votes)
        and not any(v == VoteStatus.NO for v in votes)
    ):
        return UserOutcome.TRANS_UNKNOWN
    return UserOutcome.ABORTED
