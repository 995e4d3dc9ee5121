"""Two-phase commit over per-cluster agreement.

The coordinator is one of the accessed clusters (the client picks the
one holding the most of the transaction's keys, lowest partition id on
ties).  Prepare records and votes only travel once they sit inside a
certified batch, so every message here carries an f+1 certificate and
a byzantine leader cannot fabricate a vote or a decision.  There are
no timeout aborts: every abort carries a conflict reason or a negative
vote.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .conflict import Transaction
from .crypto import QuorumCertificate
from .ledger import CommitRecord, PreparedInfo


# -- messages (all certificate-bearing except the client read round) --


@dataclass(frozen=True)
class ReadRequest:
    txn_id: str
    keys: tuple[str, ...]


@dataclass(frozen=True)
class ReadReply:
    txn_id: str
    partition: int
    entries: tuple[tuple[str, bytes, int], ...]  # key, value, version
    lce: int


@dataclass(frozen=True)
class Submit:
    txn: Transaction

    @property
    def txn_id(self) -> str:
        return self.txn.txn_id


@dataclass(frozen=True)
class CoordinatorPrepare:
    """Step 3: the coordinator's certified prepare, fanned out to
    every other accessed partition."""

    txn: Transaction
    info: PreparedInfo  # the coordinator's own certified vote

    @property
    def txn_id(self) -> str:
        return self.txn.txn_id


@dataclass(frozen=True)
class PreparedMsg:
    """Step 5: a participant's certified vote back to the coordinator."""

    txn_id: str
    info: PreparedInfo


@dataclass(frozen=True)
class CommitMsg:
    """Step 7: the certified commit record, fanned out to participants."""

    record: CommitRecord

    @property
    def txn_id(self) -> str:
        return self.record.txn_id


@dataclass(frozen=True)
class ClientReply:
    txn_id: str
    outcome: str  # "committed" | "aborted"
    reason: str | None = None
    certificate: QuorumCertificate | None = None


def choose_coordinator(partition_keys: dict[int, int]) -> int:
    """Most keys wins; ties go to the lowest partition id."""
    return min(partition_keys, key=lambda p: (-partition_keys[p], p))


@dataclass
class CoordinatorState:
    """Per-transaction 2PC bookkeeping at the coordinator's leader."""

    txn: Transaction
    client: str
    votes: dict[int, PreparedInfo | None] = field(default_factory=dict)
    phase: str = "preparing"  # preparing | collecting | deciding | done
    own_prepare_batch: int = -1

    def __post_init__(self) -> None:
        if not self.votes:
            self.votes = {p: None for p in self.txn.accessed_partitions}

    def record_vote(self, info: PreparedInfo) -> None:
        if self.phase == "done":
            return
        if self.votes.get(info.partition) is None:
            self.votes[info.partition] = info

    def all_votes_in(self) -> bool:
        return all(v is not None for v in self.votes.values())

    def decide(self, coordinator: int) -> CommitRecord:
        """Commit iff every vote is positive; callable once all are in."""
        assert self.all_votes_in()
        infos = tuple(self.votes[p] for p in sorted(self.votes))
        decision = "commit" if all(i.vote for i in infos) else "abort"
        self.phase = "done"
        return CommitRecord(
            txn_id=self.txn.txn_id,
            decision=decision,
            coordinator=coordinator,
            prepared=infos,
            certificate=None,  # minted by the coordinator's next agreement
        )
