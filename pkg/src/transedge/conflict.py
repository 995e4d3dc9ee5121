"""Optimistic conflict detection for batch admission.

A transaction enters an in-progress batch only if it passes three
checks, applied in order:

1. its reads are still current (no committed write has overwritten a
   version it read),
2. it does not conflict with any transaction already in the in-progress
   batch (any segment), and
3. it does not conflict with any prepared-but-undecided distributed
   transaction.

The batch-membership checks (2 and 3) are key-overlap tests applied in
both directions, because admission happens before versions are
assigned.  The version-aware ``conflicts`` function is for committed
histories, where it classifies edges as wr, rw, or ww.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable

from .crypto import memoize_encoding

LOCAL = "local"
DISTRIBUTED = "distributed"
READ_ONLY = "read_only"


@dataclass
class Transaction:
    """A client transaction as submitted for execution.

    read_set entries are (key, value, version) with version being the
    batch index of the committed write the client observed; write_set
    entries are (key, value) buffered until commit.
    """

    txn_id: str
    kind: str
    read_set: tuple[tuple[str, bytes, int], ...]
    write_set: tuple[tuple[str, bytes], ...]
    accessed_partitions: tuple[int, ...]
    coordinator: int = -1

    def __post_init__(self) -> None:
        if self.kind == LOCAL and len(self.accessed_partitions) != 1:
            raise ValueError("local transaction must access exactly one partition")
        if self.kind == READ_ONLY and self.write_set:
            raise ValueError("read-only transaction carries writes")

    @cached_property
    def read_keys(self) -> frozenset[str]:
        return frozenset(k for k, _, _ in self.read_set)

    @cached_property
    def write_keys(self) -> frozenset[str]:
        return frozenset(k for k, _ in self.write_set)

    @cached_property
    def footprint(self) -> frozenset[str]:
        """Every key the transaction touches, for cheap disjointness tests."""
        return self.read_keys | self.write_keys


# A transaction is encoded into its proposal, every validator's
# re-derived batch, and any commit record that carries it; cache the
# bytes on the instance.
memoize_encoding(Transaction)


@dataclass(frozen=True)
class ConflictVerdict:
    ok: bool
    reason: str | None = None  # stale_read | conflicts_in_progress | conflicts_prepared
    key: str | None = None
    other_txn: str | None = None

    def __post_init__(self) -> None:
        assert self.ok == (self.reason is None)


@dataclass
class LedgerView:
    """What the admission check is allowed to see.

    committed_version maps a key to the batch index of its latest
    committed write (-1 if never written).  in_progress holds every
    transaction already placed in the open batch, including commit
    records being drained into it; pending_prepared holds distributed
    transactions that prepared here but whose outcome is unknown.
    """

    committed_version: Callable[[str], int]
    in_progress: list[Transaction] = field(default_factory=list)
    pending_prepared: list[Transaction] = field(default_factory=list)
    # A partition judges only the keys it owns: a distributed
    # transaction's reads on other partitions are their problem.
    owns: Callable[[str], bool] = lambda key: True


def overlaps(
    a: Transaction, b: Transaction, owns: Callable[[str], bool] | None = None
) -> bool:
    """True if the pair conflicts in either direction (key overlap with
    at least one write involved), restricted to keys ``owns`` accepts."""
    aw, bw = a.write_keys, b.write_keys
    ar, br = a.read_keys, b.read_keys
    shared = (aw & bw) | (aw & br) | (ar & bw)
    if owns is None:
        return bool(shared)
    return any(owns(k) for k in shared)


def check(txn: Transaction, view: LedgerView) -> ConflictVerdict:
    """Admission decision for one transaction; first failing rule wins."""
    for key, _value, version in txn.read_set:
        if not view.owns(key):
            continue
        if view.committed_version(key) != version:
            return ConflictVerdict(False, "stale_read", key=key)
    keys = txn.footprint
    for other in view.in_progress:
        if (
            other.txn_id != txn.txn_id
            and not keys.isdisjoint(other.footprint)
            and overlaps(txn, other, view.owns)
        ):
            return ConflictVerdict(
                False, "conflicts_in_progress", other_txn=other.txn_id
            )
    for other in view.pending_prepared:
        if (
            other.txn_id != txn.txn_id
            and not keys.isdisjoint(other.footprint)
            and overlaps(txn, other, view.owns)
        ):
            return ConflictVerdict(
                False, "conflicts_prepared", other_txn=other.txn_id
            )
    return ConflictVerdict(True)


@dataclass(frozen=True)
class CommittedView:
    """A committed transaction with resolved versions, for history checks.

    reads are (key, version observed); writes are (key, version
    assigned), the version being the batch index at which the write
    became visible on the key's partition.
    """

    txn_id: str
    reads: tuple[tuple[str, int], ...]
    writes: tuple[tuple[str, int], ...]


def conflicts(a: CommittedView, b: CommittedView) -> set[str]:
    """Directed conflict types from a to b over a committed history."""
    out: set[str] = set()
    a_writes = dict(a.writes)
    b_writes = dict(b.writes)
    for key, version in b.reads:
        if a_writes.get(key) == version:
            out.add("wr")
            break
    for key, version in a.reads:
        written = b_writes.get(key)
        if written is not None and written > version:
            out.add("rw")
            break
    for key, version in a.writes:
        written = b_writes.get(key)
        if written is not None and written > version:
            out.add("ww")
            break
    return out
