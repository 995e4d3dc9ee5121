"""Conflict-dependency vectors and read-only transaction verification.

Every batch carries a CD vector: one entry per partition holding the
highest prepare-batch id of that partition the batch's state depends
on, directly or transitively (-1 means no dependency).  A read-only
client collects one certified snapshot per accessed partition and uses
the vectors to detect when one snapshot depends on a distributed
commit that another snapshot has not yet absorbed.  Missing
dependencies are repaired with a single second round; a third round is
never needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import merkle
from .crypto import QuorumCertificate, SignatureScheme

CDVector = tuple[int, ...]


def new_vector(n_partitions: int) -> CDVector:
    return (-1,) * n_partitions


def pairwise_max(a: CDVector, b: CDVector) -> CDVector:
    return tuple(x if x >= y else y for x, y in zip(a, b))


@dataclass(frozen=True)
class SnapshotClaim:
    """The read-only segment of a batch, as certified for clients."""

    partition: int
    batch_index: int
    merkle_root: bytes
    lce: int
    cd_vector: CDVector
    timestamp: int


@dataclass(frozen=True)
class ROResponse:
    claim: SnapshotClaim
    proof: merkle.MerkleProof
    certificate: QuorumCertificate

    @property
    def partition(self) -> int:
        return self.claim.partition


@dataclass(frozen=True)
class UnsatisfiedDependency:
    partition: int
    required_prepare_batch: int


# -- wire messages ----------------------------------------------------


@dataclass(frozen=True)
class ROQuery:
    txn_id: str
    keys: tuple[str, ...]


@dataclass(frozen=True)
class RODepQuery:
    """Second round: fetch the earliest batch whose LCE covers the
    missing prepare-batch dependency.

    ``have_index`` is the batch index the client already holds from the
    first round, so the responder can attach the certified batches in
    between (the client mines their commit records for writes that its
    other snapshots have not absorbed yet).
    """

    txn_id: str
    keys: tuple[str, ...]
    required_prepare_batch: int
    have_index: int = -1


@dataclass(frozen=True)
class ROResponseMsg:
    txn_id: str
    response: ROResponse
    round: int
    # Second-round only: the certified batches between the client's
    # first-round snapshot and the served one, newest last.
    delta: tuple = ()


@dataclass(frozen=True)
class RODepUnavailable:
    txn_id: str
    partition: int
    required_prepare_batch: int


def derive_dep_vector(
    prev: CDVector,
    partition: int,
    batch_index: int,
    committed: Iterable,
) -> CDVector:
    """Compute a batch's CD vector from its committed segment.

    Starts from the previous batch's vector, folds in every commit
    record's reported vectors (which already carry the reporters'
    transitive dependencies) plus the direct dependency on each
    reporter's prepare batch, then stamps the self entry.  Aborted
    records contribute nothing: their writes never become state.
    """
    entries = list(prev)
    for record in committed:
        if record.decision != "commit":
            continue
        for info in record.prepared:
            for i, v in enumerate(info.cd_vector):
                if v > entries[i]:
                    entries[i] = v
            if info.prepare_batch > entries[info.partition]:
                entries[info.partition] = info.prepare_batch
    entries[partition] = batch_index
    return tuple(entries)


def verify_dependencies(
    responses: Sequence[ROResponse],
) -> list[UnsatisfiedDependency]:
    """Cross-check the collected snapshots; empty result means satisfied.

    A response from partition i whose vector points at a prepare batch
    of partition j beyond what partition j's response has committed
    (entry > that response's LCE) names a missing dependency.  One
    requirement per partition is reported, at the highest batch asked
    for.
    """
    required: dict[int, int] = {}
    by_partition = {r.partition: r for r in responses}
    for r in responses:
        for j, other in by_partition.items():
            if j == r.partition:
                continue
            needed = r.claim.cd_vector[j]
            if needed > other.claim.lce and needed > required.get(j, -1):
                required[j] = needed
    return [
        UnsatisfiedDependency(partition, batch)
        for partition, batch in sorted(required.items())
    ]


def check_freshness(response: ROResponse, client_clock: int, delta: int) -> bool:
    return abs(client_clock - response.claim.timestamp) <= delta


def verify_response(
    response: ROResponse,
    keys: Sequence[str],
    public_key_of: Callable[[str], bytes],
    scheme: SignatureScheme,
) -> bool:
    """Certificate plus Merkle check; the response must cover ``keys``."""
    proved = {entry.key for entry in response.proof.entries}
    if not all(k in proved for k in keys):
        return False
    return merkle.verify_proof(
        response.proof, response.certificate, response.claim, public_key_of, scheme
    )


def read_values(response: ROResponse) -> dict[str, tuple[bytes | None, int]]:
    """Extract (value, version) per key from a verified response."""
    return {
        entry.key: (entry.value, entry.version) for entry in response.proof.entries
    }
