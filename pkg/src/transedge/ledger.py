"""The per-partition replicated log of batches.

Each batch has four transaction segments (local, prepared, committed,
rejected) plus the read-only metadata: CD vector, last-committed-epoch
(LCE), Merkle root, and timestamp.  Prepared distributed transactions
are tracked per prepare batch in the prepared-batches structure until
a decision arrives for every member; groups then drain into a later
batch's committed segment strictly in prepare-batch order, and the LCE
advances to the drained group's id.

Sealing is a two-step affair because agreement runs between them:
``seal`` builds the proposal (admission-checking every queued
transaction and previewing the new root) without touching durable
state, and ``apply`` makes it real once a quorum certificate exists.
Validators run ``validate_proposal`` against their own copy of the
same state, which is what stops a byzantine leader from smuggling in a
wrong vector, a skipped conflict check, or an uncertified commit
record.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from . import conflict, readonly
from .conflict import ConflictVerdict, LedgerView, Transaction
from .crypto import QuorumCertificate, SignatureScheme, digest_of, verify_certificate
from .merkle import MerkleStore
from .readonly import CDVector, SnapshotClaim


class SegmentClosed(Exception):
    pass


class UnknownTransaction(KeyError):
    pass


class DuplicateVote(Exception):
    pass


class UnknownBatch(KeyError):
    pass


@dataclass(frozen=True)
class PreparedInfo:
    """One partition's certified prepare vote, as collected by a coordinator."""

    partition: int
    vote: bool
    prepare_batch: int  # -1 on a negative vote (nothing entered a batch)
    cd_vector: CDVector
    certificate: QuorumCertificate | None = None


@dataclass(frozen=True)
class CommitRecord:
    txn_id: str
    decision: str  # "commit" | "abort"
    coordinator: int
    prepared: tuple[PreparedInfo, ...]
    certificate: QuorumCertificate | None = None  # coordinator-cluster cert


@dataclass(frozen=True)
class CommittedEntry:
    txn: Transaction
    record: CommitRecord
    group: int  # prepare batch id the transaction belonged to here


@dataclass(frozen=True)
class RejectEntry:
    txn_id: str
    reason: str
    other_txn: str | None = None


@dataclass
class Batch:
    partition: int
    index: int
    local: tuple[Transaction, ...]
    prepared: tuple[Transaction, ...]
    committed: tuple[CommittedEntry, ...]
    rejected: tuple[RejectEntry, ...]
    cd_vector: CDVector
    lce: int
    merkle_root: bytes
    timestamp: int
    certificate: QuorumCertificate | None = None
    claim_certificate: QuorumCertificate | None = None

    def digest(self) -> bytes:
        # Memoized: batches are immutable once built (certificates are
        # attached later but excluded from the digest), and clients
        # re-verify the same delta batches many times.
        cached = self.__dict__.get("_digest")
        if cached is None:
            cached = digest_of(
                (
                    self.partition,
                    self.index,
                    self.local,
                    self.prepared,
                    self.committed,
                    self.rejected,
                    self.cd_vector,
                    self.lce,
                    self.merkle_root,
                    self.timestamp,
                )
            )
            self.__dict__["_digest"] = cached
        return cached

    def claim(self) -> SnapshotClaim:
        return SnapshotClaim(
            partition=self.partition,
            batch_index=self.index,
            merkle_root=self.merkle_root,
            lce=self.lce,
            cd_vector=self.cd_vector,
            timestamp=self.timestamp,
        )


# Claims are the client-visible facts replicas co-sign while certifying
# a batch; f+1 matching signatures make each one transferable.


@dataclass(frozen=True)
class PreparedClaim:
    txn_id: str
    partition: int
    vote: bool
    prepare_batch: int
    cd_vector: CDVector


@dataclass(frozen=True)
class CommitClaim:
    txn_id: str
    decision: str
    coordinator: int


@dataclass(frozen=True)
class ReplyClaim:
    txn_id: str
    outcome: str  # "committed" | "aborted"
    partition: int


def batch_claims(batch: Batch) -> list:
    """Every claim an honest replica signs alongside the batch digest.

    The list is a deterministic function of the batch contents so that
    the leader and all validators enumerate it identically.
    """
    claims: list = [batch.claim()]
    for txn in batch.prepared:
        claims.append(
            PreparedClaim(
                txn_id=txn.txn_id,
                partition=batch.partition,
                vote=True,
                prepare_batch=batch.index,
                cd_vector=batch.cd_vector,
            )
        )
    for entry in batch.rejected:
        # A rejection may need to travel as a negative vote or as an
        # abort reply; replicas sign both shapes, senders pick one.
        claims.append(
            PreparedClaim(
                txn_id=entry.txn_id,
                partition=batch.partition,
                vote=False,
                prepare_batch=-1,
                cd_vector=(),
            )
        )
        claims.append(ReplyClaim(entry.txn_id, "aborted", batch.partition))
    for entry in batch.committed:
        outcome = "committed" if entry.record.decision == "commit" else "aborted"
        claims.append(ReplyClaim(entry.txn.txn_id, outcome, batch.partition))
        claims.append(
            CommitClaim(
                entry.txn.txn_id, entry.record.decision, entry.record.coordinator
            )
        )
    for txn in batch.local:
        claims.append(ReplyClaim(txn.txn_id, "committed", batch.partition))
    return claims


def batch_claim_digests(batch: Batch) -> tuple[list, list[bytes]]:
    """Claims plus their digests, computed once per batch object.

    Leader and validators all enumerate the claims of the same proposed
    batch, so the result rides along on the instance.
    """
    cached = batch.__dict__.get("_claim_digests")
    if cached is None:
        claims = batch_claims(batch)
        cached = (claims, [digest_of(c) for c in claims])
        batch.__dict__["_claim_digests"] = cached
    return cached


@dataclass
class _Member:
    txn: Transaction
    record: CommitRecord | None = None  # None while pending


class PreparedBatches:
    """Undecided prepare groups, ordered by prepare batch id.

    A group is ready once every member has a decision; groups may only
    leave in key order, so a ready group behind a pending one waits.
    """

    def __init__(self) -> None:
        self._groups: dict[int, dict[str, _Member]] = {}

    def register(self, prepare_batch: int, txn: Transaction) -> None:
        group = self._groups.setdefault(prepare_batch, {})
        group[txn.txn_id] = _Member(txn)

    def remove(self, prepare_batch: int, txn_id: str) -> None:
        group = self._groups.get(prepare_batch)
        if group and txn_id in group:
            del group[txn_id]
            if not group:
                del self._groups[prepare_batch]

    def record_vote(self, prepare_batch: int, txn_id: str, record: CommitRecord) -> None:
        group = self._groups.get(prepare_batch)
        if group is None or txn_id not in group:
            raise UnknownTransaction(f"{txn_id} in prepare batch {prepare_batch}")
        member = group[txn_id]
        if member.record is not None:
            if member.record.decision == record.decision:
                return  # duplicate delivery, same outcome: idempotent
            raise DuplicateVote(txn_id)
        member.record = record

    def has(self, prepare_batch: int, txn_id: str) -> bool:
        group = self._groups.get(prepare_batch)
        return bool(group) and txn_id in group

    def pending_txns(self, exclude_group: int | None = None) -> list[Transaction]:
        """Every undrained prepared transaction, decided or not.

        Admission must be re-derivable by validators, and decisions
        travel to the leader first; group membership and drains are the
        only replicated facts, so even an aborted member keeps blocking
        until its group drains.
        """
        out = []
        for gid, group in self._groups.items():
            if gid == exclude_group:
                continue
            for member in group.values():
                out.append(member.txn)
        return out

    def membership(self, prepare_batch: int) -> set[str] | None:
        group = self._groups.get(prepare_batch)
        return set(group) if group is not None else None

    def drain_plan(self) -> list[tuple[int, list[tuple[Transaction, CommitRecord]]]]:
        """Oldest consecutive ready groups, in order; nothing is removed."""
        plan = []
        for gid in sorted(self._groups):
            group = self._groups[gid]
            if any(m.record is None for m in group.values()):
                break
            plan.append((gid, [(m.txn, m.record) for m in group.values()]))
        return plan

    def drop_groups(self, group_ids: Iterable[int]) -> None:
        for gid in group_ids:
            self._groups.pop(gid, None)

    def oldest_pending(self) -> int | None:
        return min(self._groups) if self._groups else None


class ValidationFailure(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# Proposal-validation verdicts keyed by (partition, index, predecessor
# digest, proposal digest): None for pass, the failure reason otherwise.
# Validation is deterministic given the applied prefix, so one sibling's
# verdict answers for all of them.
_VALIDATION_MEMO: dict[tuple, str | None] = {}
_MEMO_MISS = object()


@dataclass
class SealOutcome:
    batch: Batch
    admitted: list[Transaction]
    rejected: list[tuple[Transaction, ConflictVerdict]]


class Ledger:
    """One replica's copy of a partition's log and derived state.

    The genesis state (before any batch) has LCE -1 and an all -1 CD
    vector; the first sealed batch takes index 0.  Initial data loaded
    before the log starts is recorded under version -1.
    """

    def __init__(
        self,
        partition: int,
        n_partitions: int,
        key_owner: Callable[[str], int],
        store: MerkleStore | None = None,
    ) -> None:
        self.partition = partition
        self.n_partitions = n_partitions
        self.key_owner = key_owner
        self.store = store if store is not None else MerkleStore()
        if self.store.latest_version is None:
            self.store.apply_writes([], -1)
        self.batches: list[Batch] = []
        self.prepared_batches = PreparedBatches()
        self.prev_cd: CDVector = readonly.new_vector(n_partitions)
        self.prev_lce: int = -1
        self._local_queue: list[Transaction] = []
        self._prepared_queue: list[Transaction] = []
        self._reject_queue: list[RejectEntry] = []
        self._sealing = False
        self._pending_seal: Batch | None = None
        # lce per batch index, for "earliest batch with lce >= p" lookups
        self.lce_history: list[int] = []

    # -- in-progress batch --------------------------------------------

    @property
    def next_index(self) -> int:
        return len(self.batches)

    def append_local(self, txn: Transaction) -> None:
        if self._sealing:
            raise SegmentClosed("batch is sealing")
        self._local_queue.append(txn)

    def append_prepared(self, txn: Transaction) -> None:
        if self._sealing:
            raise SegmentClosed("batch is sealing")
        # Not registered in prepared_batches yet: the prepare batch id is
        # whatever batch the transaction eventually seals into, which is
        # only known at apply time.
        self._prepared_queue.append(txn)

    def append_rejected(self, entry: RejectEntry) -> None:
        if self._sealing:
            raise SegmentClosed("batch is sealing")
        self._reject_queue.append(entry)

    def record_vote(self, prepare_batch: int, txn_id: str, record: CommitRecord) -> None:
        self.prepared_batches.record_vote(prepare_batch, txn_id, record)

    def has_work(self) -> bool:
        return bool(
            self._local_queue
            or self._prepared_queue
            or self._reject_queue
            or self.prepared_batches.drain_plan()
        )

    def _owns(self, key: str) -> bool:
        return self.key_owner(key) == self.partition

    def admission_view(self, batch_mates: list[Transaction]) -> LedgerView:
        return LedgerView(
            committed_version=self.store.version_of,
            in_progress=batch_mates,
            pending_prepared=self.prepared_batches.pending_txns(
                exclude_group=self.next_index
            ),
            owns=self._owns,
        )

    def admission_check(self, txn: Transaction) -> ConflictVerdict:
        """Quick check at arrival, against queued work; sealing re-checks."""
        mates = self._local_queue + self._prepared_queue
        return conflict.check(txn, self.admission_view(mates))

    # -- sealing and applying -----------------------------------------

    def seal(self, now: int) -> SealOutcome:
        if self._pending_seal is not None:
            raise SegmentClosed("previous batch not applied yet")
        self._sealing = True
        try:
            index = self.next_index
            plan = self.prepared_batches.drain_plan()
            committed = tuple(
                CommittedEntry(txn, record, gid)
                for gid, members in plan
                for txn, record in members
            )
            lce = plan[-1][0] if plan else self.prev_lce
            drain_txns = [
                e.txn for e in committed if e.record.decision == "commit"
            ]

            admitted_local: list[Transaction] = []
            admitted_prepared: list[Transaction] = []
            rejected: list[tuple[Transaction, ConflictVerdict]] = []
            mates: list[Transaction] = list(drain_txns)
            pending = self.prepared_batches.pending_txns(
                exclude_group=self.next_index
            )
            view = LedgerView(
                committed_version=self.store.version_of,
                in_progress=mates,
                pending_prepared=pending,
                owns=self._owns,
            )
            for txn, bucket in [
                (t, admitted_local) for t in self._local_queue
            ] + [(t, admitted_prepared) for t in self._prepared_queue]:
                verdict = conflict.check(txn, view)
                if verdict.ok:
                    bucket.append(txn)
                    mates.append(txn)
                else:
                    rejected.append((txn, verdict))

            reject_entries = tuple(
                self._reject_queue
                + [
                    RejectEntry(t.txn_id, v.reason, v.other_txn)
                    for t, v in rejected
                ]
            )
            records = [e.record for e in committed]
            cd_vector = readonly.derive_dep_vector(
                self.prev_cd, self.partition, index, records
            )
            writes = self._batch_writes(index, admitted_local, committed)
            merged_writes = self.store.merge_writes(writes)
            root = self.store.preview_merged(merged_writes)
            batch = Batch(
                partition=self.partition,
                index=index,
                local=tuple(admitted_local),
                prepared=tuple(admitted_prepared),
                committed=committed,
                rejected=reject_entries,
                cd_vector=cd_vector,
                lce=lce,
                merkle_root=root,
                timestamp=now,
            )
            batch.__dict__["_merged"] = merged_writes
            self._pending_seal = batch
            self._local_queue = []
            self._prepared_queue = []
            self._reject_queue = []
            return SealOutcome(batch, admitted_local + admitted_prepared, rejected)
        finally:
            self._sealing = False

    def _batch_writes(
        self,
        batch_index: int,
        local: Iterable[Transaction],
        committed: Iterable[CommittedEntry],
    ) -> list[tuple[str, bytes, int]]:
        """Writes a batch applies, as (key, value, version) triples.

        Drained distributed writes are versioned by their prepare-group
        id, local writes by the batch index itself; admission keeps the
        two ranges from ever colliding on one key out of order.
        """
        writes: list[tuple[str, bytes, int]] = []
        for entry in committed:
            if entry.record.decision != "commit":
                continue
            for key, value in entry.txn.write_set:
                if self.key_owner(key) == self.partition:
                    writes.append((key, value, entry.group))
        for txn in local:
            for key, value in txn.write_set:
                writes.append((key, value, batch_index))
        return writes

    def apply(self, batch: Batch) -> None:
        """Make a certified batch durable on this replica."""
        assert batch.index == self.next_index, "log must stay dense"
        # All replicas of a partition apply the same certified batch
        # object; merge its writes once and share the result.
        merged = batch.__dict__.get("_merged")
        if merged is None:
            writes = self._batch_writes(batch.index, batch.local, batch.committed)
            merged = self.store.merge_writes(writes)
            batch.__dict__["_merged"] = merged
        root = self.store.apply_merged(merged, batch.index)
        assert root == batch.merkle_root, "applied root diverges from certified root"
        self.prepared_batches.drop_groups({e.group for e in batch.committed})
        for txn in batch.prepared:
            # Follower replicas first hear of a prepare through the
            # certified batch itself; leaders registered it at append.
            if not self.prepared_batches.has(batch.index, txn.txn_id):
                self.prepared_batches.register(batch.index, txn)
        self.prev_cd = batch.cd_vector
        self.prev_lce = batch.lce
        self.batches.append(batch)
        self.lce_history.append(batch.lce)
        if self._pending_seal is not None and self._pending_seal.index == batch.index:
            self._pending_seal = None

    def abandon_seal(self) -> Batch | None:
        """Drop a sealed-but-uncertified proposal (agreement failed)."""
        batch = self._pending_seal
        self._pending_seal = None
        if batch is not None:
            for txn in batch.prepared:
                self.prepared_batches.remove(batch.index, txn.txn_id)
        return batch

    # -- queries -------------------------------------------------------

    def get_batch(self, index: int) -> Batch:
        if 0 <= index < len(self.batches):
            return self.batches[index]
        raise UnknownBatch(index)

    def get_latest(self) -> Batch:
        if not self.batches:
            raise UnknownBatch(-1)
        return self.batches[-1]

    def earliest_batch_with_lce(self, required: int) -> Batch | None:
        """Earliest certified batch whose LCE covers a prepare batch id."""
        import bisect

        i = bisect.bisect_left(self.lce_history, required)
        if i < len(self.lce_history):
            return self.batches[i]
        return None

    # -- proposal validation (honest replica duty) ---------------------

    def validate_proposal(
        self,
        batch: Batch,
        now: int,
        freshness_delta: int,
        public_key_of: Callable[[str], bytes],
        scheme: SignatureScheme,
        reply_threshold_of: Callable[[int], int],
    ) -> None:
        """Raise ValidationFailure unless the proposal checks out.

        Re-derives everything the leader asserted: admission verdicts,
        drain order and completeness, vote certificates, CD vector,
        LCE, Merkle root, and the timestamp window.
        """
        if batch.partition != self.partition or batch.index != self.next_index:
            raise ValidationFailure("wrong partition or index")
        if abs(batch.timestamp - now) > freshness_delta:
            raise ValidationFailure("timestamp outside acceptance window")
        # Everything below is a pure function of the applied prefix and
        # the proposal, so sibling validators reach the same verdict;
        # memoize it under (state fingerprint, proposal digest).
        memo_key = (
            self.partition,
            batch.index,
            self.batches[-1].digest() if self.batches else b"genesis",
            batch.digest(),
        )
        cached = _VALIDATION_MEMO.get(memo_key, _MEMO_MISS)
        if cached is not _MEMO_MISS:
            if cached is None:
                return
            raise ValidationFailure(cached)
        try:
            self._validate_content(
                batch, public_key_of, scheme, reply_threshold_of
            )
        except ValidationFailure as failure:
            _VALIDATION_MEMO[memo_key] = failure.reason
            raise
        if len(_VALIDATION_MEMO) > 200_000:
            _VALIDATION_MEMO.clear()
        _VALIDATION_MEMO[memo_key] = None

    def _validate_content(
        self,
        batch: Batch,
        public_key_of: Callable[[str], bytes],
        scheme: SignatureScheme,
        reply_threshold_of: Callable[[int], int],
    ) -> None:
        # Drain legality: consecutive oldest groups, full membership,
        # every record certified.
        drained_ids = []
        for entry in batch.committed:
            if not drained_ids or entry.group != drained_ids[-1]:
                drained_ids.append(entry.group)
        if sorted(set(drained_ids)) != drained_ids:
            raise ValidationFailure("drained groups out of order")
        oldest = self.prepared_batches.oldest_pending()
        expect = oldest
        for gid in drained_ids:
            if expect is None or gid != expect:
                raise ValidationFailure("drain skips or predates a pending group")
            members = self.prepared_batches.membership(gid) or set()
            drained_members = {
                e.txn.txn_id for e in batch.committed if e.group == gid
            }
            if members != drained_members:
                raise ValidationFailure("drained group membership mismatch")
            expect = self._next_group_after(gid)
        for entry in batch.committed:
            self._validate_record(entry.record, public_key_of, scheme, reply_threshold_of)

        expected_lce = drained_ids[-1] if drained_ids else self.prev_lce
        if batch.lce != expected_lce:
            raise ValidationFailure("wrong LCE")

        # Admission re-check in canonical order.
        drain_txns = [
            e.txn for e in batch.committed if e.record.decision == "commit"
        ]
        for txn in batch.local:
            if txn.kind != conflict.LOCAL:
                raise ValidationFailure("non-local transaction in local segment")
        for txn in batch.prepared:
            if txn.kind != conflict.DISTRIBUTED:
                raise ValidationFailure("non-distributed transaction prepared")
        mates = list(drain_txns)
        pending = self.prepared_batches.pending_txns(exclude_group=batch.index)
        for txn in list(batch.local) + list(batch.prepared):
            view = LedgerView(
                committed_version=self.store.version_of,
                in_progress=mates,
                pending_prepared=pending,
                owns=self._owns,
            )
            verdict = conflict.check(txn, view)
            if not verdict.ok:
                raise ValidationFailure(f"admission fails: {verdict.reason}")
            mates.append(txn)

        records = [e.record for e in batch.committed]
        cd = readonly.derive_dep_vector(
            self.prev_cd, self.partition, batch.index, records
        )
        if batch.cd_vector != cd:
            raise ValidationFailure("wrong CD vector")
        writes = self._batch_writes(batch.index, batch.local, batch.committed)
        merged = self.store.merge_writes(writes)
        batch.__dict__.setdefault("_merged", merged)
        if batch.merkle_root != self.store.preview_merged(merged):
            raise ValidationFailure("wrong merkle root")

    def _next_group_after(self, gid: int) -> int | None:
        groups = sorted(self.prepared_batches._groups)
        for g in groups:
            if g > gid:
                return g
        return None

    def _validate_record(
        self,
        record: CommitRecord,
        public_key_of: Callable[[str], bytes],
        scheme: SignatureScheme,
        reply_threshold_of: Callable[[int], int],
    ) -> None:
        if record.certificate is not None:
            claim = CommitClaim(record.txn_id, record.decision, record.coordinator)
            ok = verify_certificate(
                record.certificate,
                public_key_of,
                scheme,
                expected_digest=digest_of(claim),
            ) and record.certificate.threshold >= reply_threshold_of(record.coordinator)
            if not ok:
                raise ValidationFailure("bad coordinator certificate on record")
            return
        # A record minted by this partition's own coordinator: check the
        # collected votes instead, since our own certificate is being
        # created by this very agreement.
        if record.coordinator != self.partition:
            raise ValidationFailure("foreign record without certificate")
        votes_ok = all(info.vote for info in record.prepared)
        if (record.decision == "commit") != votes_ok:
            raise ValidationFailure("decision contradicts votes")
        for info in record.prepared:
            claim = PreparedClaim(
                txn_id=record.txn_id,
                partition=info.partition,
                vote=info.vote,
                prepare_batch=info.prepare_batch,
                cd_vector=info.cd_vector,
            )
            if info.certificate is None or not (
                verify_certificate(
                    info.certificate,
                    public_key_of,
                    scheme,
                    expected_digest=digest_of(claim),
                )
                and info.certificate.threshold >= reply_threshold_of(info.partition)
            ):
                raise ValidationFailure("bad prepared-vote certificate")
