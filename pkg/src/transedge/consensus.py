"""Simulated intra-cluster agreement and the replica state machine.

The full three-phase agreement dance is abstracted to propose ->
validate+sign -> certificate, which preserves what the rest of the
protocol relies on: 2f+1 signatures certify a batch, f+1 signatures
certify client-visible claims, and every honest replica independently
re-derives the proposal (conflict admission, drain order, CD vector,
LCE, Merkle root, timestamp window) before signing.  A leader cannot
certify a batch that an honest quorum would not have built itself.

The ReplicaNode below is one replica's entire event-driven state:
consensus participation, the two-phase-commit coordinator and
participant roles when it leads its cluster, and read-only snapshot
serving (any replica answers reads).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from . import readonly, twopc
from .conflict import DISTRIBUTED, LOCAL, Transaction
from .crypto import (
    InsufficientSignatures,
    NodeKeyPair,
    QuorumCertificate,
    Signature,
    SignatureScheme,
    assemble_certificate,
    digest_of,
    verify_certificate,
)
from .ledger import (
    Batch,
    CommitClaim,
    Ledger,
    PreparedClaim,
    PreparedInfo,
    ReplyClaim,
    ValidationFailure,
    batch_claim_digests,
)
from .merkle import MerkleProof, ProofLeaf
from .readonly import RODepQuery, RODepUnavailable, ROQuery, ROResponse, ROResponseMsg
from .twopc import (
    ClientReply,
    CommitMsg,
    CoordinatorPrepare,
    CoordinatorState,
    PreparedMsg,
    ReadReply,
    ReadRequest,
    Submit,
)


@dataclass(frozen=True)
class Propose:
    batch: Batch


@dataclass(frozen=True)
class Validate:
    index: int
    batch_digest: bytes
    batch_sig: Signature
    claim_sigs: tuple[tuple[bytes, Signature], ...]


@dataclass(frozen=True)
class Reject:
    index: int
    reason: str


@dataclass(frozen=True)
class Certified:
    batch: Batch


@dataclass(frozen=True)
class SealTick:
    pass


@dataclass(frozen=True)
class DepTimeout:
    txn_id: str


class AgreementFailed(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class _ProposalState:
    batch: Batch
    claims: list
    claim_digests: list[bytes]
    recipients: list[str]
    batch_sigs: dict[str, Signature] = field(default_factory=dict)
    claim_sigs: dict[bytes, dict[str, Signature]] = field(default_factory=dict)
    certified: bool = False


class ReplicaNode:
    """One replica of one partition's cluster."""

    def __init__(
        self,
        node_id: str,
        partition: int,
        topology,
        keypair: NodeKeyPair,
        scheme: SignatureScheme,
        sim,
        ledger: Ledger,
        trace,
        config,
        behavior_rng,
    ) -> None:
        self.node_id = node_id
        self.partition = partition
        self.topology = topology
        self.keypair = keypair
        self.scheme = scheme
        self.sim = sim
        self.ledger = ledger
        self.trace = trace
        self.config = config
        self.behavior = "honest"
        self.behavior_spec = None
        self.colluders: set[str] = set()
        self.behavior_rng = behavior_rng
        self.is_leader = topology.leader(partition) == node_id

        self._signed_digest: dict[int, bytes] = {}
        self._buffered: dict[int, list[tuple[str, Any]]] = {}
        self._proposals: dict[bytes, _ProposalState] = {}
        self._inflight_index: int | None = None
        self._rejecters: dict[str, str] = {}
        self.claim_certs: dict[bytes, QuorumCertificate] = {}
        self._ctx: dict[str, dict] = {}
        self._coord: dict[str, CoordinatorState] = {}
        self._seen: set[tuple[str, str]] = set()
        self._parked_deps: dict[str, tuple[str, RODepQuery, float]] = {}
        self._parked_queries: list[tuple[str, ROQuery]] = []

    # -- plumbing -----------------------------------------------------

    def clock(self) -> float:
        return self.sim.clock(self.node_id)

    def send(self, to: str, payload: Any) -> None:
        if self.behavior == "mute":
            return
        self.sim.send(self.node_id, to, payload)

    def _sign(self, digest: bytes) -> Signature:
        secret = self.keypair.secret_key
        if self.behavior == "forge_sig":
            secret = bytes(b ^ 0xFF for b in secret)
        return Signature(self.node_id, self.scheme.sign(secret, digest))

    def _pk(self, node_id: str) -> bytes:
        return self.topology.public_key_of(node_id)

    def _reply_threshold(self, partition: int) -> int:
        return self.topology.f(partition) + 1

    @property
    def _agree_threshold(self) -> int:
        return 2 * self.topology.f(self.partition) + 1

    def _peers(self) -> list[str]:
        return [
            r for r in self.topology.replicas(self.partition) if r != self.node_id
        ]

    def _leader_of(self, partition: int) -> str:
        return self.topology.leader(partition)

    # -- event entry point ---------------------------------------------

    def handle(self, sender: str, payload: Any) -> None:
        kind = type(payload)
        if kind is SealTick:
            self._on_seal_tick()
        elif kind is Propose:
            self._on_propose(sender, payload)
        elif kind is Validate:
            self._on_validate(sender, payload)
        elif kind is Reject:
            self._on_reject(sender, payload)
        elif kind is Certified:
            self._on_certified(sender, payload)
        elif kind is ReadRequest:
            self._on_read_request(sender, payload)
        elif kind is Submit:
            self._on_submit(sender, payload)
        elif kind is CoordinatorPrepare:
            self._on_coordinator_prepare(sender, payload)
        elif kind is PreparedMsg:
            self._on_prepared_msg(sender, payload)
        elif kind is CommitMsg:
            self._on_commit_msg(sender, payload)
        elif kind is ROQuery:
            self._on_ro_query(sender, payload)
        elif kind is RODepQuery:
            self._on_ro_dep_query(sender, payload)
        elif kind is DepTimeout:
            self._on_dep_timeout(payload)

    # -- sealing and agreement ------------------------------------------

    def _on_seal_tick(self) -> None:
        self.sim.schedule(self.config.seal_interval_ms, self.node_id, SealTick())
        self.maybe_propose()

    def maybe_propose(self) -> None:
        if not self.is_leader or self.behavior == "mute":
            return
        if self._inflight_index is not None:
            return
        if self.ledger.batches and not self.ledger.has_work():
            return
        outcome = self.ledger.seal(now=int(self.clock()))
        batch = outcome.batch
        self._inflight_index = batch.index
        self._rejecters = {}
        self._proposals = {}
        peers = self._peers()
        if self.behavior == "bad_cd_vector":
            wrong = list(batch.cd_vector)
            wrong[(self.partition + 1) % len(wrong)] += 2
            batch = replace(batch, cd_vector=tuple(wrong))
            self._register_proposal(batch, peers)
            for peer in peers:
                self.send(peer, Propose(batch))
        elif self.behavior == "equivocate" and len(peers) >= 2:
            # Two content-equal variants differing only in timestamp,
            # shown to disjoint halves. Colluding replicas see both and
            # sign both; with more than f faulty nodes both variants can
            # reach a quorum and honest replicas apply diverging batches.
            honest = [p for p in peers if p not in self.colluders]
            colluders = [p for p in peers if p in self.colluders]
            half = len(honest) // 2
            variant_a, variant_b = batch, replace(batch, timestamp=batch.timestamp + 1)
            group_a = honest[:half] + colluders
            group_b = honest[half:] + colluders
            self._register_proposal(variant_a, group_a)
            self._register_proposal(variant_b, group_b)
            for peer in group_a:
                self.send(peer, Propose(variant_a))
            for peer in group_b:
                self.send(peer, Propose(variant_b))
        else:
            self._register_proposal(batch, peers)
            for peer in peers:
                self.send(peer, Propose(batch))

    def _register_proposal(self, batch: Batch, recipients: list[str]) -> None:
        claims, claim_digests = batch_claim_digests(batch)
        state = _ProposalState(batch, claims, claim_digests, list(recipients))
        digest = batch.digest()
        state.batch_sigs[self.node_id] = self._sign(digest)
        for cd in claim_digests:
            state.claim_sigs.setdefault(cd, {})[self.node_id] = self._sign(cd)
        self._proposals[digest] = state

    def _on_propose(self, sender: str, msg: Propose) -> None:
        if self.behavior == "mute":
            return
        batch = msg.batch
        if batch.partition != self.partition:
            return
        if batch.index > self.ledger.next_index:
            self._buffered.setdefault(batch.index, []).append((sender, msg))
            return
        if batch.index < self.ledger.next_index:
            return
        if self.behavior == "equivocate":
            # A colluding replica signs anything it is shown.
            self._send_validate(sender, batch)
            return
        if self.behavior == "bad_cd_vector":
            wrong = list(batch.cd_vector)
            wrong[self.partition] += 1
            self._send_validate(sender, replace(batch, cd_vector=tuple(wrong)))
            return
        seen = self._signed_digest.get(batch.index)
        digest = batch.digest()
        if seen is not None and seen != digest:
            self.send(sender, Reject(batch.index, "conflicting proposal"))
            return
        try:
            self.ledger.validate_proposal(
                batch,
                now=self.clock(),
                freshness_delta=self.config.freshness_delta_ms,
                public_key_of=self._pk,
                scheme=self.scheme,
                reply_threshold_of=self._reply_threshold,
            )
        except ValidationFailure as failure:
            self.send(sender, Reject(batch.index, failure.reason))
            return
        self._signed_digest[batch.index] = digest
        self._send_validate(sender, batch)

    def _send_validate(self, to: str, batch: Batch) -> None:
        digest = batch.digest()
        _claims, claim_digests = batch_claim_digests(batch)
        self.send(
            to,
            Validate(
                index=batch.index,
                batch_digest=digest,
                batch_sig=self._sign(digest),
                claim_sigs=tuple((cd, self._sign(cd)) for cd in claim_digests),
            ),
        )

    def _on_validate(self, sender: str, msg: Validate) -> None:
        if msg.index != self._inflight_index:
            return
        state = self._proposals.get(msg.batch_digest)
        if state is None or state.certified:
            return
        state.batch_sigs[sender] = msg.batch_sig
        for cd, sig in msg.claim_sigs:
            state.claim_sigs.setdefault(cd, {})[sender] = sig
        if len(state.batch_sigs) < self._agree_threshold:
            return
        try:
            cert = assemble_certificate(
                msg.batch_digest,
                state.batch_sigs.values(),
                self._agree_threshold,
                self._pk,
                self.scheme,
            )
            claim_certs = {}
            threshold = self._reply_threshold(self.partition)
            for cd in state.claim_digests:
                claim_certs[cd] = assemble_certificate(
                    cd,
                    state.claim_sigs.get(cd, {}).values(),
                    threshold,
                    self._pk,
                    self.scheme,
                )
        except InsufficientSignatures:
            return  # forged signatures in the pool; wait for more replicas
        state.certified = True
        self.claim_certs.update(claim_certs)
        snapshot_digest = state.claim_digests[0]  # claims[0] is the snapshot
        certified_batch = replace(
            state.batch,
            certificate=cert,
            claim_certificate=claim_certs[snapshot_digest],
        )
        # Certificates are outside the digest and the claim list, so the
        # certified copy inherits both memos from the proposal.
        certified_batch.__dict__["_digest"] = state.batch.digest()
        certified_batch.__dict__["_claim_digests"] = batch_claim_digests(state.batch)
        merged = state.batch.__dict__.get("_merged")
        if merged is not None:
            certified_batch.__dict__["_merged"] = merged
        for peer in state.recipients:
            self.send(peer, Certified(certified_batch))
        first = self._inflight_index is not None
        self._inflight_index = None
        if first and self.ledger.next_index == certified_batch.index:
            self._apply_certified(certified_batch)

    def _on_reject(self, sender: str, msg: Reject) -> None:
        if msg.index != self._inflight_index:
            return
        self._rejecters[sender] = msg.reason
        if len(self._rejecters) < self.topology.f(self.partition) + 1:
            return
        # A quorum of 2f+1 matching signatures is no longer reachable.
        self.trace.add(
            "agreement_failed",
            partition=self.partition,
            index=msg.index,
            reasons=sorted(set(self._rejecters.values())),
        )
        abandoned = self.ledger.abandon_seal()
        self._inflight_index = None
        self._proposals = {}
        if abandoned is None:
            return
        for txn in list(abandoned.local) + list(abandoned.prepared):
            ctx = self._ctx.get(txn.txn_id)
            if ctx and ctx.get("client"):
                self.send(
                    ctx["client"],
                    ClientReply(txn.txn_id, "aborted", reason="agreement_failed"),
                )
            elif ctx and ctx.get("role") == "participant":
                # The coordinator is waiting on our vote; dropping the
                # prepare silently would wedge its group forever, so put
                # it back in the queue for the next proposal.
                self.ledger.append_prepared(txn)
            self._coord.pop(txn.txn_id, None)

    def _on_certified(self, sender: str, msg: Certified) -> None:
        if self.behavior == "mute":
            return
        batch = msg.batch
        if batch.partition != self.partition:
            return
        if batch.index > self.ledger.next_index:
            self._buffered.setdefault(batch.index, []).append((sender, msg))
            return
        if batch.index < self.ledger.next_index:
            return
        if not self.topology.batch_certified(batch, self._agree_threshold):
            return
        self._apply_certified(batch)

    def _apply_certified(self, batch: Batch) -> None:
        self.ledger.apply(batch)
        self.trace.add(
            "batch_applied",
            partition=self.partition,
            replica=self.node_id,
            index=batch.index,
            digest=batch.digest().hex()[:16],
        )
        if self.is_leader:
            self._leader_duties(batch)
        self._serve_parked_deps()
        if self._parked_queries:
            waiting, self._parked_queries = self._parked_queries, []
            for sender, msg in waiting:
                self._on_ro_query(sender, msg)
        self._drain_buffered()
        if self.is_leader:
            self.maybe_propose()

    def _drain_buffered(self) -> None:
        while True:
            waiting = self._buffered.pop(self.ledger.next_index, None)
            if not waiting:
                return
            for sender, msg in waiting:
                self.handle(sender, msg)
            # handle() may or may not have advanced the log; stop if not.
            if self.ledger.next_index in self._buffered:
                return

    # -- leader obligations after certification -------------------------

    def _leader_duties(self, batch: Batch) -> None:
        self.trace.add(
            "batch_certified",
            partition=self.partition,
            index=batch.index,
            lce=batch.lce,
            cd=list(batch.cd_vector),
            drained=sorted({e.group for e in batch.committed}),
            n_local=len(batch.local),
            n_prepared=len(batch.prepared),
            rejected=[[e.txn_id, e.reason, e.other_txn] for e in batch.rejected],
            digest=batch.digest().hex()[:16],
            timestamp=batch.timestamp,
        )
        for txn in batch.local:
            self._record_commit_writes(txn, batch.index, batch.index)
            self._reply_client(txn.txn_id, "committed", batch.partition)
        for txn in batch.prepared:
            self.trace.add(
                "prepared",
                partition=self.partition,
                txn_id=txn.txn_id,
                prepare_batch=batch.index,
            )
            claim = PreparedClaim(
                txn_id=txn.txn_id,
                partition=self.partition,
                vote=True,
                prepare_batch=batch.index,
                cd_vector=batch.cd_vector,
            )
            info = PreparedInfo(
                partition=self.partition,
                vote=True,
                prepare_batch=batch.index,
                cd_vector=batch.cd_vector,
                certificate=self.claim_certs.get(digest_of(claim)),
            )
            if txn.coordinator == self.partition:
                state = self._coord.get(txn.txn_id)
                if state is not None:
                    state.own_prepare_batch = batch.index
                    state.record_vote(info)
                    for p in txn.accessed_partitions:
                        if p != self.partition:
                            self.send(
                                self._leader_of(p), CoordinatorPrepare(txn, info)
                            )
                    self._maybe_decide(state)
            else:
                self.send(
                    self._leader_of(txn.coordinator),
                    PreparedMsg(txn.txn_id, info),
                )
        for entry in batch.rejected:
            ctx = self._ctx.get(entry.txn_id)
            role = ctx.get("role") if ctx else None
            if role == "participant":
                claim = PreparedClaim(entry.txn_id, self.partition, False, -1, ())
                info = PreparedInfo(
                    partition=self.partition,
                    vote=False,
                    prepare_batch=-1,
                    cd_vector=(),
                    certificate=self.claim_certs.get(digest_of(claim)),
                )
                self.send(
                    self._leader_of(ctx["coordinator"]),
                    PreparedMsg(entry.txn_id, info),
                )
            else:
                self._coord.pop(entry.txn_id, None)
                self._reply_client(
                    entry.txn_id, "aborted", batch.partition, reason=entry.reason
                )
        for entry in batch.committed:
            record = entry.record
            if record.decision == "commit":
                self._record_commit_writes(entry.txn, batch.index, entry.group)
            if record.coordinator == self.partition:
                claim = CommitClaim(record.txn_id, record.decision, record.coordinator)
                record_cert = replace(
                    record, certificate=self.claim_certs.get(digest_of(claim))
                )
                for p in entry.txn.accessed_partitions:
                    if p != self.partition:
                        self.send(self._leader_of(p), CommitMsg(record_cert))
                outcome = "committed" if record.decision == "commit" else "aborted"
                reason = None if record.decision == "commit" else "negative_vote"
                self._reply_client(record.txn_id, outcome, batch.partition, reason)

    def _record_commit_writes(
        self, txn: Transaction, batch_index: int, version: int
    ) -> None:
        owned = [
            k
            for k, _ in txn.write_set
            if self.topology.partition_of_key(k) == self.partition
        ]
        self.trace.add(
            "txn_committed_at",
            partition=self.partition,
            txn_id=txn.txn_id,
            batch=batch_index,
            version=version,
            writes=owned,
        )

    def _reply_client(
        self,
        txn_id: str,
        outcome: str,
        partition: int,
        reason: str | None = None,
    ) -> None:
        ctx = self._ctx.get(txn_id)
        if not ctx or not ctx.get("client"):
            return
        cert = self.claim_certs.get(digest_of(ReplyClaim(txn_id, outcome, partition)))
        self.send(
            ctx["client"], ClientReply(txn_id, outcome, reason=reason, certificate=cert)
        )

    # -- read-write transaction handlers ---------------------------------

    def _on_read_request(self, sender: str, msg: ReadRequest) -> None:
        entries = []
        for key in msg.keys:
            found = self.ledger.store.get(key)
            if found is None:
                entries.append((key, b"", -1))
            else:
                entries.append((key, found[0], found[1]))
        self.send(
            sender,
            ReadReply(msg.txn_id, self.partition, tuple(entries), self.ledger.prev_lce),
        )

    def _on_submit(self, sender: str, msg: Submit) -> None:
        txn = msg.txn
        if (txn.txn_id, "submit") in self._seen:
            return
        self._seen.add((txn.txn_id, "submit"))
        self.trace.add(
            "txn_submitted",
            txn_id=txn.txn_id,
            txn_kind=txn.kind,
            partition=self.partition,
        )
        if txn.kind == LOCAL:
            self._ctx[txn.txn_id] = {"role": "local", "client": sender}
            verdict = self.ledger.admission_check(txn)
            if verdict.ok:
                self.ledger.append_local(txn)
            else:
                self._append_rejection(txn, verdict)
        elif txn.kind == DISTRIBUTED and txn.coordinator == self.partition:
            self._ctx[txn.txn_id] = {"role": "coord", "client": sender}
            self._coord[txn.txn_id] = CoordinatorState(txn, client=sender)
            verdict = self.ledger.admission_check(txn)
            if verdict.ok:
                self.ledger.append_prepared(txn)
            else:
                self._append_rejection(txn, verdict)
        else:
            return  # misrouted; the client always targets the coordinator
        if self._queue_depth() >= self.config.seal_max_txns:
            self.maybe_propose()

    def _append_rejection(self, txn: Transaction, verdict) -> None:
        from .ledger import RejectEntry

        self.ledger.append_rejected(
            RejectEntry(txn.txn_id, verdict.reason, verdict.other_txn)
        )

    def _queue_depth(self) -> int:
        return len(self.ledger._local_queue) + len(self.ledger._prepared_queue)

    def _on_coordinator_prepare(self, sender: str, msg: CoordinatorPrepare) -> None:
        txn = msg.txn
        if (txn.txn_id, "coordprep") in self._seen:
            return
        self._seen.add((txn.txn_id, "coordprep"))
        claim = PreparedClaim(
            txn.txn_id,
            msg.info.partition,
            True,
            msg.info.prepare_batch,
            msg.info.cd_vector,
        )
        if msg.info.certificate is None or not (
            verify_certificate(
                msg.info.certificate,
                self._pk,
                self.scheme,
                expected_digest=digest_of(claim),
            )
            and msg.info.certificate.threshold
            >= self._reply_threshold(msg.info.partition)
        ):
            return
        self._ctx[txn.txn_id] = {
            "role": "participant",
            "coordinator": txn.coordinator,
        }
        verdict = self.ledger.admission_check(txn)
        if verdict.ok:
            self.ledger.append_prepared(txn)
        else:
            self._append_rejection(txn, verdict)
        if self._queue_depth() >= self.config.seal_max_txns:
            self.maybe_propose()

    def _on_prepared_msg(self, sender: str, msg: PreparedMsg) -> None:
        state = self._coord.get(msg.txn_id)
        if state is None or state.phase == "done":
            return
        info = msg.info
        claim = PreparedClaim(
            msg.txn_id, info.partition, info.vote, info.prepare_batch, info.cd_vector
        )
        if info.certificate is None or not (
            verify_certificate(
                info.certificate,
                self._pk,
                self.scheme,
                expected_digest=digest_of(claim),
            )
            and info.certificate.threshold >= self._reply_threshold(info.partition)
        ):
            return
        state.record_vote(info)
        self._maybe_decide(state)

    def _maybe_decide(self, state: CoordinatorState) -> None:
        if state.phase == "done" or not state.all_votes_in():
            return
        record = state.decide(self.partition)
        self.trace.add(
            "commit_decided",
            txn_id=record.txn_id,
            decision=record.decision,
            coordinator=self.partition,
            groups=[[i.partition, i.prepare_batch] for i in record.prepared],
            writes=[k for k, _ in state.txn.write_set],
        )
        if state.own_prepare_batch >= 0:
            self.ledger.record_vote(
                state.own_prepare_batch, record.txn_id, record
            )

    def _on_commit_msg(self, sender: str, msg: CommitMsg) -> None:
        record = msg.record
        if (record.txn_id, "commit") in self._seen:
            return
        self._seen.add((record.txn_id, "commit"))
        claim = CommitClaim(record.txn_id, record.decision, record.coordinator)
        if record.certificate is None or not (
            verify_certificate(
                record.certificate,
                self._pk,
                self.scheme,
                expected_digest=digest_of(claim),
            )
            and record.certificate.threshold
            >= self._reply_threshold(record.coordinator)
        ):
            return
        mine = next(
            (i for i in record.prepared if i.partition == self.partition), None
        )
        if mine is None or not mine.vote:
            return  # we never prepared it (our vote was negative)
        if self.ledger.prepared_batches.has(mine.prepare_batch, record.txn_id):
            self.ledger.record_vote(mine.prepare_batch, record.txn_id, record)

    # -- read-only serving (any replica) ---------------------------------

    def _on_ro_query(self, sender: str, msg: ROQuery) -> None:
        if self.behavior == "mute":
            return
        if not self.ledger.batches:
            # Nothing certified yet; answer as soon as the first batch lands.
            self._parked_queries.append((sender, msg))
            return
        index = len(self.ledger.batches) - 1
        if self.behavior == "stale_responder":
            lag = int(self.behavior_spec.param("lag", "3")) if self.behavior_spec else 3
            index = max(0, index - lag)
        self._send_snapshot(sender, msg.txn_id, msg.keys, index, round_no=1)

    def _on_ro_dep_query(self, sender: str, msg: RODepQuery) -> None:
        if self.behavior == "mute":
            return
        batch = self.ledger.earliest_batch_with_lce(msg.required_prepare_batch)
        if batch is None:
            # The decision exists somewhere (another partition saw it);
            # our copy is in flight. Park briefly rather than failing.
            self._parked_deps[msg.txn_id] = (
                sender,
                msg,
                self.sim.now + self.config.ro_dep_wait_ms,
            )
            self.sim.schedule(
                self.config.ro_dep_wait_ms, self.node_id, DepTimeout(msg.txn_id)
            )
            return
        self._send_snapshot(
            sender,
            msg.txn_id,
            msg.keys,
            batch.index,
            round_no=2,
            since_index=msg.have_index,
        )

    def _serve_parked_deps(self) -> None:
        if not self._parked_deps:
            return
        for txn_id in list(self._parked_deps):
            sender, msg, _deadline = self._parked_deps[txn_id]
            batch = self.ledger.earliest_batch_with_lce(msg.required_prepare_batch)
            if batch is not None:
                del self._parked_deps[txn_id]
                self._send_snapshot(
                    sender,
                    txn_id,
                    msg.keys,
                    batch.index,
                    round_no=2,
                    since_index=msg.have_index,
                )

    def _on_dep_timeout(self, msg: DepTimeout) -> None:
        parked = self._parked_deps.get(msg.txn_id)
        if parked is None:
            return
        sender, query, deadline = parked
        if self.sim.now + 1e-9 < deadline:
            return
        del self._parked_deps[msg.txn_id]
        self.send(
            sender,
            RODepUnavailable(msg.txn_id, self.partition, query.required_prepare_batch),
        )

    def _send_snapshot(
        self,
        to: str,
        txn_id: str,
        keys: tuple[str, ...],
        index: int,
        round_no: int,
        since_index: int | None = None,
    ) -> None:
        batch = self.ledger.batches[index]
        proof = self.ledger.store.prove(keys, at_batch=index)
        if self.behavior == "forged_proof":
            proof = _corrupt_proof(proof)
        response = ROResponse(
            claim=batch.claim(),
            proof=proof,
            certificate=batch.claim_certificate,
        )
        delta: tuple = ()
        if since_index is not None and since_index < index:
            # The commit records landed since the client's last snapshot;
            # each batch travels with its own certificate, so the client
            # can check them without trusting this replica.
            delta = tuple(self.ledger.batches[since_index + 1 : index + 1])
        self.send(to, ROResponseMsg(txn_id, response, round_no, delta))


def _corrupt_proof(proof: MerkleProof) -> MerkleProof:
    """Flip one byte in the first entry's value (or its path)."""
    entries = list(proof.entries)
    first = entries[0]
    leaves = list(first.leaves)
    leaf = leaves[0]
    if leaf.value is not None:
        bad = bytes([leaf.value[0] ^ 0x01]) + leaf.value[1:]
        leaves[0] = ProofLeaf(leaf.key, bad, leaf.version, leaf.index, leaf.path)
    elif leaf.path:
        sib = leaf.path[0]
        bad_path = (bytes([sib[0] ^ 0x01]) + sib[1:],) + leaf.path[1:]
        leaves[0] = ProofLeaf(leaf.key, leaf.value, leaf.version, leaf.index, bad_path)
    entries[0] = replace(first, leaves=tuple(leaves))
    return replace(proof, entries=tuple(entries))
