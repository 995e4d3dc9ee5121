"""Wires a full deployment together and drives one simulated run.

A deployment is one cluster of 3f+1 replicas per partition plus a set
of clients, all living on one discrete-event network.  Node naming:
replica i of partition p is ``p{p}r{i}`` with ``p{p}r0`` as the
cluster leader, client j is ``c{j}``.

The initial keyspace is loaded before the log starts (version -1) and
is identical on every replica of a partition, so the genesis tree is
built once per partition and cloned.
"""

from __future__ import annotations

import hashlib
import random
from collections import Counter
from dataclasses import dataclass, field

from . import crypto, readonly, workload
from .conflict import DISTRIBUTED, LOCAL, Transaction
from .consensus import ReplicaNode, SealTick
from .crypto import SCHEMES, NodeKeyPair, SignatureScheme
from .faults import FaultSpec, check_fault_budget, wrap
from .harness import Trace
from .ledger import Ledger
from .merkle import MerkleStore
from .net import LinkProfile, Simulator
from .readonly import RODepQuery, RODepUnavailable, ROQuery, ROResponseMsg
from .twopc import (
    ClientReply,
    CommitMsg,
    CoordinatorPrepare,
    PreparedMsg,
    ReadReply,
    ReadRequest,
    Submit,
    choose_coordinator,
)
from .workload import GeneratedTxn, KeySpace, WorkloadConfig


class Topology:
    """Static node layout and key material for one deployment."""

    def __init__(self, config: WorkloadConfig, scheme: SignatureScheme) -> None:
        self.config = config
        self.scheme = scheme
        self.n_partitions = config.n_partitions
        self._replicas: list[list[str]] = []
        self.partition_of_node: dict[str, int] = {}
        for p in range(config.n_partitions):
            cluster = [f"p{p}r{i}" for i in range(config.replicas_per_cluster)]
            self._replicas.append(cluster)
            for node_id in cluster:
                self.partition_of_node[node_id] = p
        self.clients = [f"c{j}" for j in range(config.clients)]
        self._keys: dict[str, NodeKeyPair] = {}
        for node_id in self.partition_of_node:
            seed = hashlib.blake2b(
                f"node-key/{node_id}".encode("utf-8"), digest_size=32
            ).digest()
            self._keys[node_id] = scheme.keygen(node_id, seed)
        # Verified-batch memo: digest -> highest certificate threshold
        # that checked out.  Verification is pure, so a positive result
        # holds for every client that sees the same batch again.
        self._cert_ok: dict[bytes, int] = {}

    def batch_certified(self, batch, threshold: int) -> bool:
        cert = batch.certificate
        if cert is None or cert.threshold < threshold:
            return False
        digest = batch.digest()
        if self._cert_ok.get(digest, -1) >= threshold:
            return True
        ok = crypto.verify_certificate(
            cert, self.public_key_of, self.scheme, expected_digest=digest
        )
        if ok:
            self._cert_ok[digest] = cert.threshold
        return ok

    def replicas(self, partition: int) -> list[str]:
        return self._replicas[partition]

    def all_replicas(self) -> list[str]:
        return [r for cluster in self._replicas for r in cluster]

    def leader(self, partition: int) -> str:
        return self._replicas[partition][0]

    def f(self, partition: int) -> int:
        return self.config.f

    def keypair(self, node_id: str) -> NodeKeyPair:
        return self._keys[node_id]

    def public_key_of(self, node_id: str) -> bytes:
        return self._keys[node_id].public_key

    def partition_of_key(self, key: str) -> int:
        return workload.partition_of(key, self.n_partitions)

    def client_home(self, client_id: str) -> int:
        return int(client_id[1:]) % self.n_partitions

    def link_profile_fn(self, config: WorkloadConfig):
        intra = LinkProfile(
            config.intra_latency_min_ms,
            config.intra_latency_max_ms,
            config.drop_rate,
            config.dup_rate,
        )
        inter = LinkProfile(
            config.inter_latency_min_ms + config.extra_inter_latency_ms,
            config.inter_latency_max_ms + config.extra_inter_latency_ms,
            config.drop_rate,
            config.dup_rate,
        )

        def site_of(node_id: str) -> int:
            part = self.partition_of_node.get(node_id)
            if part is not None:
                return part
            return self.client_home(node_id)

        def profile(sender: str, to: str) -> LinkProfile:
            return intra if site_of(sender) == site_of(to) else inter

        return profile


@dataclass
class MessageLog:
    """Counts taken at send time (before any drop or duplication), so
    they measure what the protocol says, not what the network did."""

    total: int = 0
    by_type: Counter = field(default_factory=Counter)
    by_txn: Counter = field(default_factory=Counter)
    twopc_txns: set[str] = field(default_factory=set)

    _TWOPC = (Submit, CoordinatorPrepare, PreparedMsg, CommitMsg)

    def record(self, envelope) -> None:
        payload = envelope.payload
        self.total += 1
        self.by_type[type(payload).__name__] += 1
        txn_id = getattr(payload, "txn_id", None)
        if txn_id is not None:
            self.by_txn[txn_id] += 1
            if isinstance(payload, self._TWOPC):
                self.twopc_txns.add(txn_id)


# -- client ---------------------------------------------------------------


@dataclass(frozen=True)
class _NextTxn:
    pass


@dataclass(frozen=True)
class _Resend:
    epoch: int


class ClientNode:
    """Drives its share of the workload, one transaction at a time.

    Read-write transactions read from the accessed leaders, then submit
    to the coordinator leader.  Read-only transactions query one
    replica per partition, verify certificates, proofs, and freshness,
    cross-check the dependency vectors, and repair with at most one
    extra round; a response failing verification is retried against the
    next replica of that cluster.
    """

    def __init__(
        self,
        node_id: str,
        txns: list[GeneratedTxn],
        topology: Topology,
        sim: Simulator,
        config: WorkloadConfig,
        trace: Trace,
        rng: random.Random,
    ) -> None:
        self.node_id = node_id
        self.txns = txns
        self.topology = topology
        self.sim = sim
        self.config = config
        self.trace = trace
        self.rng = rng
        self.done = not txns
        self._i = 0
        self._current: GeneratedTxn | None = None
        self._epoch = 0
        self._phase = "idle"
        self._started = 0.0
        # read-write state
        self._read_partitions: dict[int, tuple[str, ...]] = {}
        self._read_replies: dict[int, ReadReply] = {}
        self._txn: Transaction | None = None
        # read-only state
        self._ro_keys: dict[int, tuple[str, ...]] = {}
        self._ro_responses: dict[int, readonly.ROResponse] = {}
        self._ro_required: dict[int, int] = {}
        self._ro_attempts: Counter = Counter()
        self._ro_base: dict[int, int] = {}
        self._ro_round1_index: dict[int, int] = {}
        self._ro_patches: dict[str, tuple[bytes | None, int]] = {}

    # -- dispatch ------------------------------------------------------

    def handle(self, sender: str, payload) -> None:
        kind = type(payload)
        if kind is _NextTxn:
            self._begin()
        elif kind is _Resend:
            self._on_resend(payload)
        elif kind is ReadReply:
            self._on_read_reply(payload)
        elif kind is ClientReply:
            self._on_client_reply(payload)
        elif kind is ROResponseMsg:
            self._on_ro_response(payload)
        elif kind is RODepUnavailable:
            self._on_ro_unavailable(payload)

    def _begin(self) -> None:
        if self._i >= len(self.txns):
            self.done = True
            return
        g = self.txns[self._i]
        self._current = g
        self._epoch += 1
        self._started = self.sim.now
        self.sim.schedule(
            self.config.client_resend_ms, self.node_id, _Resend(self._epoch)
        )
        if g.profile == "read_only" and self.config.ro_mode != "baseline":
            self._begin_read_only(g)
        else:
            self._begin_read_write(g)

    def _finish(self) -> None:
        self._current = None
        self._txn = None
        self._phase = "idle"
        self._i += 1
        self.sim.schedule(0.0, self.node_id, _NextTxn())

    # -- read-write flow -------------------------------------------------

    def _begin_read_write(self, g: GeneratedTxn) -> None:
        by_partition: dict[int, list[str]] = {}
        for key in g.reads:
            by_partition.setdefault(self.topology.partition_of_key(key), []).append(key)
        self._read_partitions = {p: tuple(ks) for p, ks in by_partition.items()}
        self._read_replies = {}
        if not self._read_partitions:
            self._submit()
            return
        self._phase = "read"
        for p, keys in self._read_partitions.items():
            self.sim.send(
                self.node_id, self.topology.leader(p), ReadRequest(g.txn_id, keys)
            )

    def _on_read_reply(self, msg: ReadReply) -> None:
        g = self._current
        if g is None or self._phase != "read" or msg.txn_id != g.txn_id:
            return
        if msg.partition in self._read_replies:
            return
        self._read_replies[msg.partition] = msg
        if len(self._read_replies) == len(self._read_partitions):
            self._submit()

    def _submit(self) -> None:
        g = self._current
        assert g is not None
        observed: dict[str, tuple[bytes, int]] = {}
        for reply in self._read_replies.values():
            for key, value, version in reply.entries:
                observed[key] = (value, version)
        read_set = tuple((k, observed[k][0], observed[k][1]) for k in g.reads)
        write_set = tuple(
            (k, workload.write_value(g.txn_id, k, self.config.value_size))
            for k in dict.fromkeys(g.writes)
        )
        counts: Counter = Counter(
            self.topology.partition_of_key(k) for k in g.reads + g.writes
        )
        accessed = tuple(sorted(counts))
        kind = LOCAL if len(accessed) == 1 else DISTRIBUTED
        coordinator = accessed[0] if kind == LOCAL else choose_coordinator(counts)
        self._txn = Transaction(
            txn_id=g.txn_id,
            kind=kind,
            read_set=read_set,
            write_set=write_set,
            accessed_partitions=accessed,
            coordinator=coordinator,
        )
        self._phase = "submit"
        self.sim.send(
            self.node_id, self.topology.leader(coordinator), Submit(self._txn)
        )

    def _on_client_reply(self, msg: ClientReply) -> None:
        g = self._current
        if g is None or self._phase != "submit" or msg.txn_id != g.txn_id:
            return
        txn = self._txn
        self.trace.add(
            "reply",
            txn_id=g.txn_id,
            outcome=msg.outcome,
            reason=msg.reason,
            txn_kind="read_only" if g.profile == "read_only" else txn.kind,
            reads=[[k, v] for k, _val, v in txn.read_set],
            latency_ms=round(self.sim.now - self._started, 3),
            rounds=0,
        )
        self._finish()

    # -- read-only flow ---------------------------------------------------

    def _begin_read_only(self, g: GeneratedTxn) -> None:
        by_partition: dict[int, list[str]] = {}
        for key in g.reads:
            by_partition.setdefault(self.topology.partition_of_key(key), []).append(key)
        self._ro_keys = {p: tuple(ks) for p, ks in by_partition.items()}
        self._ro_responses = {}
        self._ro_required = {}
        self._ro_attempts = Counter()
        self._ro_base = {}
        self._ro_round1_index = {}
        self._ro_patches = {}
        self._phase = "ro1"
        for p, keys in self._ro_keys.items():
            self.sim.send(self.node_id, self._ro_replica(p), ROQuery(g.txn_id, keys))

    def _ro_replica(self, partition: int) -> str:
        cluster = self.topology.replicas(partition)
        if partition not in self._ro_base:
            if self.config.ro_target == "leader":
                self._ro_base[partition] = 0
            else:
                self._ro_base[partition] = self.rng.randrange(len(cluster))
        index = (self._ro_base[partition] + self._ro_attempts[partition]) % len(cluster)
        return cluster[index]

    def _ro_retry(self, partition: int) -> None:
        g = self._current
        self._ro_attempts[partition] += 1
        target = self._ro_replica(partition)
        if self._phase == "ro1":
            self.sim.send(
                self.node_id, target, ROQuery(g.txn_id, self._ro_keys[partition])
            )
        else:
            self.sim.send(
                self.node_id,
                target,
                RODepQuery(
                    g.txn_id,
                    self._ro_keys[partition],
                    self._ro_required[partition],
                    self._ro_round1_index.get(partition, -1),
                ),
            )

    def _verify(self, response: readonly.ROResponse, partition: int) -> bool:
        return readonly.verify_response(
            response,
            self._ro_keys[partition],
            self.topology.public_key_of,
            self.topology.scheme,
        )

    def _on_ro_response(self, msg: ROResponseMsg) -> None:
        g = self._current
        if g is None or msg.txn_id != g.txn_id:
            return
        response = msg.response
        p = response.partition
        if msg.round == 1:
            if self._phase != "ro1" or p in self._ro_responses:
                return
            fresh = readonly.check_freshness(
                response,
                int(self.sim.clock(self.node_id)),
                self.config.freshness_delta_ms,
            )
            if not (self._verify(response, p) and fresh):
                self._ro_retry(p)
                return
            self._ro_responses[p] = response
            self._ro_round1_index[p] = response.claim.batch_index
            if len(self._ro_responses) == len(self._ro_keys):
                self._ro_round1_done()
        else:
            if self._phase != "ro2" or p not in self._ro_required:
                return
            if not (
                self._verify(response, p)
                and response.claim.lce >= self._ro_required[p]
                and self._absorb_delta(msg.delta, p)
            ):
                self._ro_retry(p)
                return
            self._ro_responses[p] = response
            del self._ro_required[p]
            if not self._ro_required:
                self._ro_complete(rounds=2)

    def _ro_round1_done(self) -> None:
        g = self._current
        self.trace.add(
            "ro_round1",
            txn_id=g.txn_id,
            partitions=sorted(self._ro_keys),
            snapshots={
                str(p): r.claim.batch_index for p, r in self._ro_responses.items()
            },
        )
        if self.config.ro_mode == "mutant":
            self._ro_complete(rounds=1)
            return
        missing = readonly.verify_dependencies(list(self._ro_responses.values()))
        if not missing:
            self._ro_complete(rounds=1)
            return
        self._phase = "ro2"
        for dep in missing:
            self._ro_required[dep.partition] = dep.required_prepare_batch
        self.trace.add(
            "ro_round2",
            txn_id=g.txn_id,
            required=[[d.partition, d.required_prepare_batch] for d in missing],
        )
        for p, required in self._ro_required.items():
            self.sim.send(
                self.node_id,
                self._ro_replica(p),
                RODepQuery(
                    g.txn_id,
                    self._ro_keys[p],
                    required,
                    self._ro_round1_index.get(p, -1),
                ),
            )

    def _absorb_delta(self, delta, partition: int) -> bool:
        """Mine a second-round response's attached batches for committed
        writes the other snapshots have not absorbed yet.

        Every attached batch is checked against its own quorum
        certificate, so a lying responder gains nothing.  Returns False
        when anything fails verification (caller retries elsewhere).
        """
        threshold = 2 * self.topology.f(partition) + 1
        for batch in delta:
            if batch.partition != partition:
                return False
            if not self.topology.batch_certified(batch, threshold):
                return False
        for batch in delta:
            for m, key, value, q in self._mined_writes(batch):
                if m == partition:
                    continue
                keys = self._ro_keys.get(m)
                if keys is None or key not in keys:
                    continue
                prior = self._ro_patches.get(key)
                if prior is None or q > prior[1]:
                    self._ro_patches[key] = (value, q)
        return True

    def _mined_writes(self, batch):
        """Distributed-commit writes in a batch as (partition, key,
        value, prepare group), flattened once and stashed on the batch:
        deltas overlap heavily across clients and retries."""
        mined = batch.__dict__.get("_mined")
        if mined is None:
            out = []
            for entry in batch.committed:
                if entry.record.decision != "commit":
                    continue
                groups = {
                    info.partition: info.prepare_batch
                    for info in entry.record.prepared
                }
                for key, value in entry.txn.write_set:
                    m = self.topology.partition_of_key(key)
                    out.append((m, key, value, groups.get(m, -1)))
            mined = tuple(out)
            batch.__dict__["_mined"] = mined
        return mined

    def _on_ro_unavailable(self, msg: RODepUnavailable) -> None:
        g = self._current
        if g is None or self._phase != "ro2" or msg.txn_id != g.txn_id:
            return
        if msg.partition in self._ro_required:
            self._ro_retry(msg.partition)

    def _ro_complete(self, rounds: int) -> None:
        g = self._current
        reads = []
        patched = []
        for p, keys in self._ro_keys.items():
            values = readonly.read_values(self._ro_responses[p])
            for key in keys:
                _value, version = values[key]
                patch = self._ro_patches.get(key)
                if patch is not None and patch[1] > version:
                    version = patch[1]
                    patched.append([key, version])
                reads.append([key, version])
        if patched:
            self.trace.add("ro_patch", txn_id=g.txn_id, patched=patched)
        self.trace.add(
            "reply",
            txn_id=g.txn_id,
            outcome="completed",
            reason=None,
            txn_kind="read_only",
            reads=reads,
            views=[[p, r.claim.batch_index] for p, r in sorted(self._ro_responses.items())],
            latency_ms=round(self.sim.now - self._started, 3),
            rounds=rounds,
        )
        self._finish()

    # -- resend --------------------------------------------------------

    def _on_resend(self, msg: _Resend) -> None:
        if msg.epoch != self._epoch or self._current is None:
            return
        g = self._current
        self.sim.schedule(
            self.config.client_resend_ms, self.node_id, _Resend(self._epoch)
        )
        if self._phase == "read":
            for p, keys in self._read_partitions.items():
                if p not in self._read_replies:
                    self.sim.send(
                        self.node_id,
                        self.topology.leader(p),
                        ReadRequest(g.txn_id, keys),
                    )
        elif self._phase == "submit":
            self.sim.send(
                self.node_id,
                self.topology.leader(self._txn.coordinator),
                Submit(self._txn),
            )
        elif self._phase == "ro1":
            for p, keys in self._ro_keys.items():
                if p not in self._ro_responses:
                    self._ro_retry(p)
        elif self._phase == "ro2":
            for p in list(self._ro_required):
                self._ro_retry(p)


# -- deployment -----------------------------------------------------------

_KEYSPACES: dict[tuple, KeySpace] = {}
_GENESIS: dict[tuple, MerkleStore] = {}


def shared_keyspace(config: WorkloadConfig) -> KeySpace:
    key = (config.n_keys, config.key_size, config.n_partitions)
    space = _KEYSPACES.get(key)
    if space is None:
        space = KeySpace(config)
        _KEYSPACES[key] = space
    return space


def genesis_store(config: WorkloadConfig, partition: int) -> MerkleStore:
    """A fresh store preloaded with the partition's keys at version -1."""
    key = (
        config.n_keys,
        config.key_size,
        config.value_size,
        config.n_partitions,
        partition,
    )
    template = _GENESIS.get(key)
    if template is None:
        space = shared_keyspace(config)
        template = MerkleStore()
        writes = [
            (k, workload.initial_value(k, config.value_size), -1)
            for k in space.by_partition[partition]
        ]
        template.apply_writes(writes, -1)
        _GENESIS[key] = template
    return template.clone()


@dataclass
class RunResult:
    config: WorkloadConfig
    seed: int
    faults: tuple[FaultSpec, ...]
    trace: Trace
    messages: MessageLog
    duration_ms: float
    horizon_reached: bool
    expected_txns: int
    honest_replicas: set[str]
    topology: Topology
    replicas: dict[str, ReplicaNode]
    clients: list[ClientNode]


def run_simulation(
    config: WorkloadConfig,
    seed: int,
    faults: list[FaultSpec] | tuple[FaultSpec, ...] = (),
    unsafe_faults: bool = False,
) -> RunResult:
    """One deterministic end-to-end run; equal inputs give equal traces."""
    config.validate()
    scheme = SCHEMES[config.scheme]
    topology = Topology(config, scheme)
    specs = list(faults)
    check_fault_budget(
        specs, topology.partition_of_node, config.f, unsafe=unsafe_faults
    )

    skew_rng = random.Random(("skew", seed).__repr__())
    skews = {
        node: skew_rng.uniform(-config.clock_skew_max_ms, config.clock_skew_max_ms)
        for node in topology.all_replicas() + topology.clients
    }
    sim = Simulator(
        seed,
        link_profile=topology.link_profile_fn(config),
        clock_skew=lambda node: skews.get(node, 0.0),
    )
    trace = Trace(now_fn=lambda: sim.now)
    trace.add(
        "meta",
        seed=seed,
        n_partitions=config.n_partitions,
        f=config.f,
        ro_mode=config.ro_mode,
        faults=[[s.node_id, s.behavior] for s in specs],
        replicas=topology.all_replicas(),
    )
    messages = MessageLog()
    if config.record_messages:
        sim.on_send = messages.record

    replicas: dict[str, ReplicaNode] = {}
    for p in range(config.n_partitions):
        for node_id in topology.replicas(p):
            ledger = Ledger(
                partition=p,
                n_partitions=config.n_partitions,
                key_owner=topology.partition_of_key,
                store=genesis_store(config, p),
            )
            node = ReplicaNode(
                node_id=node_id,
                partition=p,
                topology=topology,
                keypair=topology.keypair(node_id),
                scheme=scheme,
                sim=sim,
                ledger=ledger,
                trace=trace,
                config=config,
                behavior_rng=random.Random(("behavior", seed, node_id).__repr__()),
            )
            replicas[node_id] = node
            sim.add_node(node_id, node.handle)

    by_partition_faults: dict[int, set[str]] = {}
    for spec in specs:
        wrap(replicas[spec.node_id], spec)
        if spec.behavior == "equivocate":
            part = topology.partition_of_node[spec.node_id]
            by_partition_faults.setdefault(part, set()).add(spec.node_id)
    for part, equivocators in by_partition_faults.items():
        for node_id in equivocators:
            replicas[node_id].colluders = equivocators - {node_id}

    for p in range(config.n_partitions):
        sim.schedule(
            config.seal_interval_ms + 0.1 * p, topology.leader(p), SealTick()
        )

    txns = workload.generate(config, seed, shared_keyspace(config))
    clients: list[ClientNode] = []
    for j, client_id in enumerate(topology.clients):
        rng = random.Random(("client", seed, j).__repr__())
        client = ClientNode(
            client_id, txns[j :: config.clients], topology, sim, config, trace, rng
        )
        clients.append(client)
        sim.add_node(client_id, client.handle)
        sim.schedule(rng.uniform(0.0, config.seal_interval_ms), client_id, _NextTxn())

    sim.run_until(
        condition=lambda: all(c.done for c in clients),
        max_time=config.horizon_ms,
    )
    trace.add(
        "run_done",
        duration_ms=round(sim.now, 3),
        horizon_reached=sim.horizon_reached,
        txns=len(txns),
    )
    return RunResult(
        config=config,
        seed=seed,
        faults=tuple(specs),
        trace=trace,
        messages=messages,
        duration_ms=sim.now,
        horizon_reached=sim.horizon_reached,
        expected_txns=len(txns),
        honest_replicas=set(topology.all_replicas())
        - {s.node_id for s in specs},
        topology=topology,
        replicas=replicas,
        clients=clients,
    )
