"""Authenticated key-value snapshots: one Merkle tree per partition.

The tree is binary, over keys in lexicographic order, padded with a
distinguished empty-leaf hash up to a power of two.  Only committed
writes enter the tree; prepared-but-undecided writes are invisible to
readers.  Every sealed batch records its root, and old roots stay
queryable so that a responder can serve a consistent historical
snapshot (second-round dependency fetches and stale-but-honest
responders both need this).

A leaf's version is the id of the group the write committed under: the
prepare-batch id for a distributed write, the batch index itself for a
local one.  Versions are strictly increasing per key.  Absent keys are
provable through adjacency witnesses (the neighboring leaves that
bracket where the key would sit).

Historical proofs are served from per-node hash histories: applying a
batch touches O(writes * log n) tree nodes, and each change is kept as
a (batch, hash) pair, so a proof against an old root is a handful of
bisects rather than a tree rebuild.
"""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .crypto import (
    QuorumCertificate,
    SignatureScheme,
    digest_of,
    verify_certificate,
)

EMPTY_LEAF = hashlib.blake2b(b"transedge-empty-leaf", digest_size=32).digest()


class VersionRegression(Exception):
    """A write's version does not exceed the key's current version."""


class UnknownBatch(KeyError):
    """No root recorded for the requested batch."""


def _leaf_hash(key: str, value: bytes, version: int) -> bytes:
    h = hashlib.blake2b(digest_size=32)
    raw = key.encode("utf-8")
    h.update(len(raw).to_bytes(4, "little"))
    h.update(raw)
    h.update(len(value).to_bytes(4, "little"))
    h.update(value)
    h.update(version.to_bytes(8, "little", signed=True))
    return h.digest()


def _parent(left: bytes, right: bytes) -> bytes:
    return hashlib.blake2b(left + right, digest_size=32).digest()


@dataclass(frozen=True)
class ProofLeaf:
    """One authenticated leaf: a real key or a padding slot (key None)."""

    key: str | None
    value: bytes | None
    version: int
    index: int
    path: tuple[bytes, ...]


@dataclass(frozen=True)
class ProofEntry:
    key: str
    value: bytes | None  # None means the key is absent at this snapshot
    version: int  # -1 when absent
    leaves: tuple[ProofLeaf, ...]


@dataclass(frozen=True)
class MerkleProof:
    entries: tuple[ProofEntry, ...]
    root: bytes
    root_batch: int
    height: int


def _fold_path(leaf_hash: bytes, index: int, path: Sequence[bytes]) -> bytes:
    node = leaf_hash
    for sibling in path:
        if index & 1:
            node = _parent(sibling, node)
        else:
            node = _parent(node, sibling)
        index >>= 1
    return node


def _leaf_ok(leaf: ProofLeaf, proof: MerkleProof) -> bool:
    if len(leaf.path) != proof.height:
        return False
    if leaf.key is None:
        if leaf.value is not None or leaf.version != -1:
            return False
        h = EMPTY_LEAF
    else:
        if leaf.value is None:
            return False
        h = _leaf_hash(leaf.key, leaf.value, leaf.version)
    return _fold_path(h, leaf.index, leaf.path) == proof.root


def _absence_ok(entry: ProofEntry, proof: MerkleProof) -> bool:
    capacity = 1 << proof.height
    leaves = entry.leaves
    if len(leaves) == 1:
        lf = leaves[0]
        # Key sorts before every stored key (or the tree is empty).
        if lf.index == 0 and (lf.key is None or lf.key > entry.key):
            return True
        # Key sorts after a completely full tree.
        if lf.index == capacity - 1 and lf.key is not None and lf.key < entry.key:
            return True
        return False
    if len(leaves) == 2:
        left, right = leaves
        if right.index != left.index + 1:
            return False
        if left.key is None or left.key >= entry.key:
            return False
        return right.key is None or right.key > entry.key
    return False


def verify_proof_structure(proof: MerkleProof) -> bool:
    """Recompute the root from every entry; no trust assumptions."""
    for entry in proof.entries:
        if not entry.leaves:
            return False
        for leaf in entry.leaves:
            if not _leaf_ok(leaf, proof):
                return False
        if entry.value is not None:
            lf = entry.leaves[0]
            if len(entry.leaves) != 1:
                return False
            if lf.key != entry.key or lf.value != entry.value:
                return False
            if lf.version != entry.version:
                return False
        else:
            if entry.version != -1:
                return False
            if not _absence_ok(entry, proof):
                return False
    return True


def verify_proof(
    proof: MerkleProof,
    certificate: QuorumCertificate,
    claim,
    public_key_of: Callable[[str], bytes],
    scheme: SignatureScheme,
) -> bool:
    """Full client-side check of a proof against a certified snapshot claim.

    ``claim`` is the structure the replicas signed; it must expose
    ``merkle_root`` and ``batch_index`` fields that the proof is bound
    to.  Returns False rather than raising: a failed check means
    "retry another replica", not a programming error.
    """
    if claim.merkle_root != proof.root or claim.batch_index != proof.root_batch:
        return False
    if not verify_certificate(
        certificate, public_key_of, scheme, expected_digest=digest_of(claim)
    ):
        return False
    return verify_proof_structure(proof)


class MerkleStore:
    """Single-writer store with incremental root maintenance.

    The ledger applies each sealed batch's writes exactly once, in
    batch order; readers may concurrently prove against any recorded
    root.  Writes are (key, value, version) triples: several distinct
    versions may land in one batch (a batch can drain multiple commit
    groups), but per key the version must strictly increase.
    """

    def __init__(self) -> None:
        self._keys: list[str] = []
        self._pos: dict[str, int] = {}
        self._current: dict[str, tuple[bytes, int]] = {}
        # Per-key write history as (batch, value, version), batch-ascending.
        self._history: dict[str, list[tuple[int, bytes, int]]] = {}
        self._levels: list[list[bytes]] = [[]]
        self.root_history: dict[int, bytes] = {}
        self._applied: list[int] = []
        # Snapshot of the levels at the last key-set change ("reshape"),
        # plus every node hash change since, for historical proofs.
        self._base_levels: list[list[bytes]] | None = None
        self._base_batch: int | None = None
        self._node_changes: dict[tuple[int, int], list[tuple[int, bytes]]] = {}
        # (root, writes) -> (node updates, new root), shared between
        # clones: every honest replica of a partition hashes the same
        # batch over the same tree, so the work is done once.
        self._update_cache: dict = {}

    def clone(self) -> "MerkleStore":
        """Independent copy sharing no mutable state; hashes and the
        reshape snapshot are immutable once recorded, so only the
        containers are duplicated."""
        other = MerkleStore()
        other._keys = list(self._keys)
        other._pos = dict(self._pos)
        other._current = dict(self._current)
        other._history = {k: list(v) for k, v in self._history.items()}
        other._levels = [list(level) for level in self._levels]
        other.root_history = dict(self.root_history)
        other._applied = list(self._applied)
        other._base_levels = self._base_levels  # replaced wholesale on reshape
        other._base_batch = self._base_batch
        other._node_changes = {k: list(v) for k, v in self._node_changes.items()}
        other._update_cache = self._update_cache  # deliberately shared
        return other

    # -- queries ------------------------------------------------------

    @property
    def root(self) -> bytes:
        top = self._levels[-1]
        return top[0] if top else EMPTY_LEAF

    @property
    def height(self) -> int:
        return len(self._levels) - 1

    @property
    def latest_version(self) -> int | None:
        return self._applied[-1] if self._applied else None

    def get(self, key: str) -> tuple[bytes, int] | None:
        return self._current.get(key)

    def version_of(self, key: str) -> int:
        entry = self._current.get(key)
        return entry[1] if entry else -1

    # -- mutation -----------------------------------------------------

    @staticmethod
    def merge_writes(
        writes: Iterable[tuple[str, bytes, int]]
    ) -> dict[str, tuple[bytes, int]]:
        """Collapse a write list to its last (highest-version) value per
        key; safe to compute once and reuse across sibling replicas."""
        merged: dict[str, tuple[bytes, int]] = {}
        for key, value, version in writes:
            prior = merged.get(key)
            if prior is None or version >= prior[1]:
                merged[key] = (value, version)
        return merged

    def apply_writes(
        self, writes: Iterable[tuple[str, bytes, int]], batch: int
    ) -> bytes:
        return self.apply_merged(self.merge_writes(writes), batch)

    def apply_merged(
        self, merged: dict[str, tuple[bytes, int]], batch: int
    ) -> bytes:
        latest = self.latest_version
        if latest is not None and batch <= latest:
            raise VersionRegression(f"batch {batch} not above {latest}")
        current = self._current
        history = self._history
        fresh = []
        for key, (value, version) in merged.items():
            entry = current.get(key)
            if entry is None:
                if key not in self._pos:
                    fresh.append(key)
            elif version <= entry[1]:
                raise VersionRegression(
                    f"key {key!r}: version {version} not above {entry[1]}"
                )
        for key, (value, version) in merged.items():
            current[key] = (value, version)
            history.setdefault(key, []).append((batch, value, version))
        if fresh:
            for key in fresh:
                self._keys.append(key)
            self._keys.sort()
            self._pos = {k: i for i, k in enumerate(self._keys)}
            self._rebuild()
            self._base_levels = [list(level) for level in self._levels]
            self._base_batch = batch
            self._node_changes = {}
        elif merged:
            updates, _ = self._updates_for(merged)
            changes = self._node_changes
            for depth, i, h in updates:
                self._levels[depth][i] = h
                changes.setdefault((depth, i), []).append((batch, h))
        elif not self._applied and not self._levels[-1]:
            pass  # genesis over an empty store: root stays the empty constant
        self.root_history[batch] = self.root
        self._applied.append(batch)
        return self.root

    def preview_root(
        self, writes: Iterable[tuple[str, bytes, int]], batch: int
    ) -> bytes:
        """Root the tree would have after ``writes``, without mutating.

        Agreement runs on the proposed root before any replica applies
        the batch, so both the leader and the validators need to
        compute the post-batch root against their current state.
        """
        return self.preview_merged(self.merge_writes(writes))

    def preview_merged(self, merged: dict[str, tuple[bytes, int]]) -> bytes:
        if not merged:
            return self.root
        if any(k not in self._pos for k in merged):
            # A brand-new key shifts leaf positions: build a scratch tree.
            values = dict(self._current)
            values.update(merged)
            keys = sorted(values)
            leaves = [_leaf_hash(k, values[k][0], values[k][1]) for k in keys]
            return _build_levels(leaves)[-1][0]
        return self._updates_for(merged)[1]

    def _updates_for(
        self, merged: dict[str, tuple[bytes, int]]
    ) -> tuple[list[tuple[int, int, bytes]], bytes]:
        """Node updates and resulting root for a batch of leaf changes,
        memoized on (current root, changes)."""
        key = (self.root, tuple(sorted(merged.items())))
        cached = self._update_cache.get(key)
        if cached is None:
            overlay: dict[int, bytes] = {
                self._pos[k]: _leaf_hash(k, v, ver)
                for k, (v, ver) in merged.items()
            }
            updates = [(0, i, h) for i, h in overlay.items()]
            for depth in range(len(self._levels) - 1):
                below = self._levels[depth]
                parents: dict[int, bytes] = {}
                for i in overlay:
                    p = i >> 1
                    if p in parents:
                        continue
                    left = overlay.get(2 * p, below[2 * p])
                    right = overlay.get(2 * p + 1, below[2 * p + 1])
                    parents[p] = _parent(left, right)
                overlay = parents
                updates.extend((depth + 1, i, h) for i, h in overlay.items())
            cached = (updates, overlay[0] if overlay else self.root)
            self._update_cache[key] = cached
        return cached

    def _rebuild(self) -> None:
        leaves = [
            _leaf_hash(k, self._current[k][0], self._current[k][1])
            for k in self._keys
        ]
        self._levels = _build_levels(leaves)

    # -- historical lookups ---------------------------------------------

    def _node_at(self, depth: int, index: int, at_batch: int) -> bytes:
        hist = self._node_changes.get((depth, index))
        if hist:
            i = bisect.bisect_right(hist, at_batch, key=lambda e: e[0]) - 1
            if i >= 0:
                return hist[i][1]
        return self._base_levels[depth][index]

    def _path_at(self, index: int, at_batch: int) -> tuple[bytes, ...]:
        path = []
        for depth in range(len(self._levels) - 1):
            path.append(self._node_at(depth, index ^ 1, at_batch))
            index >>= 1
        return tuple(path)

    def _value_at(self, key: str, at_batch: int) -> tuple[bytes, int] | None:
        hist = self._history.get(key)
        if not hist:
            return None
        i = bisect.bisect_right(hist, at_batch, key=lambda e: e[0]) - 1
        if i < 0:
            return None
        _, value, version = hist[i]
        return value, version

    # -- proofs -------------------------------------------------------

    def prove(self, keys: Sequence[str], at_batch: int) -> MerkleProof:
        if at_batch not in self.root_history:
            raise UnknownBatch(at_batch)
        if at_batch == self.latest_version:
            return self._prove_current(keys, at_batch)
        if self._base_batch is not None and at_batch >= self._base_batch:
            return self._prove_historical(keys, at_batch)
        return self._prove_rebuilt(keys, at_batch)

    def _prove_current(self, keys: Sequence[str], at_batch: int) -> MerkleProof:
        levels = self._levels
        height = len(levels) - 1
        entries = []
        for key in keys:
            if key in self._pos:
                idx = self._pos[key]
                value, version = self._current[key]
                leaf = ProofLeaf(key, value, version, idx, _extract_path(levels, idx))
                entries.append(ProofEntry(key, value, version, (leaf,)))
            else:
                entries.append(
                    ProofEntry(
                        key,
                        None,
                        -1,
                        self._absence_witness(
                            key,
                            lambda k: self._current[k],
                            lambda i: _extract_path(levels, i),
                        ),
                    )
                )
        root = levels[-1][0] if levels[-1] else EMPTY_LEAF
        return MerkleProof(tuple(entries), root, at_batch, height)

    def _prove_historical(self, keys: Sequence[str], at_batch: int) -> MerkleProof:
        height = len(self._levels) - 1
        entries = []
        for key in keys:
            if key in self._pos:
                idx = self._pos[key]
                value, version = self._value_at(key, at_batch)
                leaf = ProofLeaf(
                    key, value, version, idx, self._path_at(idx, at_batch)
                )
                entries.append(ProofEntry(key, value, version, (leaf,)))
            else:
                entries.append(
                    ProofEntry(
                        key,
                        None,
                        -1,
                        self._absence_witness(
                            key,
                            lambda k: self._value_at(k, at_batch),
                            lambda i: self._path_at(i, at_batch),
                        ),
                    )
                )
        return MerkleProof(
            tuple(entries), self.root_history[at_batch], at_batch, height
        )

    def _absence_witness(
        self,
        key: str,
        value_of: Callable[[str], tuple[bytes, int]],
        path_of: Callable[[int], tuple[bytes, ...]],
    ) -> tuple[ProofLeaf, ...]:
        capacity = 1 << (len(self._levels) - 1) if self._levels[-1] else 0
        if capacity == 0:
            # Empty tree: the root IS the empty leaf; one padding witness.
            return (ProofLeaf(None, None, -1, 0, ()),)
        rank = bisect.bisect_left(self._keys, key)
        witnesses = []
        if rank > 0:
            left_key = self._keys[rank - 1]
            lv, lver = value_of(left_key)
            witnesses.append(ProofLeaf(left_key, lv, lver, rank - 1, path_of(rank - 1)))
        if rank < capacity:
            if rank < len(self._keys):
                right_key = self._keys[rank]
                rv, rver = value_of(right_key)
                witnesses.append(ProofLeaf(right_key, rv, rver, rank, path_of(rank)))
            else:
                witnesses.append(ProofLeaf(None, None, -1, rank, path_of(rank)))
        return tuple(witnesses)

    def _prove_rebuilt(self, keys: Sequence[str], at_batch: int) -> MerkleProof:
        """Slow path for snapshots older than the last key-set change."""
        tree_keys = []
        values: dict[str, tuple[bytes, int]] = {}
        for key in self._keys:
            chosen = self._value_at(key, at_batch)
            if chosen is not None:
                tree_keys.append(key)
                values[key] = chosen
        leaves = [_leaf_hash(k, values[k][0], values[k][1]) for k in tree_keys]
        levels = _build_levels(leaves)
        pos = {k: i for i, k in enumerate(tree_keys)}
        height = len(levels) - 1
        capacity = 1 << height if levels[-1] else 0
        entries = []
        for key in keys:
            if key in pos:
                idx = pos[key]
                value, version = values[key]
                leaf = ProofLeaf(key, value, version, idx, _extract_path(levels, idx))
                entries.append(ProofEntry(key, value, version, (leaf,)))
            else:
                witnesses = []
                if capacity == 0:
                    witnesses.append(ProofLeaf(None, None, -1, 0, ()))
                else:
                    rank = bisect.bisect_left(tree_keys, key)
                    if rank > 0:
                        lk = tree_keys[rank - 1]
                        lv, lver = values[lk]
                        witnesses.append(
                            ProofLeaf(lk, lv, lver, rank - 1, _extract_path(levels, rank - 1))
                        )
                    if rank < capacity:
                        if rank < len(tree_keys):
                            rk = tree_keys[rank]
                            rv, rver = values[rk]
                            witnesses.append(
                                ProofLeaf(rk, rv, rver, rank, _extract_path(levels, rank))
                            )
                        else:
                            witnesses.append(
                                ProofLeaf(None, None, -1, rank, _extract_path(levels, rank))
                            )
                entries.append(ProofEntry(key, None, -1, tuple(witnesses)))
        root = levels[-1][0] if levels[-1] else EMPTY_LEAF
        return MerkleProof(tuple(entries), root, at_batch, height)


def _build_levels(leaves: list[bytes]) -> list[list[bytes]]:
    if not leaves:
        return [[]]
    size = 1
    while size < len(leaves):
        size *= 2
    level = leaves + [EMPTY_LEAF] * (size - len(leaves))
    levels = [level]
    while len(level) > 1:
        level = [
            _parent(level[i], level[i + 1]) for i in range(0, len(level), 2)
        ]
        levels.append(level)
    return levels


def _extract_path(levels: list[list[bytes]], index: int) -> tuple[bytes, ...]:
    path = []
    for depth in range(len(levels) - 1):
        path.append(levels[depth][index ^ 1])
        index >>= 1
    return tuple(path)
