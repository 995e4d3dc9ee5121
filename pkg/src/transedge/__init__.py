"""TransEdge: hierarchical BFT transactions with commit-free reads.

A library plus deterministic simulator for a sharded transactional
key-value store.  Each partition is served by a cluster of 3f+1
replicas that agree on batches of transactions; distributed read-write
transactions run two-phase commit on top of that agreement, and
read-only transactions are answered by a single node per partition
with Merkle proofs and conflict-dependency vectors instead of a commit
protocol.
"""

__version__ = "0.1.0"
