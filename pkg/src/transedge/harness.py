"""Run tracing, metrics, and the serializability oracle.

Everything here judges a run from the outside: the trace is an
append-only event log emitted by clients and replicas, the
serialization graph is rebuilt from that log alone, and the auditors
recheck protocol obligations (snapshot dependency closure, abort
blamelessness, commit-free reads, state-machine safety, drain order)
without trusting any node's bookkeeping.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

TRACE_SCHEMA = 1


class Trace:
    """Append-only event log; every event carries a kind and a sim time."""

    def __init__(self, now_fn: Callable[[], float] | None = None) -> None:
        self.events: list[dict] = []
        self._now = now_fn or (lambda: 0.0)

    def add(self, kind: str, **fields) -> None:
        event = {"kind": kind, "t": round(self._now(), 3)}
        event.update(fields)
        self.events.append(event)

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "schema", "version": TRACE_SCHEMA}) + "\n")
            for event in self.events:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Trace":
        trace = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event.get("kind") == "schema":
                    continue
                trace.events.append(event)
        return trace

    def digest(self) -> str:
        h = hashlib.sha256()
        for event in self.events:
            h.update(json.dumps(event, sort_keys=True).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


# -- metrics ------------------------------------------------------------

METRIC_FIELDS = [
    "seed",
    "ro_mode",
    "duration_ms",
    "txns_total",
    "committed",
    "aborted",
    "ro_completed",
    "abort_rate",
    "throughput_tps",
    "p50_ms",
    "p95_ms",
    "p99_ms",
    "ro_p50_ms",
    "ro_p95_ms",
    "ro_round2_rate",
    "msgs_total",
    "msgs_per_txn",
    "ro_msgs_per_txn",
    "rw_msgs_per_txn",
    "horizon_reached",
]


def _pct(samples: list[float], q: float) -> float:
    if not samples:
        return 0.0
    ordered = sorted(samples)
    pos = q * (len(ordered) - 1)
    lo, hi = int(pos), min(int(pos) + 1, len(ordered) - 1)
    frac = pos - lo
    return round(ordered[lo] * (1 - frac) + ordered[hi] * frac, 3)


def compute_metrics(result) -> dict:
    """Flatten one run into the fixed metrics row."""
    replies = result.trace.of_kind("reply")
    committed = [e for e in replies if e["outcome"] == "committed"]
    aborted = [e for e in replies if e["outcome"] == "aborted"]
    # Verified reads end as "completed"; in baseline mode they run
    # through the commit path and end as ordinary commits.
    ro_done = [
        e
        for e in replies
        if e.get("txn_kind") == "read_only"
        and e["outcome"] in ("completed", "committed")
    ]
    decided = committed + aborted
    latencies = [e["latency_ms"] for e in committed + ro_done]
    ro_lat = [e["latency_ms"] for e in ro_done]
    duration = result.duration_ms or 1.0
    ro_ids = {e["txn_id"] for e in ro_done}
    rw_ids = {e["txn_id"] for e in committed}
    by_txn = result.messages.by_txn
    total_txns = len(replies)
    return {
        "seed": result.seed,
        "ro_mode": result.config.ro_mode,
        "duration_ms": round(duration, 3),
        "txns_total": total_txns,
        "committed": len(committed),
        "aborted": len(aborted),
        "ro_completed": len(ro_done),
        "abort_rate": round(len(aborted) / max(1, len(decided)), 4),
        "throughput_tps": round(
            (len(committed) + len(ro_done)) / (duration / 1000.0), 2
        ),
        "p50_ms": _pct(latencies, 0.50),
        "p95_ms": _pct(latencies, 0.95),
        "p99_ms": _pct(latencies, 0.99),
        "ro_p50_ms": _pct(ro_lat, 0.50),
        "ro_p95_ms": _pct(ro_lat, 0.95),
        "ro_round2_rate": round(
            sum(1 for e in ro_done if e.get("rounds", 1) >= 2) / max(1, len(ro_done)),
            4,
        ),
        "msgs_total": result.messages.total,
        "msgs_per_txn": round(result.messages.total / max(1, total_txns), 2),
        "ro_msgs_per_txn": round(
            sum(by_txn.get(t, 0) for t in ro_ids) / max(1, len(ro_ids)), 2
        ),
        "rw_msgs_per_txn": round(
            sum(by_txn.get(t, 0) for t in rw_ids) / max(1, len(rw_ids)), 2
        ),
        "horizon_reached": int(result.horizon_reached),
    }


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        raise ValueError("no metric rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- serialization graph --------------------------------------------------


@dataclass
class SerializationGraph:
    vertices: set[str] = field(default_factory=set)
    edges: dict[str, set[str]] = field(default_factory=dict)
    labels: dict[tuple[str, str], set[str]] = field(default_factory=dict)

    def add_edge(self, a: str, b: str, label: str) -> None:
        if a == b:
            return
        self.edges.setdefault(a, set()).add(b)
        self.labels.setdefault((a, b), set()).add(label)


def build_sg(events: Iterable[dict]) -> SerializationGraph:
    """Serialization graph over committed read-write transactions and
    completed read-only transactions, rebuilt purely from the trace.

    A write's version is the group it committed under on the key's own
    partition. Per key: wr edges writer -> same-version readers, ww
    edges between consecutive writers, and rw edges reader -> first
    later writer (the ww chain carries the rest, which is enough for
    cycle detection).
    """
    graph = SerializationGraph()
    reads: dict[str, list[tuple[str, int]]] = {}
    writes: dict[str, dict[str, int]] = {}
    outcomes: dict[str, str] = {}
    for event in events:
        kind = event["kind"]
        if kind == "reply":
            outcomes[event["txn_id"]] = event["outcome"]
            if event["outcome"] in ("committed", "completed"):
                reads[event["txn_id"]] = [
                    (k, v) for k, v in event.get("reads", [])
                ]
        elif kind == "txn_committed_at":
            per_txn = writes.setdefault(event["txn_id"], {})
            version = event.get("version", event["batch"])
            for key in event.get("writes", []):
                per_txn[key] = version
    for txn_id, outcome in outcomes.items():
        if outcome == "committed" or outcome == "completed":
            graph.vertices.add(txn_id)
    # Per-key indexes.
    writers_by_key: dict[str, list[tuple[int, str]]] = {}
    readers_by_key: dict[str, list[tuple[int, str]]] = {}
    for txn_id, per_txn in writes.items():
        if txn_id not in graph.vertices:
            continue
        for key, version in per_txn.items():
            writers_by_key.setdefault(key, []).append((version, txn_id))
    for txn_id, entries in reads.items():
        if txn_id not in graph.vertices:
            continue
        for key, version in entries:
            readers_by_key.setdefault(key, []).append((version, txn_id))
    for key, writers in writers_by_key.items():
        writers.sort()
        versions = [v for v, _ in writers]
        for (v1, a), (v2, b) in zip(writers, writers[1:]):
            graph.add_edge(a, b, "ww")
        by_version = {v: t for v, t in writers}
        for version, reader in readers_by_key.get(key, []):
            writer = by_version.get(version)
            if writer is not None:
                graph.add_edge(writer, reader, "wr")
            nxt = _first_greater(versions, version)
            if nxt is not None:
                graph.add_edge(reader, by_version[nxt], "rw")
    # Keys only ever read still produce rw edges above; keys only
    # written produce ww chains; untouched keys contribute nothing.
    return graph


def _first_greater(sorted_versions: list[int], v: int) -> int | None:
    import bisect

    i = bisect.bisect_right(sorted_versions, v)
    return sorted_versions[i] if i < len(sorted_versions) else None


def find_cycle(graph: SerializationGraph) -> list[str] | None:
    """Iterative DFS; returns one witness cycle as a vertex list, or None."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = {v: WHITE for v in graph.vertices}
    parent: dict[str, str] = {}
    for start in sorted(graph.vertices):
        if color[start] != WHITE:
            continue
        stack: list[tuple[str, Iterable[str]]] = [
            (start, iter(sorted(graph.edges.get(start, ()))))
        ]
        color[start] = GREY
        while stack:
            node, children = stack[-1]
            advanced = False
            for child in children:
                if child not in color:
                    continue
                if color[child] == WHITE:
                    color[child] = GREY
                    parent[child] = node
                    stack.append(
                        (child, iter(sorted(graph.edges.get(child, ()))))
                    )
                    advanced = True
                    break
                if color[child] == GREY:
                    cycle = [child, node]
                    cur = node
                    while cur != child:
                        cur = parent[cur]
                        cycle.append(cur)
                    cycle.reverse()
                    return cycle
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return None


# -- auditors -------------------------------------------------------------


def _ro_txn_ids(events: list[dict]) -> set[str]:
    ids = {e["txn_id"] for e in events if e["kind"] == "ro_round1"}
    ids |= {
        e["txn_id"]
        for e in events
        if e["kind"] == "reply" and e.get("txn_kind") == "read_only"
    }
    return ids


def audit_snapshot_closure(events: list[dict]) -> list[str]:
    """Re-verify every completed read-only view combination, and check
    that no transaction needed more than one repair round.

    The check is transaction-level: whenever some snapshot in the
    combined view includes a distributed commit, every key that commit
    wrote on another queried partition must be reflected in what the
    client actually read there (either the snapshot had drained the
    group, or the second round supplied the write).  This is rebuilt
    from the trace alone; the client's own bookkeeping is not trusted.
    """
    from . import workload

    n_partitions = 1
    for event in events:
        if event["kind"] == "meta":
            n_partitions = event.get("n_partitions", 1)
            break

    lce_at: dict[tuple[int, int], int] = {}
    for event in events:
        if event["kind"] == "batch_certified":
            lce_at[(event["partition"], event["index"])] = event["lce"]

    # Per distributed transaction: prepare-group ids and write keys by
    # partition (from the coordinator's decision), and the batch its
    # commit drained into on each partition.
    groups_of: dict[str, dict[int, int]] = {}
    writes_of: dict[str, dict[int, list[str]]] = {}
    commit_at: dict[str, dict[int, int]] = {}
    for event in events:
        kind = event["kind"]
        if kind == "commit_decided" and event["decision"] == "commit":
            txn_id = event["txn_id"]
            groups_of[txn_id] = {p: q for p, q in event.get("groups", [])}
            per_part: dict[int, list[str]] = {}
            for key in event.get("writes", []):
                per_part.setdefault(
                    workload.partition_of(key, n_partitions), []
                ).append(key)
            writes_of[txn_id] = per_part
        elif kind == "txn_committed_at":
            commit_at.setdefault(event["txn_id"], {})[event["partition"]] = (
                event["batch"]
            )

    # Index: per partition, distributed commits sorted by group id
    # descending, so "groups newer than this LCE" is a short prefix.
    by_group: dict[int, list[tuple[int, str]]] = {}
    for txn_id, groups in groups_of.items():
        for p, q in groups.items():
            by_group.setdefault(p, []).append((q, txn_id))
    for entries in by_group.values():
        entries.sort(reverse=True)

    out = []
    for event in events:
        if event["kind"] != "reply":
            continue
        if event.get("rounds", 0) > 2:
            out.append(f"{event['txn_id']}: took {event['rounds']} rounds")
        if event.get("txn_kind") != "read_only" or event["outcome"] != "completed":
            continue
        views = {p: idx for p, idx in event.get("views", [])}
        if not views:
            continue
        read_version = {k: v for k, v in event.get("reads", [])}
        keys_at: dict[int, set[str]] = {}
        for key in read_version:
            keys_at.setdefault(
                workload.partition_of(key, n_partitions), set()
            ).add(key)
        for m, view_m in views.items():
            lce_m = lce_at.get((m, view_m), -1)
            for q, txn_id in by_group.get(m, []):
                if q <= lce_m:
                    break
                # Is this commit visible through any other queried view?
                drained = commit_at.get(txn_id, {})
                if not any(
                    j != m and j in drained and drained[j] <= view_j
                    for j, view_j in views.items()
                ):
                    continue
                for key in writes_of.get(txn_id, {}).get(m, []):
                    if key in keys_at.get(m, ()) and read_version.get(key, -1) < q:
                        out.append(
                            f"{event['txn_id']}: read {key} at partition {m} "
                            f"missing write of {txn_id} (group {q})"
                        )
    return out


def audit_abort_blame(events: list[dict]) -> list[str]:
    """A read-write abort may never blame a read-only transaction."""
    ro_ids = _ro_txn_ids(events)
    out = []
    for event in events:
        if event["kind"] != "batch_certified":
            continue
        for txn_id, reason, other in event.get("rejected", []):
            if other in ro_ids:
                out.append(f"{txn_id} aborted ({reason}) blaming read-only {other}")
    return out


def audit_commit_freedom(result) -> list[str]:
    """Read-only transactions must never enter the prepare/commit path."""
    if result.config.ro_mode == "baseline":
        return []  # baseline deliberately routes reads through commit
    ro_ids = _ro_txn_ids(result.trace.events)
    offenders = sorted(ro_ids & result.messages.twopc_txns)
    return [f"read-only {t} appeared in a prepare/commit message" for t in offenders]


def audit_state_safety(events: list[dict], honest: set[str]) -> list[str]:
    """All honest replicas of a partition that applied batch i must have
    applied the same batch i."""
    applied: dict[tuple[int, int], dict[str, str]] = {}
    for event in events:
        if event["kind"] != "batch_applied":
            continue
        if event["replica"] not in honest:
            continue
        slot = applied.setdefault((event["partition"], event["index"]), {})
        slot[event["replica"]] = event["digest"]
    out = []
    for (partition, index), digests in sorted(applied.items()):
        if len(set(digests.values())) > 1:
            out.append(
                f"partition {partition} batch {index}: honest replicas "
                f"applied diverging batches {sorted(set(digests.values()))}"
            )
    return out


def audit_drain_order(events: list[dict]) -> list[str]:
    """Prepare groups must drain oldest-first and the LCE must track the
    newest drained group, never regressing."""
    out = []
    last_lce: dict[int, int] = {}
    drained_hwm: dict[int, int] = {}
    for event in events:
        if event["kind"] != "batch_certified":
            continue
        part = event["partition"]
        lce = event["lce"]
        if lce < last_lce.get(part, -1):
            out.append(f"partition {part}: LCE regressed to {lce}")
        drained = event.get("drained", [])
        if drained != sorted(drained):
            out.append(f"partition {part}: drain out of order {drained}")
        for gid in drained:
            if gid <= drained_hwm.get(part, -1):
                out.append(f"partition {part}: group {gid} drained twice")
            drained_hwm[part] = gid
        if drained and lce != drained[-1]:
            out.append(
                f"partition {part}: LCE {lce} != newest drained {drained[-1]}"
            )
        last_lce[part] = lce
    return out


def audit_completion(result) -> list[str]:
    out = []
    if result.horizon_reached:
        out.append("run hit the simulation horizon before finishing")
    replies = {e["txn_id"] for e in result.trace.of_kind("reply")}
    missing = result.expected_txns - len(replies)
    if missing > 0:
        out.append(f"{missing} transactions never received a final reply")
    return out


def audit_serializability(events: list[dict]) -> list[str]:
    cycle = find_cycle(build_sg(events))
    if cycle is None:
        return []
    return ["serialization graph cycle: " + " -> ".join(cycle)]


def audit_run(result, honest: set[str] | None = None) -> dict[str, list[str]]:
    """Every post-run audit; a clean run maps every name to []."""
    events = result.trace.events
    if honest is None:
        honest = result.honest_replicas
    return {
        "serializability": audit_serializability(events),
        "snapshot_closure": audit_snapshot_closure(events),
        "abort_blame": audit_abort_blame(events),
        "commit_freedom": audit_commit_freedom(result),
        "state_safety": audit_state_safety(events, honest),
        "drain_order": audit_drain_order(events),
        "completion": audit_completion(result),
    }
