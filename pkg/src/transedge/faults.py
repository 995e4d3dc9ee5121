"""Byzantine behavior catalogue.

A fault spec names a node and a behavior; behaviors intercept the
node's protocol duties (proposing, validating, serving reads).  All
adversary randomness comes from a seeded generator, so a failing
seeded run replays exactly.

Grammar for the CLI flag: ``node_id:behavior[:param=value]``,
comma-separated, e.g. ``p0r1:mute,p1r2:stale_responder:lag=5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

BEHAVIORS = (
    "equivocate",
    "stale_responder",
    "bad_cd_vector",
    "forged_proof",
    "mute",
    "forge_sig",
)


class UnsupportedBehavior(ValueError):
    pass


class FaultBudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    node_id: str
    behavior: str
    params: tuple[tuple[str, str], ...] = ()

    def param(self, name: str, default: str) -> str:
        for key, value in self.params:
            if key == name:
                return value
        return default


def parse_fault_specs(text: str) -> list[FaultSpec]:
    specs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) < 2:
            raise UnsupportedBehavior(f"bad fault spec {chunk!r}")
        node_id, behavior = parts[0], parts[1]
        if behavior not in BEHAVIORS:
            raise UnsupportedBehavior(f"unknown behavior {behavior!r}")
        params = []
        for extra in parts[2:]:
            if "=" not in extra:
                raise UnsupportedBehavior(f"bad fault param {extra!r}")
            key, value = extra.split("=", 1)
            params.append((key, value))
        specs.append(FaultSpec(node_id, behavior, tuple(params)))
    return specs


def check_fault_budget(
    specs: list[FaultSpec],
    partition_of_node: dict[str, int],
    f: int,
    unsafe: bool = False,
) -> None:
    """Reject configurations with more than f faulty nodes in a cluster
    unless explicitly running in unsafe mode (negative tests only)."""
    per_cluster: dict[int, set[str]] = {}
    for spec in specs:
        part = partition_of_node.get(spec.node_id)
        if part is None:
            raise UnsupportedBehavior(f"unknown node {spec.node_id!r}")
        per_cluster.setdefault(part, set()).add(spec.node_id)
    if unsafe:
        return
    for part, nodes in per_cluster.items():
        if len(nodes) > f:
            raise FaultBudgetExceeded(
                f"cluster {part} has {len(nodes)} faulty nodes, budget is {f}"
            )


def wrap(node, spec: FaultSpec) -> None:
    """Apply a behavior to a node in place."""
    if spec.behavior not in BEHAVIORS:
        raise UnsupportedBehavior(spec.behavior)
    node.behavior = spec.behavior
    node.behavior_spec = spec
