"""Workload generation and configuration.

Configs are flat ``key = value`` text files with ``#`` comments; every
field of WorkloadConfig is a key and CLI flags override file values.
Keys are distributed across partitions by hashing, and transactions
are generated deterministically from a seed.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import random
from dataclasses import dataclass
from pathlib import Path


class InvalidConfig(ValueError):
    pass


@dataclass
class WorkloadConfig:
    n_partitions: int = 3
    f: int = 1
    replicas_per_cluster: int = 4  # must equal 3f+1
    n_keys: int = 10000
    key_size: int = 24
    value_size: int = 16
    n_txns: int = 2000
    mix_local_rw: int = 30
    mix_dist_rw: int = 40
    mix_read_only: int = 25
    mix_write_only: int = 5
    reads_per_txn: int = 5
    writes_per_txn: int = 3
    ro_keys_per_txn: int = 5
    ro_partitions_per_txn: int = 3
    clients: int = 40
    seal_interval_ms: float = 10.0
    seal_max_txns: int = 64
    intra_latency_min_ms: float = 0.5
    intra_latency_max_ms: float = 2.0
    inter_latency_min_ms: float = 5.0
    inter_latency_max_ms: float = 10.0
    extra_inter_latency_ms: float = 0.0
    drop_rate: float = 0.0
    dup_rate: float = 0.0
    clock_skew_max_ms: float = 0.0
    freshness_delta_ms: float = 30000.0
    scheme: str = "keyed-hash"
    ro_mode: str = "verified"  # verified | mutant | baseline
    ro_target: str = "leader"  # leader | random
    ro_dep_wait_ms: float = 500.0
    client_resend_ms: float = 60000.0
    horizon_ms: float = 10_000_000.0
    record_messages: bool = True

    def validate(self) -> None:
        mix = (
            self.mix_local_rw
            + self.mix_dist_rw
            + self.mix_read_only
            + self.mix_write_only
        )
        if mix != 100:
            raise InvalidConfig(f"mix percentages sum to {mix}, not 100")
        if self.replicas_per_cluster != 3 * self.f + 1:
            raise InvalidConfig("replicas_per_cluster must be 3f+1")
        if self.n_partitions < 1:
            raise InvalidConfig("need at least one partition")
        if self.ro_partitions_per_txn > self.n_partitions:
            raise InvalidConfig("ro_partitions_per_txn exceeds n_partitions")
        if self.ro_mode not in ("verified", "mutant", "baseline"):
            raise InvalidConfig(f"unknown ro_mode {self.ro_mode!r}")
        if self.ro_target not in ("leader", "random"):
            raise InvalidConfig(f"unknown ro_target {self.ro_target!r}")
        if self.mix_dist_rw and self.n_partitions < 2:
            raise InvalidConfig("distributed transactions need >= 2 partitions")

    def with_overrides(self, overrides: dict[str, str]) -> "WorkloadConfig":
        values = dataclasses.asdict(self)
        for key, raw in overrides.items():
            if key not in values:
                raise InvalidConfig(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, type(values[key]))
        cfg = WorkloadConfig(**values)
        # Keep the cluster size consistent when only f was changed.
        if "f" in overrides and "replicas_per_cluster" not in overrides:
            cfg.replicas_per_cluster = 3 * cfg.f + 1
        cfg.validate()
        return cfg


def _coerce(key: str, raw, target_type):
    if isinstance(raw, target_type) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    if target_type is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidConfig(f"{key}: not a boolean: {text!r}")
    try:
        return target_type(text)
    except ValueError as exc:
        raise InvalidConfig(f"{key}: {exc}") from exc


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> WorkloadConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise InvalidConfig(f"{path}:{lineno}: expected key = value")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = raw.strip()
    if overrides:
        values.update(overrides)
    return WorkloadConfig().with_overrides(values)


def key_name(i: int, key_size: int) -> str:
    return f"k{i:0{max(1, key_size - 1)}d}"[:key_size]


@functools.lru_cache(maxsize=65536)
def partition_of(key: str, n_partitions: int) -> int:
    h = hashlib.blake2b(key.encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(h, "little") % n_partitions


def initial_value(key: str, value_size: int) -> bytes:
    return hashlib.blake2b(
        key.encode("utf-8") + b"/init", digest_size=max(1, value_size)
    ).digest()


def write_value(txn_id: str, key: str, value_size: int) -> bytes:
    return hashlib.blake2b(
        f"{txn_id}/{key}".encode("utf-8"), digest_size=max(1, value_size)
    ).digest()


@dataclass(frozen=True)
class GeneratedTxn:
    txn_id: str
    profile: str  # local_rw | dist_rw | read_only | write_only
    reads: tuple[str, ...]
    writes: tuple[str, ...]

    @property
    def keys(self) -> tuple[str, ...]:
        return self.reads + self.writes


class KeySpace:
    def __init__(self, config: WorkloadConfig):
        self.config = config
        self.keys = [key_name(i, config.key_size) for i in range(config.n_keys)]
        self.by_partition: list[list[str]] = [[] for _ in range(config.n_partitions)]
        for key in self.keys:
            self.by_partition[partition_of(key, config.n_partitions)].append(key)
        for part, bucket in enumerate(self.by_partition):
            if not bucket:
                raise InvalidConfig(f"partition {part} owns no keys; raise n_keys")


def generate(config: WorkloadConfig, seed: int, keyspace: KeySpace | None = None) -> list[GeneratedTxn]:
    """Deterministic transaction stream for one run."""
    config.validate()
    space = keyspace if keyspace is not None else KeySpace(config)
    rng = random.Random(("workload", seed).__repr__())
    profiles = (
        ["local_rw"] * config.mix_local_rw
        + ["dist_rw"] * config.mix_dist_rw
        + ["read_only"] * config.mix_read_only
        + ["write_only"] * config.mix_write_only
    )
    txns = []
    for i in range(config.n_txns):
        profile = rng.choice(profiles)
        txn_id = f"t{i:06d}"
        if profile == "local_rw":
            part = rng.randrange(config.n_partitions)
            bucket = space.by_partition[part]
            picked = _sample(rng, bucket, config.reads_per_txn + config.writes_per_txn)
            txns.append(
                GeneratedTxn(
                    txn_id,
                    profile,
                    tuple(picked[: config.reads_per_txn]),
                    tuple(picked[config.reads_per_txn :]),
                )
            )
        elif profile == "dist_rw":
            picked = _spanning_sample(
                rng, space, config.reads_per_txn + config.writes_per_txn
            )
            txns.append(
                GeneratedTxn(
                    txn_id,
                    profile,
                    tuple(picked[: config.reads_per_txn]),
                    tuple(picked[config.reads_per_txn :]),
                )
            )
        elif profile == "write_only":
            picked = _sample(rng, space.keys, config.writes_per_txn)
            txns.append(GeneratedTxn(txn_id, profile, (), tuple(picked)))
        else:
            parts = rng.sample(
                range(config.n_partitions), config.ro_partitions_per_txn
            )
            picked: list[str] = []
            for j in range(config.ro_keys_per_txn):
                bucket = space.by_partition[parts[j % len(parts)]]
                key = rng.choice(bucket)
                while key in picked:
                    key = rng.choice(bucket)
                picked.append(key)
            txns.append(GeneratedTxn(txn_id, profile, tuple(picked), ()))
    return txns


def _sample(rng: random.Random, bucket: list[str], n: int) -> list[str]:
    if n <= len(bucket):
        return rng.sample(bucket, n)
    return [rng.choice(bucket) for _ in range(n)]  # tiny keyspace fallback


def _spanning_sample(rng: random.Random, space: KeySpace, n: int) -> list[str]:
    config = space.config
    picked = _sample(rng, space.keys, n)
    spanned = {partition_of(k, config.n_partitions) for k in picked}
    if len(spanned) < 2:
        # Force a second partition so the transaction is distributed.
        only = next(iter(spanned))
        other = rng.choice([p for p in range(config.n_partitions) if p != only])
        picked[-1] = rng.choice(space.by_partition[other])
    return picked
