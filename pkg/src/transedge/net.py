"""Deterministic discrete-event network and simulated clock.

A single seeded RNG drives every latency sample, drop, and duplicate,
and events are delivered in (time, sequence) order, so a (seed,
config, workload) triple fully determines a run.  Handlers execute
synchronously inside the event loop: one loop owns all node state and
no two handlers ever run concurrently.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable

Handler = Callable[[str, Any], None]


@dataclass(frozen=True)
class LinkProfile:
    min_ms: float
    max_ms: float
    drop_rate: float = 0.0
    dup_rate: float = 0.0


@dataclass
class Envelope:
    deliver_at: float
    seq: int
    sender: str
    to: str
    payload: Any


class Simulator:
    def __init__(
        self,
        seed: int,
        link_profile: Callable[[str, str], LinkProfile],
        clock_skew: Callable[[str], float] | None = None,
    ) -> None:
        self.rng = random.Random(("net", seed).__repr__())
        self.link_profile = link_profile
        self.clock_skew = clock_skew or (lambda node: 0.0)
        self.now: float = 0.0
        self._queue: list[tuple] = []
        self._seq = 0
        self._handlers: dict[str, Handler] = {}
        self.on_send: Callable[[Envelope], None] | None = None
        self.horizon_reached = False

    def add_node(self, node_id: str, handler: Handler) -> None:
        self._handlers[node_id] = handler

    def clock(self, node_id: str) -> float:
        return self.now + self.clock_skew(node_id)

    def send(self, sender: str, to: str, payload: Any) -> None:
        """Schedule delivery with sampled latency; may drop or duplicate."""
        if self.on_send is not None:
            self.on_send(Envelope(self.now, -1, sender, to, payload))
        profile = self.link_profile(sender, to)
        copies = 1
        if profile.drop_rate and self.rng.random() < profile.drop_rate:
            copies = 0
        elif profile.dup_rate and self.rng.random() < profile.dup_rate:
            copies = 2
        for _ in range(copies):
            latency = self.rng.uniform(profile.min_ms, profile.max_ms)
            self._push(self.now + latency, sender, to, payload)

    def schedule(self, delay: float, node_id: str, payload: Any) -> None:
        """Timer delivery to a node's own handler; never dropped."""
        self._push(self.now + delay, node_id, node_id, payload)

    def _push(self, at: float, sender: str, to: str, payload: Any) -> None:
        # Plain tuples: the unique sequence number settles every heap
        # comparison before the payload is ever looked at.
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, sender, to, payload))

    def run_until(
        self,
        condition: Callable[[], bool] | None = None,
        max_time: float = float("inf"),
    ) -> float:
        """Process events in order until the condition holds or the
        horizon passes; reports (rather than raises) a missed horizon."""
        self.horizon_reached = False
        queue = self._queue
        handlers = self._handlers
        while queue:
            if condition is not None and condition():
                return self.now
            at = queue[0][0]
            if at > max_time:
                self.horizon_reached = condition is not None and not condition()
                self.now = max_time
                return self.now
            at, _seq, sender, to, payload = heapq.heappop(queue)
            assert at >= self.now, "delivery before send"
            self.now = at
            handler = handlers.get(to)
            if handler is not None:
                handler(sender, payload)
        if condition is not None and not condition():
            self.horizon_reached = True
        return self.now
