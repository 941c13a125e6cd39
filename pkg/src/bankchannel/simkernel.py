"""Deterministic discrete-event kernel.

Time is an integer count of picoseconds. Events with equal timestamps fire in
insertion order, so a run is fully determined by its inputs and seeds.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import zlib
from typing import Any, Callable, NamedTuple

import numpy as np

PS = 1
NS = 1_000
US = 1_000_000
MS = 1_000_000_000
SEC = 1_000_000_000_000


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class SimEvent(NamedTuple):
    fire_at: int
    sequence: int
    kind: str
    action: Callable[..., Any]
    args: tuple


class Simulator:
    """Single-threaded event loop with a global virtual clock.

    With ``record=True`` every dequeued event is folded into a running digest
    (time, sequence, kind) which :meth:`state_hash` exposes for golden tests.
    """

    def __init__(self, record: bool = False):
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self.scheduled = 0
        self.processed = 0
        self._digest = hashlib.blake2b(digest_size=16) if record else None

    def schedule(self, fire_at: int, action: Callable[..., Any], *args: Any,
                 kind: str = "generic") -> SimEvent:
        if fire_at < self.now:
            raise SchedulingError(
                f"event {kind!r} scheduled at t={fire_at}ps before clock t={self.now}ps")
        event = SimEvent(int(fire_at), next(self._seq), kind, action, args)
        heapq.heappush(self._queue, event)
        self.scheduled += 1
        return event

    def schedule_in(self, delay: int, action: Callable[..., Any], *args: Any,
                    kind: str = "generic") -> SimEvent:
        return self.schedule(self.now + delay, action, *args, kind=kind)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def peek(self) -> int | None:
        return self._queue[0].fire_at if self._queue else None

    def run_until(self, deadline: int) -> int:
        """Process every event with ``fire_at <= deadline``; return how many ran.

        The clock ends at ``deadline`` (or stays put if it is already past it).
        """
        queue = self._queue
        digest = self._digest
        count = 0
        while queue and queue[0].fire_at <= deadline:
            event = heapq.heappop(queue)
            self.now = event.fire_at
            if digest is not None:
                digest.update(f"{event.fire_at}:{event.sequence}:{event.kind};".encode())
            event.action(*event.args)
            count += 1
        self.processed += count
        if deadline > self.now:
            self.now = deadline
        return count

    def state_hash(self) -> str:
        if self._digest is None:
            raise RuntimeError("simulator was created with record=False")
        return self._digest.hexdigest()


def stream_key(stream_id: str) -> int:
    return zlib.crc32(stream_id.encode("utf-8"))


def rng_stream(seed: int, stream_id: str) -> np.random.Generator:
    """Independent generator for one noise source.

    Identical ``(seed, stream_id)`` pairs give identical draws on every
    platform; distinct stream ids never share state.
    """
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))
