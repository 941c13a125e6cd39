"""Memory subsystem of the intermediary node.

Banks are closed-page FIFO servers with one fixed service time. A memory
controller routes 64B requests to banks through an interleaving scheme and
keeps per-bank, per-origin accounting.

Two request classes reach a bank:

* I/O requests (RDMA DMA traffic) are submitted explicitly. Each bank admits
  at most ``io_queue_limit`` of them at a time; the excess waits in a per-bank
  FIFO on the NIC side of the controller.
* CPU requests (local load, local latency probes, and the memory footprint of
  background network load) are Poisson streams evaluated lazily: a bank folds
  in every background arrival up to time ``t`` whenever it is touched at ``t``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .simkernel import NS, SEC, Simulator, rng_stream

BLOCK = 64
ORIGINS = ("channel_sender", "channel_receiver", "local_load", "network_load", "local_probe")
IO_ORIGINS = frozenset({"channel_sender", "channel_receiver", "network_load"})


class AlignmentError(ValueError):
    """Address is not aligned to a 64B cache block."""


# --------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class DramTiming:
    t_cl: int = 14 * NS
    t_rcd: int = 13 * NS
    t_rp: int = 13 * NS

    @property
    def service_time(self) -> int:
        return self.t_cl + self.t_rcd + self.t_rp

    @property
    def peak_bandwidth(self) -> float:
        """Bytes/s one bank sustains when every access misses the row buffer."""
        return BLOCK * SEC / self.service_time

    @classmethod
    def from_service_time(cls, service_time: int) -> "DramTiming":
        third, rem = divmod(int(service_time), 3)
        return cls(t_cl=third + rem, t_rcd=third, t_rp=third)


# --------------------------------------------------------------------------
# interleaving

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class BlockPermutation:
    """Keyed Feistel permutation over ``2*half_bits``-bit block indices."""

    rounds = 4

    def __init__(self, key: int, half_bits: int = 21):
        self.key = key & _MASK64
        self.half_bits = half_bits
        self._mask = (1 << half_bits) - 1
        self._round_keys = [_mix64(self.key ^ (0xA5A5A5A5 * (i + 1))) for i in range(self.rounds)]

    def __call__(self, block: int) -> int:
        mask = self._mask
        width = 2 * self.half_bits
        high = block >> width
        left = (block >> self.half_bits) & mask
        right = block & mask
        for rk in self._round_keys:
            left, right = right, left ^ (_mix64(right ^ rk) & mask)
        return (high << width) | (left << self.half_bits) | right


@dataclass(frozen=True)
class InterleavingScheme:
    """Maps a physical address to a bank index.

    ``functions[j]`` lists the address bits whose XOR gives bank-selector bit
    ``j``. The ``cryptographic`` kind first runs the cache-block index through
    a keyed permutation, then applies the same selector functions.
    """

    kind: str
    functions: tuple[tuple[int, ...], ...]
    key: int | None = None
    route_latency: int = 0
    synthetic: bool = True
    _masks: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _perm: BlockPermutation | None = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("xor_linear", "identity_span", "cryptographic"):
            raise ValueError(f"unknown interleaving kind {self.kind!r}")
        if not self.functions:
            raise ValueError("scheme needs at least one bank-selector function")
        funcs = tuple(tuple(sorted(int(b) for b in f)) for f in self.functions)
        for f in funcs:
            if not f or f[0] < 6:
                raise ValueError(f"selector function {f} must be non-empty and use bits >= 6")
        object.__setattr__(self, "functions", funcs)
        object.__setattr__(self, "_masks", tuple(sum(1 << b for b in f) for f in funcs))
        perm = None
        if self.kind == "cryptographic":
            if self.key is None:
                raise ValueError("cryptographic scheme requires a key")
            perm = BlockPermutation(self.key)
        object.__setattr__(self, "_perm", perm)

    @property
    def bank_count(self) -> int:
        return 1 << len(self.functions)

    @property
    def span(self) -> tuple[int, int]:
        return 6, max(max(f) for f in self.functions)

    @property
    def input_bits(self) -> frozenset[int]:
        return frozenset(b for f in self.functions for b in f)

    def route(self, addr: int) -> int:
        if addr & (BLOCK - 1):
            raise AlignmentError(f"address {addr:#x} is not 64B aligned")
        if self._perm is not None:
            addr = self._perm(addr >> 6) << 6
        bank = 0
        for j, mask in enumerate(self._masks):
            bank |= ((addr & mask).bit_count() & 1) << j
        return bank

    # constructors -------------------------------------------------------

    @classmethod
    def identity_span(cls, high: int, low: int = 6) -> "InterleavingScheme":
        return cls("identity_span", tuple((b,) for b in range(low, high + 1)))

    @classmethod
    def cryptographic(cls, base: "InterleavingScheme", key: int,
                      route_latency: int = 10 * NS) -> "InterleavingScheme":
        return cls("cryptographic", base.functions, key=key, route_latency=route_latency)

    @classmethod
    def random_xor(cls, rng: np.random.Generator, high: int, n_functions: int = 7,
                   low: int = 6) -> "InterleavingScheme":
        """Random full-rank XOR scheme whose input bits span exactly ``[low, high]``."""
        if high - low + 1 < n_functions:
            raise ValueError("span too narrow for the requested number of functions")
        bits = list(range(low, high + 1))
        while True:
            order = rng.permutation(bits)
            funcs: list[list[int]] = [[int(order[j])] for j in range(n_functions)]
            for b in order[n_functions:]:
                funcs[int(rng.integers(n_functions))].append(int(b))
            for f in funcs:
                extra = rng.integers(0, 2)
                if extra:
                    f.append(int(rng.choice(bits)))
            funcs = [sorted(set(f)) for f in funcs]
            if _full_rank([sum(1 << b for b in f) for f in funcs]):
                return cls("xor_linear", tuple(tuple(f) for f in funcs))

    # serialization ------------------------------------------------------

    def to_json(self) -> dict:
        data = {"bank_count": self.bank_count, "functions": [list(f) for f in self.functions],
                "kind": self.kind}
        if self.key is not None:
            data["key"] = f"{self.key:x}"
        if self.route_latency:
            data["route_latency_ns"] = self.route_latency / NS
        return data

    @classmethod
    def from_json(cls, data: dict) -> "InterleavingScheme":
        funcs = tuple(tuple(f) for f in data["functions"])
        key = data.get("key")
        if isinstance(key, str):
            key = int(key, 16)
        kind = data.get("kind", "xor_linear")
        latency = int(round(float(data.get("route_latency_ns",
                                           10.0 if kind == "cryptographic" else 0.0)) * NS))
        scheme = cls(kind, funcs, key=key, route_latency=latency)
        if "bank_count" in data and int(data["bank_count"]) != scheme.bank_count:
            raise ValueError(f"bank_count {data['bank_count']} does not match "
                             f"{len(funcs)} selector functions ({scheme.bank_count} banks)")
        return scheme

    @classmethod
    def load(cls, path: str | Path) -> "InterleavingScheme":
        return cls.from_json(json.loads(Path(path).read_text()))


def _full_rank(masks: list[int]) -> bool:
    rows = list(masks)
    rank = 0
    for bit in range(64):
        pivot = next((i for i in range(rank, len(rows)) if rows[i] >> bit & 1), None)
        if pivot is None:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        for i in range(len(rows)):
            if i != rank and rows[i] >> bit & 1:
                rows[i] ^= rows[rank]
        rank += 1
    return rank == len(masks)


def staggered_functions(high: int, n_functions: int = 7, low: int = 6) -> tuple[tuple[int, ...], ...]:
    """Selector functions ``{low+j, low+n+j, ...}`` folded so their union is ``[low, high]``."""
    funcs = [[] for _ in range(n_functions)]
    for i, bit in enumerate(range(low, high + 1)):
        funcs[i % n_functions].append(bit)
    return tuple(tuple(f) for f in funcs)


def route(scheme: InterleavingScheme, addr: int) -> int:
    return scheme.route(addr)


# --------------------------------------------------------------------------
# requests and banks


@dataclass(slots=True)
class MemRequest:
    phys_addr: int
    issue_time: int
    origin: str = "channel_sender"

    def __post_init__(self):
        if self.phys_addr % BLOCK:
            raise AlignmentError(f"address {self.phys_addr:#x} is not 64B aligned")
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown request origin {self.origin!r}")


@dataclass(slots=True)
class _IoEntry:
    req: MemRequest
    arrival: int
    completion: int | None = None
    waiters: list = field(default_factory=list)


class Bank:
    def __init__(self, bank_id: int, service_time: int, record: bool = False):
        self.id = bank_id
        self.service_time = service_time
        self.busy_until = 0
        self.last_admit = 0
        self.served_count = 0
        self.served_bytes = 0
        self.count_by_origin = dict.fromkeys(ORIGINS, 0)
        self.io_inflight: deque[int] = deque()
        self.overflow: deque[_IoEntry] = deque()
        self.admit_pending = False
        self.absorbed_until = -1
        self.log: list[tuple[int, int, str]] | None = [] if record else None

    def serve(self, admit: int, origin: str) -> int:
        if admit < self.last_admit:
            raise AssertionError(f"bank {self.id}: admission at {admit} precedes {self.last_admit}")
        self.last_admit = admit
        start = admit if admit > self.busy_until else self.busy_until
        done = start + self.service_time
        self.busy_until = done
        self.served_count += 1
        self.served_bytes += BLOCK
        self.count_by_origin[origin] += 1
        if self.log is not None:
            self.log.append((admit, done, origin))
        return done

    @property
    def queue_depth(self) -> int:
        return len(self.io_inflight) + len(self.overflow)


# --------------------------------------------------------------------------
# lazy background streams


class BackgroundStream:
    """Per-bank Poisson arrivals of CPU-side 64B reads.

    Arrivals are generated in fixed chunks from a per-bank RNG stream so the
    draws do not depend on when (or whether) other banks are evaluated.
    ``rate_fn`` maps an array of times (ps) to the aggregate bytes/s across all
    banks; ``max_rate`` bounds it for thinning.
    """

    chunk = 20 * 1_000_000  # 20us

    def __init__(self, origin: str, seed: int, name: str, bank_count: int,
                 max_rate: float, rate_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                 start: int = 0):
        self.origin = origin
        self.seed = seed
        self.name = name
        self.bank_count = bank_count
        self.max_rate = float(max_rate)
        self.rate_fn = rate_fn
        self.start = int(start)
        self._per_bank_per_ps = self.max_rate / BLOCK / bank_count / SEC
        self._rngs: dict[int, np.random.Generator] = {}
        self._next_chunk: dict[int, int] = {}
        self._buf: dict[int, list[np.ndarray]] = {}

    def _extra(self, rng: np.random.Generator, n: int) -> np.ndarray | None:
        return None

    def _generate(self, bank: int) -> None:
        rng = self._rngs.get(bank)
        if rng is None:
            rng = self._rngs[bank] = rng_stream(self.seed, f"{self.name}:bank{bank}")
        c = self._next_chunk.get(bank, 0)
        self._next_chunk[bank] = c + 1
        lo = self.start + c * self.chunk
        n = int(rng.poisson(self._per_bank_per_ps * self.chunk))
        times = np.sort(rng.integers(lo, lo + self.chunk, size=n, dtype=np.int64))
        extra = self._extra(rng, n)
        if self.rate_fn is not None and n:
            keep = rng.random(n) * self.max_rate < self.rate_fn(times)
            times = times[keep]
            if extra is not None:
                extra = extra[keep]
        if extra is None:
            extra = np.zeros(len(times), dtype=np.int64)
        self._buf.setdefault(bank, []).append(np.vstack([times, extra]))

    def take(self, bank: int, upto: int) -> np.ndarray:
        """Pop arrivals with time <= ``upto``; returns a (2, n) int64 array."""
        if upto < self.start:
            return np.empty((2, 0), dtype=np.int64)
        while self.start + self._next_chunk.get(bank, 0) * self.chunk <= upto:
            self._generate(bank)
        parts = self._buf.get(bank, [])
        out = []
        while parts:
            head = parts[0]
            if not head.shape[1]:
                parts.pop(0)
                continue
            if head[0, -1] <= upto:
                out.append(parts.pop(0))
                continue
            cut = int(np.searchsorted(head[0], upto, side="right"))
            if cut:
                out.append(head[:, :cut])
                parts[0] = head[:, cut:]
            break
        if not out:
            return np.empty((2, 0), dtype=np.int64)
        return out[0] if len(out) == 1 else np.hstack(out)


class LocalProbeStream(BackgroundStream):
    """Random-access latency microbenchmark running on the intermediary's CPU.

    Each sample's latency is ``base + bank wait + service + stall`` where the
    stall term is the core-side latency tail (uniform up to ``stall_max`` with
    probability ``stall_prob``), drawn together with the arrival.
    """

    def __init__(self, seed: int, bank_count: int, rate: float, base_latency: int,
                 stall_prob: float, stall_max: int, start: int = 0):
        super().__init__("local_probe", seed, "local_probe", bank_count, rate * BLOCK, start=start)
        self.base_latency = base_latency
        self.stall_prob = stall_prob
        self.stall_max = stall_max

    def _extra(self, rng, n):
        hit = rng.random(n) < self.stall_prob
        return np.where(hit, (rng.random(n) * self.stall_max).astype(np.int64), 0)


# --------------------------------------------------------------------------
# controller


class MemoryController:
    """Per-bank FIFO queues behind a pluggable interleaving scheme."""

    def __init__(self, sim: Simulator, scheme: InterleavingScheme,
                 timing: DramTiming | None = None, io_queue_limit: int | None = None,
                 coalesce: bool = True, record: bool = False):
        self.sim = sim
        self.scheme = scheme
        self.timing = timing or DramTiming()
        self.service_time = self.timing.service_time
        self.io_queue_limit = io_queue_limit
        self.coalesce = coalesce
        self.banks = [Bank(i, self.service_time, record) for i in range(scheme.bank_count)]
        self.streams: list[BackgroundStream] = []
        self.coalesced = 0
        self._pending: dict[int, _IoEntry] = {}
        self._completions: dict[str, list[int]] = {o: [] for o in ORIGINS}
        self._bg_completions: dict[str, list[np.ndarray]] = {o: [] for o in ORIGINS}
        self.local_probe_samples: list[np.ndarray] = []

    @property
    def bank_count(self) -> int:
        return len(self.banks)

    @property
    def per_bank_peak(self) -> float:
        return self.timing.peak_bandwidth

    def add_stream(self, stream: BackgroundStream) -> None:
        self.streams.append(stream)

    # background folding ---------------------------------------------------

    def _absorb(self, bank: Bank, upto: int) -> None:
        if upto <= bank.absorbed_until or not self.streams:
            return
        bank.absorbed_until = upto
        pieces = []
        for k, stream in enumerate(self.streams):
            arr = stream.take(bank.id, upto)
            if arr.shape[1]:
                pieces.append((k, arr))
        if not pieces:
            return
        if len(pieces) == 1:
            k, arr = pieces[0]
            times, extra = arr[0], arr[1]
            which = np.full(len(times), k, dtype=np.int64)
        else:
            times = np.concatenate([a[0] for _, a in pieces])
            extra = np.concatenate([a[1] for _, a in pieces])
            which = np.concatenate([np.full(a.shape[1], k, dtype=np.int64) for k, a in pieces])
            order = np.argsort(times, kind="stable")
            times, extra, which = times[order], extra[order], which[order]
        s = self.service_time
        n = len(times)
        idx = np.arange(n, dtype=np.int64)
        floor = max(bank.busy_until, 0)
        lead = np.maximum(np.maximum.accumulate(times - idx * s), floor)
        done = lead + (idx + 1) * s
        wait = done - s - times
        bank.busy_until = int(done[-1])
        bank.last_admit = max(bank.last_admit, int(times[-1]))
        bank.served_count += n
        bank.served_bytes += n * BLOCK
        for k, stream in enumerate(self.streams):
            sel = which == k
            cnt = int(sel.sum())
            if not cnt:
                continue
            bank.count_by_origin[stream.origin] += cnt
            self._bg_completions[stream.origin].append(done[sel])
            if isinstance(stream, LocalProbeStream):
                lat = stream.base_latency + wait[sel] + s + extra[sel]
                self.local_probe_samples.append(np.vstack([times[sel], lat]))
        if bank.log is not None:
            for a, d, k in zip(times.tolist(), done.tolist(), which.tolist()):
                bank.log.append((a, d, self.streams[k].origin))

    def flush(self, upto: int) -> None:
        """Fold background arrivals up to ``upto`` into every bank."""
        for bank in self.banks:
            self._absorb(bank, upto)

    # I/O path -----------------------------------------------------------------

    def submit(self, req: MemRequest, on_scheduled: Callable[[int], None] | None = None,
               arrival: int | None = None) -> int | None:
        """Enqueue ``req`` at its bank.

        Returns the completion time when it is known immediately; otherwise
        the request waits for an I/O slot and ``on_scheduled(completion)``
        fires once it is admitted. ``on_scheduled`` is always called.
        """
        t = req.issue_time if arrival is None else arrival
        t += self.scheme.route_latency
        bank = self.banks[self.scheme.route(req.phys_addr)]
        is_io = req.origin in IO_ORIGINS
        if not is_io:
            self._absorb(bank, t)
            done = bank.serve(t, req.origin)
            self._completions[req.origin].append(done)
            if on_scheduled:
                on_scheduled(done)
            return done
        if self.coalesce:
            prior = self._pending.get(req.phys_addr)
            if prior is not None and (prior.completion is None or prior.completion > t):
                self.coalesced += 1
                if prior.completion is None:
                    if on_scheduled:
                        prior.waiters.append(on_scheduled)
                    return None
                if on_scheduled:
                    on_scheduled(prior.completion)
                return prior.completion
        entry = _IoEntry(req, t)
        if on_scheduled:
            entry.waiters.append(on_scheduled)
        if self.coalesce:
            self._pending[req.phys_addr] = entry
        limit = self.io_queue_limit
        inflight = bank.io_inflight
        while inflight and inflight[0] <= t:
            inflight.popleft()
        if limit is None or (not bank.overflow and len(inflight) < limit):
            self._admit(bank, entry, t)
            return entry.completion
        bank.overflow.append(entry)
        self._arm(bank)
        return None

    def _admit(self, bank: Bank, entry: _IoEntry, t: int) -> None:
        admit = max(t, entry.arrival)
        self._absorb(bank, admit)
        done = bank.serve(admit, entry.req.origin)
        bank.io_inflight.append(done)
        entry.completion = done
        self._completions[entry.req.origin].append(done)
        for cb in entry.waiters:
            cb(done)
        entry.waiters = []

    def _arm(self, bank: Bank) -> None:
        if bank.admit_pending or not bank.overflow:
            return
        bank.admit_pending = True
        self.sim.schedule(max(bank.io_inflight[0], self.sim.now), self._on_slot_free, bank,
                          kind="service-complete")

    def _on_slot_free(self, bank: Bank) -> None:
        bank.admit_pending = False
        now = self.sim.now
        inflight = bank.io_inflight
        while inflight and inflight[0] <= now:
            inflight.popleft()
        while bank.overflow and len(inflight) < self.io_queue_limit:
            self._admit(bank, bank.overflow.popleft(), now)
        self._arm(bank)

    # accounting ---------------------------------------------------------------

    def completion_times(self, origin: str) -> np.ndarray:
        parts = [np.asarray(self._completions[origin], dtype=np.int64)]
        parts.extend(self._bg_completions[origin])
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def measured_bandwidth(self, t0: int, t1: int, origins: Iterable[str] | None = None) -> float:
        """Bytes/s served in ``[t0, t1)`` for requests of the given origins."""
        if t1 <= t0:
            raise ValueError("bandwidth window must be non-empty")
        origins = ORIGINS if origins is None else tuple(origins)
        total = 0
        for origin in origins:
            if origin not in ORIGINS:
                raise ValueError(f"unknown origin {origin!r}")
            done = self.completion_times(origin)
            total += int(np.count_nonzero((done >= t0) & (done < t1)))
        return total * BLOCK * SEC / (t1 - t0)

    def local_probe_trace(self) -> tuple[np.ndarray, np.ndarray]:
        """Issue times and latencies (ps) of local-probe samples, time ordered."""
        if not self.local_probe_samples:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        arr = np.hstack(self.local_probe_samples)
        order = np.argsort(arr[0], kind="stable")
        return arr[0][order], arr[1][order]


# --------------------------------------------------------------------------
# percentiles


class InsufficientSamplesError(ValueError):
    pass


def min_samples_for(percentile: float) -> int:
    """Smallest sample count whose nearest-rank ``percentile`` is not the maximum."""
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    return math.ceil(round(100.0 / (100.0 - percentile), 9))


def nearest_rank(values: Sequence[int] | np.ndarray, percentile: float) -> int:
    arr = np.sort(np.asarray(values))
    if not len(arr):
        raise InsufficientSamplesError("no samples")
    rank = max(1, math.ceil(round(percentile / 100.0 * len(arr), 9)))
    return int(arr[min(rank, len(arr)) - 1])


def local_latency_percentiles(samples: Sequence[int] | np.ndarray,
                              percentiles: Sequence[float]) -> list[int]:
    arr = np.sort(np.asarray(samples))
    out = []
    for p in percentiles:
        need = min_samples_for(p)
        if len(arr) < need:
            raise InsufficientSamplesError(
                f"p{p} needs at least {need} samples, got {len(arr)}")
        rank = math.ceil(round(p / 100.0 * len(arr), 9))
        out.append(int(arr[rank - 1]))
    return out
