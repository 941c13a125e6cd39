"""Bank-bit discovery from an RDMA-only vantage point.

The agent fixes one more low address bit to zero per iteration, draws a fresh
set of distinct addresses over the remaining free bits, and measures
closed-loop read throughput over that set. While the set still spreads over
several banks the throughput stays high; once every bank-selector function is
pinned the set collapses onto one bank and throughput drops to the single-bank
ceiling. The bit whose fixing causes that drop is the top of the bank span.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .memsys import BLOCK
from .rdmanet import Fabric, MemoryRegion
from .simkernel import NS, SEC, US, rng_stream


class DiscoveryError(ValueError):
    pass


@dataclass(frozen=True)
class DiscoveryConfig:
    probe_set_size: int = 64
    duration: int = 20 * US
    warmup: int = 4 * US
    single_bank_threshold: float | None = None   # bytes/s; default 1.05 x per-bank peak
    threshold_factor: float = 1.05
    confirmations: int = 2
    max_bit: int = 35

    def __post_init__(self):
        if self.probe_set_size < 64:
            raise ValueError("probe_set_size must be at least 64 to defeat coalescing")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 6 <= self.max_bit <= 63:
            raise ValueError("max_bit must lie in [6, 63]")

    @classmethod
    def for_fabric(cls, fabric: Fabric, **kw) -> "DiscoveryConfig":
        """Size the probe set so the read window outruns one bank.

        With one outstanding read per address, a set of ``n`` addresses moves
        at most ``n * 64B / RTT``. The set must exceed the single-bank
        bandwidth-delay product by a margin, or a multi-bank set would look
        bank-bound; the size is rounded up to a multiple of 64.
        """
        bdp = fabric.memory.per_bank_peak * fabric.idle_rtt() / SEC / BLOCK
        need = max(64, -(-int(1.3 * bdp) // 64) * 64)
        kw.setdefault("probe_set_size", need)
        return cls(**kw)


@dataclass
class DiscoveryIteration:
    fixed_high: int               # bits [0, fixed_high] are zero
    throughput: float             # bytes/s
    addresses: list[int]          # virtual addresses probed
    bank_coverage: float | None = None   # filled by a ground-truth oracle, if any


@dataclass
class DiscoveryResult:
    converged: bool
    x_bit: int | None
    iterations: list[DiscoveryIteration] = field(default_factory=list)
    sample_addresses: list[int] = field(default_factory=list)
    threshold: float = 0.0
    outcome: str = ""

    @property
    def fixed_span(self) -> tuple[int, int] | None:
        return None if self.x_bit is None else (6, self.x_bit)

    @property
    def throughput_by_iteration(self) -> list[tuple[int, float]]:
        return [(it.fixed_high, it.throughput) for it in self.iterations]

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "x_bit": self.x_bit,
            "fixed_span": list(self.fixed_span) if self.fixed_span else None,
            "outcome": self.outcome,
            "threshold_gbps": self.threshold / 1e9,
            "throughput_by_iteration": [
                {"fixed_high": it.fixed_high, "throughput_gbps": it.throughput / 1e9,
                 "bank_coverage": it.bank_coverage} for it in self.iterations],
            "sample_addresses": [f"{a:#x}" for a in self.sample_addresses],
        }


def measure_throughput(fabric: Fabric, region: MemoryRegion, addresses, duration: int,
                       src: str = "receiver", warmup: int = 0) -> float:
    """Closed-loop read throughput over ``addresses``.

    Each address keeps exactly one read outstanding, reissuing on completion.
    Completions are counted in ``[start + warmup, start + warmup + duration)``
    and the fabric is drained afterwards so measurements do not overlap.
    """
    addresses = list(addresses)
    if not addresses:
        raise DiscoveryError("address set is empty")
    if duration <= 0:
        raise DiscoveryError("duration must be positive")
    if len(set(addresses)) != len(addresses):
        raise DiscoveryError("addresses must be pairwise distinct")
    for a in addresses:
        if a % BLOCK or not region.contains(a, BLOCK):
            raise DiscoveryError(f"address {a:#x} is not an aligned in-region address")
    sim = fabric.sim
    t0 = sim.now + warmup
    t1 = t0 + duration
    done = [0]

    def on_complete(read):
        if t0 <= read.complete_time < t1:
            done[0] += read.length
        if sim.now < t1:
            fabric.issue_read(src, region, read.virt_addr, BLOCK, on_complete)

    for a in addresses:
        fabric.issue_read(src, region, a, BLOCK, on_complete)
    sim.run_until(t1)
    while sim.pending:
        sim.run_until(sim.peek())
    return done[0] * SEC / duration


def _draw_offsets(rng: np.random.Generator, n_slots: int, count: int) -> list[int]:
    if n_slots < count:
        raise DiscoveryError(f"only {n_slots} distinct addresses available, need {count}")
    if n_slots <= 4 * count:
        return sorted(int(x) for x in rng.permutation(n_slots)[:count])
    seen: set[int] = set()
    while len(seen) < count:
        for x in rng.integers(0, n_slots, size=count - len(seen)).tolist():
            seen.add(x)
    return sorted(seen)


def discover_bank_span(fabric: Fabric, region: MemoryRegion,
                       config: DiscoveryConfig | None = None, seed: int = 0,
                       src: str = "receiver") -> DiscoveryResult:
    """Find the highest bank-selector bit by progressively zeroing low bits.

    Bits are counted on the offset into ``region``; with page-aligned regions
    this matches the physical address bits inside a page.
    """
    cfg = config or DiscoveryConfig.for_fabric(fabric)
    peak = fabric.memory.per_bank_peak
    threshold = cfg.single_bank_threshold or cfg.threshold_factor * peak
    rng = rng_stream(seed, f"discovery:{src}")
    result = DiscoveryResult(converged=False, x_bit=None, threshold=threshold)
    streak = 0
    first_low: DiscoveryIteration | None = None
    for fixed_high in range(5, cfg.max_bit + 1):
        n_slots = region.size >> (fixed_high + 1)
        if n_slots < cfg.probe_set_size:
            result.outcome = "insufficient-addresses"
            break
        offsets = _draw_offsets(rng, n_slots, cfg.probe_set_size)
        addrs = [region.base_virt + (o << (fixed_high + 1)) for o in offsets]
        thr = measure_throughput(fabric, region, addrs, cfg.duration, src, cfg.warmup)
        it = DiscoveryIteration(fixed_high, thr, addrs)
        result.iterations.append(it)
        if thr <= threshold:
            streak += 1
            first_low = first_low or it
            if streak > cfg.confirmations:
                result.converged = True
                result.x_bit = first_low.fixed_high
                result.sample_addresses = list(first_low.addresses)
                result.outcome = "converged"
                return result
        else:
            streak = 0
            first_low = None
    else:
        result.outcome = "max-bit-reached"
    if not result.outcome:
        result.outcome = "max-bit-reached"
    result.outcome = f"cryptographic or unknown scheme ({result.outcome})"
    return result


def addresses_per_page(region: MemoryRegion, span: tuple[int, int]) -> int:
    _, high = span
    free = region.page_bits - (high + 1)
    return 1 << free if free > 0 else 1


def pick_bank_addresses(region: MemoryRegion, span: tuple[int, int], count: int) -> list[int]:
    """``count`` distinct addresses whose bits [0, high] are zero, spread over pages first."""
    if count <= 0:
        raise DiscoveryError("count must be positive")
    per_page = addresses_per_page(region, span)
    capacity = per_page * region.pages
    if count > capacity:
        raise DiscoveryError(f"region holds {capacity} span-aligned addresses "
                             f"({per_page} per page x {region.pages} pages), need {count}")
    _, high = span
    step = 1 << (high + 1) if high + 1 < region.page_bits else region.page_size
    out = []
    for i in range(count):
        page, slot = i % region.pages, i // region.pages
        out.append(region.base_virt + page * region.page_size + slot * step)
    return out


class BankBitDiscovery(BaseEstimator):
    """Estimator wrapper: ``fit(fabric, region)`` learns ``x_bit_`` and ``span_``."""

    def __init__(self, probe_set_size: int | None = None, duration: int = 20 * US, warmup: int = 4 * US,
                 threshold_factor: float = 1.05, confirmations: int = 2, max_bit: int = 35,
                 seed: int = 0, src: str = "receiver"):
        self.probe_set_size = probe_set_size
        self.duration = duration
        self.warmup = warmup
        self.threshold_factor = threshold_factor
        self.confirmations = confirmations
        self.max_bit = max_bit
        self.seed = seed
        self.src = src

    def fit(self, fabric: Fabric, region: MemoryRegion):
        kw = dict(duration=self.duration, warmup=self.warmup,
                  threshold_factor=self.threshold_factor,
                  confirmations=self.confirmations, max_bit=self.max_bit)
        if self.probe_set_size is not None:
            kw["probe_set_size"] = self.probe_set_size
        cfg = DiscoveryConfig.for_fabric(fabric, **kw)
        self.result_ = discover_bank_span(fabric, region, cfg, self.seed, self.src)
        self.converged_ = self.result_.converged
        self.x_bit_ = self.result_.x_bit
        self.span_ = self.result_.fixed_span
        return self

    def predict(self, region: MemoryRegion, count: int) -> list[int]:
        """Same-bank addresses in ``region`` under the learned span."""
        if not getattr(self, "converged_", False):
            raise DiscoveryError("discovery did not converge; no bank span to use")
        return pick_bank_addresses(region, self.span_, count)
