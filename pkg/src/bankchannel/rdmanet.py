"""RDMA fabric: NICs, links and a switch in front of the intermediary's memory.

A one-sided read travels

    requester NIC -> uplink -> switch -> port to intermediary -> DMA
    -> memory banks -> DMA -> intermediary uplink -> switch -> port to requester
    -> requester NIC

Every link direction is a FIFO that serializes packets at the link rate. The
intermediary's uplink also carries responses to the background loader, which
is where network load turns into round-trip inflation. The loader's own memory
footprint is folded into the banks as lazy background traffic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import presets as P
from .memsys import (BLOCK, BackgroundStream, InterleavingScheme, LocalProbeStream,
                     MemoryController, MemRequest, staggered_functions)
from .simkernel import NS, SEC, Simulator, rng_stream

KB4 = 1 << 12
MB2 = 1 << 21
GB1 = 1 << 30
PAGE_SIZES = (KB4, MB2, GB1)
PHYS_BITS = 42
NODES = ("sender", "receiver", "intermediary")


class ProtectionFault(Exception):
    """Access outside a registered memory region."""


class ConfigError(ValueError):
    """Invalid fabric or noise configuration."""


@dataclass(frozen=True)
class LinkModel:
    bandwidth: float              # bits/s
    propagation: int = 50 * NS
    switch_latency: int = 200 * NS

    def serialization(self, nbytes: int) -> int:
        return math.ceil(nbytes * 8 * SEC / self.bandwidth)


@dataclass(frozen=True)
class NoiseProfile:
    network_load: float = 0.0                       # bits/s of loader responses
    local_load: tuple[float, float] = (0.0, 0.0)    # aggregate bytes/s range
    rtt_jitter: P.JitterModel | None = None         # overrides the preset jitter

    def validate(self, link_bps: float) -> None:
        if self.network_load < 0:
            raise ConfigError("network_load must be non-negative")
        if self.network_load > link_bps:
            raise ConfigError(f"network_load {self.network_load / 1e9:g} Gb/s exceeds "
                              f"link bandwidth {link_bps / 1e9:g} Gb/s")
        lo, hi = self.local_load
        if lo < 0 or hi < lo:
            raise ConfigError("local_load must be a range [lo, hi] with 0 <= lo <= hi")


@dataclass
class MemoryRegion:
    owner: str
    base_virt: int
    size: int
    page_size: int
    frames: np.ndarray        # physical frame number per page

    def __post_init__(self):
        if self.page_size not in PAGE_SIZES:
            raise ConfigError(f"unsupported page size {self.page_size}")
        if self.base_virt % self.page_size or self.size % self.page_size:
            raise ConfigError("region base and size must be page aligned")

    @property
    def pages(self) -> int:
        return self.size // self.page_size

    @property
    def page_bits(self) -> int:
        return self.page_size.bit_length() - 1

    def contains(self, virt_addr: int, length: int = 1) -> bool:
        return self.base_virt <= virt_addr and virt_addr + length <= self.base_virt + self.size

    def virt_to_phys(self, virt_addr: int) -> int:
        if not self.contains(virt_addr):
            raise ProtectionFault(f"{virt_addr:#x} outside region of {self.owner}")
        page, offset = divmod(virt_addr - self.base_virt, self.page_size)
        return int(self.frames[page]) * self.page_size + offset


def virt_to_phys(region: MemoryRegion, virt_addr: int) -> int:
    return region.virt_to_phys(virt_addr)


@dataclass(eq=False)
class RdmaRead:
    id: int
    src: str
    virt_addr: int
    length: int
    issue_time: int
    phys_addr: int | None = None
    complete_time: int | None = None
    faulted: bool = False
    jitter: int = 0
    _remaining: int = 0
    _last_block: int = 0
    _callback: Callable | None = field(default=None, repr=False)

    @property
    def rtt(self) -> int | None:
        if self.complete_time is None:
            return None
        return self.complete_time - self.issue_time


class _LazyLoadedFifo:
    """A link direction whose background packets arrive as a Poisson stream.

    Foreground packets must be served in non-decreasing arrival order; each
    one first folds in every background packet that arrived before it.
    """

    chunk = 50 * 1_000_000

    def __init__(self, rate_per_s: float, service: int, rng: np.random.Generator):
        self.rate_per_ps = rate_per_s / SEC
        self.service = service
        self.rng = rng
        self.busy_until = 0
        self.background_served = 0
        self._gen_until = 0
        self._pending = np.empty(0, dtype=np.int64)

    def _absorb(self, upto: int) -> None:
        if self.rate_per_ps <= 0:
            return
        while self._gen_until <= upto:
            n = int(self.rng.poisson(self.rate_per_ps * self.chunk))
            arr = np.sort(self.rng.integers(self._gen_until, self._gen_until + self.chunk,
                                            size=n, dtype=np.int64))
            self._pending = np.concatenate([self._pending, arr])
            self._gen_until += self.chunk
        cut = int(np.searchsorted(self._pending, upto, side="left"))
        if not cut:
            return
        times, self._pending = self._pending[:cut], self._pending[cut:]
        s = self.service
        idx = np.arange(cut, dtype=np.int64)
        lead = np.maximum(np.maximum.accumulate(times - idx * s), self.busy_until)
        self.busy_until = int(lead[-1] + cut * s)
        self.background_served += cut

    def serve(self, arrival: int, duration: int) -> int:
        self._absorb(arrival)
        start = arrival if arrival > self.busy_until else self.busy_until
        self.busy_until = start + duration
        return self.busy_until


def scheme_for_preset(name: str) -> InterleavingScheme:
    """Synthetic XOR scheme with 128 banks whose input bits cover exactly [6, high]."""
    preset = P.get_preset(name)
    return InterleavingScheme("xor_linear", staggered_functions(preset.high_bit))


class Fabric:
    """Star topology around one switch; the intermediary hosts all regions."""

    def __init__(self, preset: str | P.PathPreset = "private", seed: int = 0,
                 scheme: InterleavingScheme | None = None, noise: NoiseProfile | None = None,
                 link_gbps: float | None = None, sim: Simulator | None = None,
                 record: bool = False, keep_reads: bool = False):
        self.preset = P.get_preset(preset) if isinstance(preset, str) else preset
        if link_gbps is not None:
            if link_gbps <= 0:
                raise ConfigError("link_gbps must be positive")
            self.preset = replace(self.preset, link_gbps=float(link_gbps))
        self.seed = int(seed)
        self.sim = sim or Simulator(record=record)
        self.scheme = scheme or scheme_for_preset(self.preset.name)
        self.memory = MemoryController(self.sim, self.scheme,
                                       io_queue_limit=self.preset.io_queue_limit,
                                       record=record)
        self.link = LinkModel(self.preset.link_gbps * 1e9, self.preset.propagation,
                              self.preset.switch_latency)
        self.noise = NoiseProfile()
        self.jitter = self.preset.jitter
        self._load_jitter: P.JitterModel | None = None
        self._req_ser = self.link.serialization(self.preset.request_bytes)
        self._uplink: dict[str, int] = {}
        self._downlink: dict[str, int] = {}
        self._ingress_busy = 0
        self._egress = _LazyLoadedFifo(0.0, 1, rng_stream(self.seed, "network_load:egress"))
        self._rngs: dict[str, np.random.Generator] = {}
        self._next_id = 0
        self._chunks_used: set[int] = set()
        self._next_virt = 1 << 40
        self._frame_rng = rng_stream(self.seed, "frames")
        self.issued = 0
        self.faulted = 0
        self.completed = 0
        self.keep_reads = keep_reads
        self.reads: list[RdmaRead] = []
        if noise is not None:
            self.apply_noise(noise)

    # ------------------------------------------------------------------ setup

    @property
    def now(self) -> int:
        return self.sim.now

    def add_region(self, owner: str, pages: int, page_size: int = GB1,
                   base_virt: int | None = None) -> MemoryRegion:
        """Register a region backed by randomly placed physical frames.

        Each region claims whole 1GB chunks of physical memory for itself, so
        regions never share physical memory whatever their page size.
        """
        if pages <= 0:
            raise ConfigError("region needs at least one page")
        if page_size not in PAGE_SIZES:
            raise ConfigError(f"unsupported page size {page_size}")
        per_chunk = GB1 // page_size
        need = -(-pages // per_chunk)
        n_chunks = 1 << (PHYS_BITS - 30)
        chunks: list[int] = []
        while len(chunks) < need:
            c = int(self._frame_rng.integers(1, n_chunks))
            if c not in self._chunks_used:
                self._chunks_used.add(c)
                chunks.append(c)
        slots = self._frame_rng.permutation(need * per_chunk)[:pages]
        frames = np.asarray([chunks[s // per_chunk] * per_chunk + s % per_chunk for s in slots],
                            dtype=np.int64)
        if base_virt is None:
            base_virt = self._next_virt
            self._next_virt += (-(-pages * page_size // GB1) + 1) * GB1
        base_virt -= base_virt % page_size
        return MemoryRegion(owner, base_virt, pages * page_size, page_size, frames)

    def apply_noise(self, noise: NoiseProfile) -> None:
        noise.validate(self.link.bandwidth)
        self.noise = noise
        if noise.rtt_jitter is not None:
            self.jitter = noise.rtt_jitter
        if noise.network_load > 0:
            self.start_network_load(noise)
        if noise.local_load[1] > 0:
            self.start_local_load(noise)

    def start_network_load(self, profile: NoiseProfile, message: int = P.LOADER_MESSAGE,
                           jitter: P.JitterModel | None = P.LOADER_JITTER) -> None:
        profile.validate(self.link.bandwidth)
        if profile.network_load <= 0:
            return
        rate = profile.network_load / (8 * message)
        service = self.link.serialization(message + self.preset.response_header)
        self._egress = _LazyLoadedFifo(rate, service, rng_stream(self.seed, "network_load:egress"))
        self._load_jitter = jitter
        self.memory.add_stream(BackgroundStream(
            "network_load", self.seed, "network_load", self.memory.bank_count,
            profile.network_load / 8, start=self.sim.now))

    def start_local_load(self, profile: NoiseProfile,
                         generators: int = P.LOCAL_LOAD_GENERATORS,
                         step: int = P.LOCAL_LOAD_STEP) -> None:
        profile.validate(self.link.bandwidth)
        lo, hi = profile.local_load
        if hi <= 0:
            return
        rate = _SteppedRate(self.seed, generators, lo / generators, hi / generators, step,
                            start=self.sim.now)
        self.memory.add_stream(BackgroundStream(
            "local_load", self.seed, "local_load", self.memory.bank_count, hi,
            rate_fn=rate, start=self.sim.now))

    def start_local_probes(self, rate: float = P.LOCAL_PROBE_RATE,
                           base_latency: int = P.LOCAL_PROBE_BASE,
                           stall_prob: float = P.LOCAL_STALL_PROB,
                           stall_max: int = P.LOCAL_STALL_MAX) -> None:
        self.memory.add_stream(LocalProbeStream(self.seed, self.memory.bank_count, rate,
                                                base_latency, stall_prob, stall_max,
                                                start=self.sim.now))

    # ------------------------------------------------------------------ reads

    def _rng(self, name: str) -> np.random.Generator:
        rng = self._rngs.get(name)
        if rng is None:
            rng = self._rngs[name] = rng_stream(self.seed, name)
        return rng

    def _draw_jitter(self, src: str) -> int:
        total = 0
        for model, name in ((self.jitter, f"rtt_jitter:{src}"),
                            (self.preset.spikes, f"rtt_spikes:{src}"),
                            (self._load_jitter, f"load_jitter:{src}")):
            if model is None or not model.enabled:
                continue
            rng = self._rng(name)
            u, z = rng.random(), rng.standard_normal()
            if u < model.prob:
                total += int(model.median * math.exp(model.sigma * z))
        return total

    def issue_read(self, src: str, region: MemoryRegion, virt_addr: int, length: int = BLOCK,
                   on_complete: Callable[[RdmaRead], None] | None = None) -> RdmaRead:
        """Issue a one-sided read at the current simulation time."""
        now = self.sim.now
        read = RdmaRead(self._next_id, src, virt_addr, length, now, _callback=on_complete)
        self._next_id += 1
        self.issued += 1
        if self.keep_reads:
            self.reads.append(read)
        if length <= 0 or length % BLOCK or virt_addr % BLOCK or not region.contains(virt_addr, length):
            read.faulted = True
            self.faulted += 1
            return read
        read.phys_addr = region.virt_to_phys(virt_addr)
        read.jitter = self._draw_jitter(src)
        pre = self.preset
        t = now + pre.nic_tx
        start = max(t, self._uplink.get(src, 0))
        done = start + self._req_ser
        self._uplink[src] = done
        arrive = done + pre.propagation + pre.switch_latency + pre.core_latency
        self.sim.schedule(arrive, self._at_switch, read, region, kind="request-arrival")
        return read

    def _at_switch(self, read: RdmaRead, region: MemoryRegion) -> None:
        pre = self.preset
        start = max(self.sim.now, self._ingress_busy)
        self._ingress_busy = start + self._req_ser
        arrival = self._ingress_busy + pre.propagation + pre.dma_overhead
        blocks = read.length // BLOCK
        read._remaining = blocks
        origin = "channel_sender" if read.src == "sender" else (
            "channel_receiver" if read.src == "receiver" else "network_load")
        for b in range(blocks):
            phys = read.phys_addr + b * BLOCK if b == 0 else region.virt_to_phys(read.virt_addr + b * BLOCK)
            self.memory.submit(MemRequest(phys, read.issue_time, origin),
                               on_scheduled=lambda done, r=read: self._block_done(r, done),
                               arrival=arrival)

    def _block_done(self, read: RdmaRead, done: int) -> None:
        read._remaining -= 1
        read._last_block = max(read._last_block, done)
        if read._remaining == 0:
            self.sim.schedule(max(read._last_block + self.preset.dma_overhead, self.sim.now),
                              self._at_egress, read, kind="service-complete")

    def _at_egress(self, read: RdmaRead) -> None:
        pre = self.preset
        ser = self.link.serialization(read.length + pre.response_header)
        out = self._egress.serve(self.sim.now, ser)
        t = out + pre.propagation + pre.switch_latency + pre.core_latency
        start = max(t, self._downlink.get(read.src, 0))
        done = start + ser
        self._downlink[read.src] = done
        read.complete_time = done + pre.propagation + pre.nic_rx + read.jitter
        self.completed += 1
        if read._callback is not None:
            self.sim.schedule(read.complete_time, read._callback, read, kind="measurement")

    # ------------------------------------------------------------------ driving

    def run_until(self, deadline: int) -> int:
        return self.sim.run_until(deadline)

    def idle_rtt(self) -> int:
        """Round trip of a 64B read on an idle fabric, without jitter."""
        pre = self.preset
        resp = self.link.serialization(BLOCK + pre.response_header)
        one_way = pre.propagation * 2 + pre.switch_latency + pre.core_latency
        return (pre.nic_tx + 2 * self._req_ser + one_way + pre.dma_overhead + self.scheme.route_latency
                + self.memory.service_time + pre.dma_overhead + 2 * resp + one_way + pre.nic_rx)


class _SteppedRate:
    """Sum of generator rates, each redrawn uniformly in [lo, hi] every ``step``."""

    def __init__(self, seed: int, generators: int, lo: float, hi: float, step: int, start: int = 0):
        self.rngs = [rng_stream(seed, f"local_load:gen{g}") for g in range(generators)]
        self.lo, self.hi, self.step, self.start = lo, hi, step, start
        self.levels = np.empty(0)

    def _extend(self, n: int) -> None:
        have = len(self.levels)
        if n <= have:
            return
        extra = np.sum([rng.uniform(self.lo, self.hi, size=n - have) for rng in self.rngs], axis=0)
        self.levels = np.concatenate([self.levels, extra])

    def __call__(self, times: np.ndarray) -> np.ndarray:
        idx = (np.asarray(times) - self.start) // self.step
        self._extend(int(idx.max()) + 1 if len(idx) else 0)
        return self.levels[idx]

