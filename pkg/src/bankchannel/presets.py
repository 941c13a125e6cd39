"""Calibration constants for the two simulated clusters.

Everything here is a knob, not a measurement. Sending periods are pinned by
the per-burst channel memory-traffic table (period = 64 * burst / traffic);
path delays are sized so an idle 64B read takes about 1.8us on the private
cluster; jitter terms are fitted so the codec reproduces the reported decode
accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .simkernel import NS, SEC, US

BURST_SIZES = (16, 32, 64, 128, 256, 512, 1024)

# channel memory traffic (GB/s) for all-ones transmission, per burst size
TRAFFIC_GBPS = {16: 0.18, 32: 0.31, 64: 0.48, 128: 0.67, 256: 0.82, 512: 0.97, 1024: 1.04}


def traffic_period(burst: int) -> int:
    """Sending period (ps) implied by the memory-traffic table."""
    return round(64 * burst * SEC / (TRAFFIC_GBPS[burst] * 1e9))


@dataclass(frozen=True)
class JitterModel:
    """Lognormal extra delay added to each round trip.

    ``median`` and ``sigma`` parameterize the lognormal; ``prob`` is the
    fraction of round trips that receive it at all.
    """

    median: int = 0
    sigma: float = 0.0
    prob: float = 1.0

    @property
    def enabled(self) -> bool:
        return self.median > 0 and self.prob > 0


@dataclass(frozen=True)
class PathPreset:
    name: str
    link_gbps: float
    high_bit: int
    payload_bits: int
    nic_tx: int = 250 * NS
    nic_rx: int = 250 * NS
    propagation: int = 50 * NS
    switch_latency: int = 200 * NS
    core_latency: int = 0          # extra one-way delay through the core switch
    dma_overhead: int = 300 * NS
    request_bytes: int = 70        # read request on the wire
    response_header: int = 30      # bytes of header added to each response
    io_queue_limit: int = 48       # per-bank I/O admission cap at the memory controller
    jitter: JitterModel = JitterModel()
    spikes: JitterModel = JitterModel()   # rare large delays on top of ``jitter``
    period_extra: int = 0          # added to the traffic-table period


# Isolation jitter: a light lognormal tail on every read.
ISOLATION_JITTER = JitterModel(median=112 * NS, sigma=0.6)

PRIVATE = PathPreset(name="private", link_gbps=56.0, high_bit=26, payload_bits=200,
                     jitter=ISOLATION_JITTER)

# The cloud cluster has one more switch hop each way and a slower link. Its
# ambient jitter sits between the private cluster in isolation and the
# private cluster under 70% network load.
CLOUD = PathPreset(name="cloud", link_gbps=50.0, high_bit=27, payload_bits=100,
                   core_latency=900 * NS,
                   jitter=JitterModel(median=85 * NS, sigma=0.55),
                   spikes=JitterModel(median=600 * NS, sigma=0.5, prob=0.02),
                   period_extra=1800 * NS)

PRESETS = {"private": PRIVATE, "cloud": CLOUD}


def get_preset(name: str, **overrides) -> PathPreset:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def default_period(burst: int, preset: str | PathPreset = "private") -> int:
    p = get_preset(preset) if isinstance(preset, str) else preset
    return traffic_period(burst) + p.period_extra


# Background network load: loader reads of LOADER_MESSAGE bytes whose responses
# share the intermediary's egress link with channel responses.
LOADER_MESSAGE = 1400
LOADER_JITTER = JitterModel(median=200 * NS, sigma=0.9, prob=0.05)

# Local memory-latency microbenchmark on the intermediary.
LOCAL_PROBE_RATE = 40e6        # samples per second, aggregate
LOCAL_PROBE_BASE = 60 * NS     # core + uncore latency outside the bank
LOCAL_STALL_PROB = 0.005
LOCAL_STALL_MAX = 500 * NS

# Local load: 16 generators whose individual rates step every LOCAL_LOAD_STEP.
LOCAL_LOAD_GENERATORS = 16
LOCAL_LOAD_STEP = 200 * US
