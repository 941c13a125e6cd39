"""Scenario runner: wires fabric, discovery and codec into end-to-end experiments."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import presets as P
from ..channel import (ChannelConfig, DecodeState, Frame, LatencyTrace, Receiver, Sender,
                       adapt_burst, calibrate_baseline, channel_metrics, decode_frames,
                       latency_gap, lock_preamble, noise_estimate)
from ..discovery import DiscoveryConfig, DiscoveryResult, discover_bank_span, pick_bank_addresses
from ..memsys import InterleavingScheme, local_latency_percentiles
from ..rdmanet import ConfigError, Fabric, NoiseProfile, scheme_for_preset
from ..simkernel import MS, NS, US, rng_stream

SCENARIOS = ("isolation", "local_load", "network_load", "cloud", "stealth", "discovery", "mitigation")
PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.99)

# named noise profiles
NETWORK_LOAD_BPS = 40e9
LOCAL_LOAD_RANGE = (2e9, 8e9)

CALIBRATION_SAMPLES = 1000
RECEIVER_ADDRESSES = 64
SENDER_PAGES = 256
RECEIVER_PAGES = 16


@dataclass(frozen=True)
class Scenario:
    name: str = "isolation"
    preset: str = "private"
    bursts: tuple[int, ...] = (32,)
    noise: NoiseProfile = NoiseProfile()
    seed: int = 0
    repetitions: int = 10            # frames per transmission
    span: tuple[int, int] | None = None
    link_gbps: float | None = None
    probe_interval: int = 500 * NS
    payload_bits: int | None = None
    key: int | None = None           # cryptographic interleaving key (mitigation)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(f"scenario: unknown name {self.name!r}; expected one of {SCENARIOS}")
        if self.preset not in P.PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r}")
        if self.name == "cloud" and self.preset != "cloud":
            object.__setattr__(self, "preset", "cloud")
        if not self.bursts or any(b <= 0 for b in self.bursts):
            raise ConfigError("bursts: need at least one positive burst size")
        if self.repetitions < 1:
            raise ConfigError("repetitions: must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed: must be a 64-bit unsigned integer")
        link = (self.link_gbps or P.get_preset(self.preset).link_gbps) * 1e9
        try:
            self.noise.validate(link)
        except ConfigError as exc:
            raise ConfigError(f"noise: {exc}") from None

    @classmethod
    def named(cls, name: str, **kw) -> "Scenario":
        """The canonical noise setting for each experiment name."""
        noise = kw.pop("noise", None)
        if noise is None:
            if name == "network_load":
                noise = NoiseProfile(network_load=NETWORK_LOAD_BPS)
            elif name == "local_load":
                noise = NoiseProfile(local_load=LOCAL_LOAD_RANGE)
            else:
                noise = NoiseProfile()
        if name == "cloud":
            kw["preset"] = "cloud"
        return cls(name=name, noise=noise, **kw)

    def channel_config(self, burst: int) -> ChannelConfig:
        preset = P.get_preset(self.preset)
        return ChannelConfig.for_preset(
            burst, self.preset, probe_interval=self.probe_interval,
            payload_bits=self.payload_bits or preset.payload_bits)

    @property
    def interleaving_key(self) -> int | None:
        if self.key is not None:
            return self.key
        if self.name == "mitigation":
            return int(rng_stream(self.seed, "mitigation:key").integers(1, 2 ** 63))
        return None

    def make_fabric(self, seed_offset: int = 0, noise: NoiseProfile | None = None,
                    record: bool = False) -> Fabric:
        scheme = scheme_for_preset(self.preset)
        key = self.interleaving_key
        if key is not None:
            scheme = InterleavingScheme.cryptographic(scheme, key)
        return Fabric(self.preset, seed=(self.seed + seed_offset) % 2 ** 64, scheme=scheme,
                      noise=noise if noise is not None else self.noise,
                      link_gbps=self.link_gbps, record=record)


@dataclass
class ChannelRun:
    burst: int
    config: ChannelConfig
    frames: list[Frame]
    calibration: LatencyTrace
    trace: LatencyTrace
    baseline: int
    locked: bool
    phase: int
    period: int
    decoded: np.ndarray
    capacity: float
    accuracy: float
    latency_gap: int | None
    channel_traffic: float          # bytes/s of sender-origin memory traffic
    elapsed: int
    sender_start: int
    noise_estimate: int

    def summary(self) -> dict:
        return {**self._metrics(), **{"frame_stats": per_frame_stats(self)}}

    def _metrics(self) -> dict:
        return {
            "burst": self.burst,
            "period_ns": self.config.period / NS,
            "locked": self.locked,
            "phase_ns": self.phase / NS,
            "inferred_period_ns": self.period / NS,
            "baseline_ns": self.baseline / NS,
            "capacity_kbps": self.capacity / 1e3,
            "accuracy": self.accuracy,
            "latency_gap_ns": None if self.latency_gap is None else self.latency_gap / NS,
            "channel_traffic_gbps": self.channel_traffic / 1e9,
            "elapsed_ns": self.elapsed / NS,
            "noise_estimate_ns": self.noise_estimate / NS,
        }


def decode_run(calibration: LatencyTrace, trace: LatencyTrace, cfg: ChannelConfig,
               frames: Sequence[Frame]) -> dict:
    """Everything the receiver derives from its two traces; pure, so it reruns offline."""
    state = DecodeState()
    state.recalibrate(calibration, cfg.baseline_percentile)
    locked, phase, period = lock_preamble(trace, cfg, state)
    decoded = decode_frames(trace, cfg, state, n_frames=len(frames))
    elapsed = len(frames) * cfg.frame_bits * cfg.period
    capacity, accuracy = channel_metrics(frames, decoded, elapsed, locked)
    sent_bits = np.concatenate([np.asarray(f.bits) for f in frames])
    try:
        gap = latency_gap(trace, sent_bits, phase, period)
    except Exception:
        gap = None
    return dict(baseline=state.unloaded_latency, locked=locked, phase=phase, period=period,
                decoded=decoded, capacity=capacity, accuracy=accuracy, latency_gap=gap,
                elapsed=elapsed, noise_estimate=noise_estimate(calibration))


def _span(s: Scenario) -> tuple[int, int]:
    return s.span or (6, P.get_preset(s.preset).high_bit)


def run_channel(s: Scenario, burst: int, frames: Sequence[Frame] | None = None,
                all_ones: bool = False, local_probes: bool = False,
                channel_on: bool = True, fabric: Fabric | None = None) -> tuple[ChannelRun, Fabric]:
    """One calibration phase then ``repetitions`` frames back to back."""
    cfg = s.channel_config(burst)
    fab = fabric or s.make_fabric()
    cfg.check_drain(fab.memory.service_time)
    if local_probes:
        fab.start_local_probes()
    span = _span(s)
    sender_region = fab.add_region("sender", SENDER_PAGES)
    receiver_region = fab.add_region("receiver", RECEIVER_PAGES)
    sender_addrs = pick_bank_addresses(sender_region, span, max(burst, RECEIVER_ADDRESSES))
    receiver_addrs = pick_bank_addresses(receiver_region, span, RECEIVER_ADDRESSES)
    rng = rng_stream(s.seed, f"payload:{burst}")
    if frames is None:
        if all_ones:
            frames = [Frame(cfg.preamble, (1,) * cfg.payload_bits)] * s.repetitions
        else:
            frames = [Frame.random(rng, cfg.payload_bits, cfg.preamble) for _ in range(s.repetitions)]
    frames = list(frames)
    sender = Sender(fab, sender_region, sender_addrs, cfg)
    receiver = Receiver(fab, receiver_region, receiver_addrs, cfg.probe_interval)
    t_cal = fab.now + 10 * US
    t_tx = t_cal + CALIBRATION_SAMPLES * cfg.probe_interval
    offset = int(rng_stream(s.seed, f"sender_offset:{burst}").integers(0, cfg.period))
    t_start = t_tx + offset
    t_end = t_start + len(frames) * cfg.frame_time
    if channel_on:
        sender.send_frames(frames, t_start)
    receiver.probe(t_cal, t_end + cfg.period)
    fab.run_until(t_end + cfg.period + 50 * US)
    calibration = receiver.trace(t_cal, t_tx)
    trace = receiver.trace(t_tx, t_end + cfg.period)
    traffic = fab.memory.measured_bandwidth(t_start, t_end, ["channel_sender"])
    d = decode_run(calibration, trace, cfg, frames)
    run = ChannelRun(burst=burst, config=cfg, frames=frames, calibration=calibration, trace=trace,
                     channel_traffic=traffic, sender_start=t_start, **d)
    return run, fab


@dataclass
class RunReport:
    scenario: Scenario
    runs: list[ChannelRun] = field(default_factory=list)
    discovery: DiscoveryResult | None = None
    stealth: dict | None = None
    repetition_stats: dict = field(default_factory=dict)

    @property
    def primary(self) -> ChannelRun | None:
        return self.runs[0] if self.runs else None

    @property
    def capacity(self) -> float:
        return self.primary.capacity if self.primary else 0.0

    @property
    def accuracy(self) -> float:
        return self.primary.accuracy if self.primary else 0.0

    @property
    def latency_gap(self) -> int | None:
        return self.primary.latency_gap if self.primary else None

    def sweep_table(self) -> list[dict]:
        return [r.summary() for r in sorted(self.runs, key=lambda r: r.burst)]


def run_discovery(s: Scenario, src: str = "receiver") -> DiscoveryResult:
    """Bank-span discovery on a quiet fabric of the scenario's preset."""
    fab = s.make_fabric(seed_offset=1, noise=NoiseProfile())
    region = fab.add_region(src, SENDER_PAGES)
    result = discover_bank_span(fab, region, DiscoveryConfig.for_fabric(fab), seed=s.seed, src=src)
    # ground-truth oracle, invisible to the agent: how many banks each probe set touched
    for it in result.iterations:
        banks = {fab.scheme.route(region.virt_to_phys(a)) for a in it.addresses}
        it.bank_coverage = len(banks) / fab.memory.bank_count
    return result


def run_scenario(s: Scenario, discover: bool | None = None) -> RunReport:
    report = RunReport(scenario=s)
    if discover is None:
        discover = s.span is None and s.name in ("discovery", "mitigation")
    if discover or s.name in ("discovery", "mitigation"):
        report.discovery = run_discovery(s)
        if s.name in ("discovery", "mitigation"):
            return report
        if report.discovery.converged:
            s = replace(s, span=report.discovery.fixed_span)
    if s.name == "stealth":
        report.stealth = stealth_report(s)
        return report
    for burst in s.bursts:
        run, _ = run_channel(s, burst)
        report.runs.append(run)
    return report


def per_frame_stats(run: ChannelRun) -> dict:
    """Mean and standard deviation of per-frame accuracy and capacity."""
    cfg = run.config
    accs = []
    for j, frame in enumerate(run.frames):
        got = run.decoded[j][len(frame.preamble):]
        accs.append(float(np.mean(got == np.asarray(frame.payload))))
    accs = np.asarray(accs)
    caps = accs * cfg.payload_bits / (cfg.frame_time / 1e12) if run.locked else np.zeros_like(accs)
    return {"accuracy_mean": float(accs.mean()), "accuracy_std": float(accs.std()),
            "capacity_mean": float(caps.mean()), "capacity_std": float(caps.std())}


def stealth_report(s: Scenario, bursts: Sequence[int] = P.BURST_SIZES,
                   duration: int = 20 * MS) -> dict:
    """Channel memory traffic and local-probe latency percentiles, channel off vs on.

    The sender transmits all ones so the bank sees its maximum channel load.
    """
    def probe_percentiles(burst: int | None) -> tuple[list[int], float]:
        fab = s.make_fabric(seed_offset=7)
        fab.start_local_probes()
        if burst is None:
            fab.run_until(duration)
            fab.memory.flush(duration)
            t, lat = fab.memory.local_probe_trace()
            lat = lat[t < duration]
            return local_latency_percentiles(lat, PERCENTILES), 0.0
        cfg = s.channel_config(burst)
        region = fab.add_region("sender", SENDER_PAGES)
        addrs = pick_bank_addresses(region, _span(s), max(burst, RECEIVER_ADDRESSES))
        sender = Sender(fab, region, addrs, cfg)
        n_frames = max(1, math.ceil(duration / cfg.frame_time))
        ones = Frame((1,) * len(cfg.preamble), (1,) * cfg.payload_bits)
        end = sender.send_frames([ones] * n_frames, 0)
        fab.run_until(end + 100 * US)
        fab.memory.flush(end)
        t, lat = fab.memory.local_probe_trace()
        lat = lat[t < end]
        traffic = fab.memory.measured_bandwidth(0, end, ["channel_sender"])
        return local_latency_percentiles(lat, PERCENTILES), traffic

    idle, _ = probe_percentiles(None)
    rows = []
    for b in bursts:
        pct, traffic = probe_percentiles(b)
        rows.append({
            "burst": b,
            "channel_traffic_gbps": traffic / 1e9,
            "percentiles_ns": [v / NS for v in pct],
            "inflation": [(v - i) / i for v, i in zip(pct, idle)],
        })
    peak = s.make_fabric().memory.per_bank_peak
    return {"percentiles": list(PERCENTILES), "idle_ns": [v / NS for v in idle], "bursts": rows,
            "per_bank_peak_gbps": peak / 1e9}
