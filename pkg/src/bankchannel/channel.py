"""Covert-channel codec.

The sender encodes a 1 as a burst of same-bank reads at the start of a bit
period and a 0 as silence. The receiver probes its own same-bank addresses at
a fixed interval, takes the 95th percentile of a silent calibration trace as
the unloaded latency, and decodes each bit period by comparing the mean of its
middle-50% probes (by time) against that baseline.

Everything below the agents is pure over traces, so the decoder can run on an
exported CSV just as well as on a live simulation.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import presets as P
from .memsys import nearest_rank
from .simkernel import NS, SEC

PREAMBLE = tuple([1, 0] * 16)
ERASURE = -1


class DecodeError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration and framing


@dataclass(frozen=True)
class ChannelConfig:
    burst_size: int = 32
    period: int = 0                         # 0 picks the calibrated period for burst_size
    probe_interval: int = 500 * NS
    preamble: tuple[int, ...] = PREAMBLE
    payload_bits: int = 200
    baseline_percentile: float = 95.0
    recalibration_interval: int | None = None
    margin: int = 0                         # added to the baseline before thresholding
    guard: int = 1000 * NS

    def __post_init__(self):
        if self.burst_size <= 0:
            raise ValueError("burst_size must be positive")
        if self.period == 0:
            if self.burst_size not in P.TRAFFIC_GBPS:
                raise ValueError(f"no calibrated period for burst {self.burst_size}; give one")
            object.__setattr__(self, "period", P.traffic_period(self.burst_size))
        if any(b not in (0, 1) for b in self.preamble):
            raise ValueError("preamble must be a bit sequence")
        object.__setattr__(self, "preamble", tuple(int(b) for b in self.preamble))
        if self.payload_bits <= 0:
            raise ValueError("payload_bits must be positive")
        if self.probe_interval <= 0 or self.probe_interval * 4 > self.period:
            raise ValueError("probe_interval must be positive and at most period/4")

    @classmethod
    def for_preset(cls, burst_size: int, preset: str = "private", **kw) -> "ChannelConfig":
        p = P.get_preset(preset)
        kw.setdefault("payload_bits", p.payload_bits)
        kw.setdefault("period", P.default_period(burst_size, p))
        return cls(burst_size=burst_size, **kw)

    @property
    def frame_bits(self) -> int:
        return len(self.preamble) + self.payload_bits

    @property
    def frame_time(self) -> int:
        return self.frame_bits * self.period

    def check_drain(self, service_time: int) -> None:
        """Period must leave room for the burst to drain plus a guard."""
        need = self.burst_size * service_time + self.guard
        if self.period < need:
            raise ValueError(f"period {self.period / NS:.0f}ns shorter than drain+guard "
                             f"{need / NS:.0f}ns for burst {self.burst_size}")


@dataclass(frozen=True)
class Frame:
    preamble: tuple[int, ...]
    payload: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "preamble", tuple(int(b) for b in self.preamble))
        object.__setattr__(self, "payload", tuple(int(b) for b in self.payload))
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("frame bits must be 0 or 1")

    @property
    def bits(self) -> tuple[int, ...]:
        return self.preamble + self.payload

    @classmethod
    def random(cls, rng: np.random.Generator, payload_bits: int,
               preamble: Sequence[int] = PREAMBLE) -> "Frame":
        return cls(tuple(preamble), tuple(int(b) for b in rng.integers(0, 2, payload_bits)))

    def to_hex(self) -> str:
        """Frame bits MSB-first as hex, with ``/nbits`` appended when not a multiple of 4."""
        bits = self.bits
        pad = (-len(bits)) % 4
        value = int("".join(map(str, bits + (0,) * pad)), 2) if bits else 0
        text = f"{value:0{(len(bits) + pad) // 4}x}"
        return text if not pad else f"{text}/{len(bits)}"

    @classmethod
    def from_hex(cls, text: str, preamble_bits: int = len(PREAMBLE)) -> "Frame":
        text = text.strip()
        nbits = None
        if "/" in text:
            text, n = text.split("/")
            nbits = int(n)
        raw = bin(int(text, 16))[2:].zfill(4 * len(text))
        bits = tuple(int(c) for c in raw[: nbits if nbits is not None else len(raw)])
        return cls(bits[:preamble_bits], bits[preamble_bits:])


def write_frames(path: str | Path, frames: Iterable[Frame]) -> None:
    Path(path).write_text("".join(f.to_hex() + "\n" for f in frames))


def read_frames(path: str | Path, preamble_bits: int = len(PREAMBLE)) -> list[Frame]:
    return [Frame.from_hex(line, preamble_bits)
            for line in Path(path).read_text().splitlines() if line.strip()]


# --------------------------------------------------------------------------
# traces


@dataclass
class LatencyTrace:
    issue: np.ndarray     # ps, strictly increasing
    rtt: np.ndarray       # ps, positive

    def __post_init__(self):
        self.issue = np.asarray(self.issue, dtype=np.int64)
        self.rtt = np.asarray(self.rtt, dtype=np.int64)
        if self.issue.shape != self.rtt.shape or self.issue.ndim != 1:
            raise ValueError("issue and rtt must be 1-D arrays of equal length")
        if len(self.issue) > 1 and np.any(np.diff(self.issue) <= 0):
            raise ValueError("issue times must be strictly increasing")
        if np.any(self.rtt <= 0):
            raise ValueError("round-trip times must be positive")

    def __len__(self) -> int:
        return len(self.issue)

    @classmethod
    def from_array(cls, data) -> "LatencyTrace":
        if isinstance(data, LatencyTrace):
            return data
        arr = np.asarray(data)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ValueError("trace array must have shape (n, 2): issue, rtt")
        return cls(arr[:, 0], arr[:, 1])

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.issue, self.rtt])

    def between(self, t0: int, t1: int) -> "LatencyTrace":
        sel = (self.issue >= t0) & (self.issue < t1)
        return LatencyTrace(self.issue[sel], self.rtt[sel])

    def shifted(self, delta: int) -> "LatencyTrace":
        return LatencyTrace(self.issue, self.rtt + delta)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["issue_ns", "rtt_ns"])
            for t, r in zip(self.issue.tolist(), self.rtt.tolist()):
                w.writerow([_ns(t), _ns(r)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LatencyTrace":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([_ps(r["issue_ns"]) for r in rows], [_ps(r["rtt_ns"]) for r in rows])


def _ns(ps: int) -> str:
    sign = "-" if ps < 0 else ""
    q, r = divmod(abs(ps), NS)
    return f"{sign}{q}.{r:03d}"


def _ps(text: str) -> int:
    text = text.strip()
    sign = -1 if text.startswith("-") else 1
    whole, _, frac = text.lstrip("-").partition(".")
    return sign * (int(whole) * NS + int((frac + "000")[:3]))


# --------------------------------------------------------------------------
# decoding primitives


@dataclass
class DecodeState:
    unloaded_latency: int | None = None
    locked: bool = False
    bit_phase: int = 0
    period: int = 0
    decoded_bits: list[int] = field(default_factory=list)

    def recalibrate(self, silent_trace: LatencyTrace, percentile: float = 95.0) -> int:
        self.unloaded_latency = calibrate_baseline(silent_trace, percentile)
        return self.unloaded_latency


def calibrate_baseline(trace: LatencyTrace | Sequence[int], percentile: float = 95.0,
                       min_samples: int = 200) -> int:
    rtt = trace.rtt if isinstance(trace, LatencyTrace) else np.asarray(trace)
    if len(rtt) < min_samples:
        raise DecodeError(f"baseline needs at least {min_samples} silent samples, got {len(rtt)}")
    return nearest_rank(rtt, percentile)


def trimmed_mean(window: Sequence[int]) -> float:
    """Mean of the middle 50% of a time-ordered window (first and last quarter dropped)."""
    n = len(window)
    if n < 4:
        raise DecodeError("window needs at least 4 samples")
    k = n // 4
    return float(np.mean(np.asarray(window, dtype=np.float64)[k:n - k]))


def decode_bit(window: Sequence[int], state: DecodeState | int, margin: int = 0) -> int:
    """1 if the trimmed window mean exceeds the baseline, 0 otherwise, ERASURE if too short."""
    baseline = state if isinstance(state, (int, np.integer)) else state.unloaded_latency
    if baseline is None:
        raise DecodeError("decode state has no baseline; calibrate first")
    if len(window) < 4:
        return ERASURE
    return int(trimmed_mean(window) > baseline + margin)


def window_stats(trace: LatencyTrace, starts: np.ndarray, period: int | np.ndarray) -> np.ndarray:
    """Trimmed mean of each window ``[start, start+period)``; NaN where < 4 samples."""
    starts = np.asarray(starts, dtype=np.int64)
    i0 = np.searchsorted(trace.issue, starts, side="left")
    i1 = np.searchsorted(trace.issue, starts + np.asarray(period, dtype=np.int64), side="left")
    n = i1 - i0
    k = n // 4
    a, b = i0 + k, i1 - k
    cs = np.concatenate([[0.0], np.cumsum(trace.rtt, dtype=np.float64)])
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (cs[b] - cs[a]) / (b - a)
    out[n < 4] = np.nan
    return out


def _bit_starts(t0: np.ndarray, period: np.ndarray, positions: np.ndarray) -> np.ndarray:
    return t0[..., None] + positions * period[..., None]


def _score(trace, t0, period, cfg, baseline, n_frames):
    """Fold preamble windows over ``n_frames`` frames for each candidate (t0, period).

    For each preamble position, count the fraction of frames whose window mean
    exceeds the baseline. A position reads as 1 when its fraction is above the
    average fraction over the whole preamble; a silent or uniformly noisy
    trace therefore cannot line up with the alternating pattern. Returns the
    number of matching positions, the summed signed margin of the fractions,
    and the signed baseline-relative window means as a final tie-breaker.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=np.int64))
    period = np.broadcast_to(np.asarray(period, dtype=np.int64), t0.shape)
    npre = len(cfg.preamble)
    pos = (np.arange(n_frames)[:, None] * cfg.frame_bits + np.arange(npre)[None, :]).ravel()
    starts = _bit_starts(t0, period, pos)
    stats = window_stats(trace, starts.ravel(), np.repeat(period, len(pos)))
    stats = stats.reshape(len(t0), n_frames, npre) - (baseline + cfg.margin)
    valid = ~np.isnan(stats)
    counts = np.maximum(valid.sum(axis=1), 1)
    frac = np.where(valid, stats > 0, False).sum(axis=1) / counts
    rel = frac - frac.mean(axis=1, keepdims=True)
    pre = np.asarray(cfg.preamble)
    sign = 2.0 * pre - 1.0
    matches = ((rel > 0) == pre.astype(bool)).sum(axis=1)
    margin = (rel * sign).sum(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)   # all-NaN columns are expected
        mean_stat = np.nanmean(np.where(valid, stats, np.nan), axis=1)
    soft = np.nansum(mean_stat * sign, axis=1)
    return matches, margin, soft


def _argbest(m, v, s) -> int:
    return int(np.lexsort((-np.nan_to_num(s), -v, -m))[0])


def lock_preamble(trace: LatencyTrace, cfg: ChannelConfig, state: DecodeState,
                  min_match: int = 30, period_span: float = 0.03) -> tuple[bool, int, int]:
    """Find frame start and bit period by correlating against the preamble.

    Preamble windows are thresholded and folded across every frame the trace
    holds, so a clean preamble emerges even when single bits are noisy. The
    phase search runs at the nominal period; the period is then refined within
    ``period_span`` around it.
    Returns ``(locked, bit_phase, period)`` where ``bit_phase`` is the absolute
    start time of the first frame.
    """
    if state.unloaded_latency is None:
        raise DecodeError("calibrate the baseline before locking")
    baseline = state.unloaded_latency
    P0 = cfg.period
    if len(trace) < 8:
        return False, 0, P0
    span = int(trace.issue[-1] - trace.issue[0])
    n_frames = int(span // cfg.frame_time)
    if n_frames < 1:
        return False, 0, P0
    T0 = int(trace.issue[0])
    # coarse: phase over one frame (plus one period of lead-in) at the nominal period
    step = max(P0 // 8, 1)
    cand = T0 - P0 + np.arange(0, max(span - n_frames * cfg.frame_time, 0) + cfg.frame_time + P0, step)
    cand = cand[cand + n_frames * cfg.frame_time <= trace.issue[-1] + P0]
    if not len(cand):
        return False, 0, P0
    with np.errstate(invalid="ignore"):
        m, v, s = _score(trace, cand, P0, cfg, baseline, n_frames)
        k = _argbest(m, v, s)
        t_best, p_best = int(cand[k]), P0
        # fine phase at the nominal period
        fine_step = max(cfg.probe_interval // 4, 1)
        phases = t_best + np.arange(-step, step + 1, fine_step)
        m, v, s = _score(trace, phases, P0, cfg, baseline, n_frames)
        k = _argbest(m, v, s)
        t_best, m_best, v_best = int(phases[k]), int(m[k]), float(v[k])
        # another period must explain strictly more of the preamble than the nominal one
        for rel_step, half in ((1e-3, period_span), (1e-4, 1e-3)):
            rel = np.arange(-half, half + rel_step / 2, rel_step)
            rel = rel[np.abs(rel) > rel_step / 2]
            periods = np.round(p_best * (1.0 + rel)).astype(np.int64)
            pp, tt = np.meshgrid(periods, t_best + np.arange(-step, step + 1, fine_step),
                                 indexing="ij")
            m, v, s = _score(trace, tt.ravel(), pp.ravel(), cfg, baseline, n_frames)
            k = _argbest(m, v, s)
            if (m[k], v[k]) > (m_best, v_best + 1e-9):
                t_best, p_best = int(tt.ravel()[k]), int(pp.ravel()[k])
                m_best, v_best = int(m[k]), float(v[k])
    locked = m_best >= min_match
    state.locked = bool(locked)
    state.bit_phase = t_best
    state.period = p_best
    return bool(locked), t_best, p_best


def decode_frames(trace: LatencyTrace, cfg: ChannelConfig, state: DecodeState,
                  n_frames: int | None = None) -> np.ndarray:
    """Decode back-to-back frames from the locked phase; shape (frames, frame_bits)."""
    if state.unloaded_latency is None:
        raise DecodeError("calibrate the baseline before decoding")
    period = state.period or cfg.period
    if n_frames is None:
        n_frames = max(0, int((int(trace.issue[-1]) - state.bit_phase) // (cfg.frame_bits * period)))
    pos = np.arange(n_frames * cfg.frame_bits)
    starts = state.bit_phase + pos * period
    stats = window_stats(trace, starts, period)
    bits = np.where(np.isnan(stats), ERASURE,
                    (stats > state.unloaded_latency + cfg.margin).astype(np.int64))
    state.decoded_bits = bits.tolist()
    return bits.reshape(n_frames, cfg.frame_bits)


def latency_gap(trace: LatencyTrace, bits: Sequence[int], phase: int, period: int,
                top: int = 2) -> int:
    """Peak latency gap between 1-periods and 0-periods.

    Each bit period is summarized by the mean of its ``top`` highest round
    trips (the peak a plotted signal shows); the gap is the mean peak over
    1-periods minus the mean peak over 0-periods.
    """
    if top < 1:
        raise ValueError("top must be at least 1")
    bits = np.asarray(bits)
    starts = phase + np.arange(len(bits)) * period
    i0 = np.searchsorted(trace.issue, starts, side="left")
    i1 = np.searchsorted(trace.issue, starts + period, side="left")
    peaks = np.full(len(bits), np.nan)
    for j, (a, b) in enumerate(zip(i0, i1)):
        if b > a:
            w = np.sort(trace.rtt[a:b])
            peaks[j] = w[-top:].mean()
    ones = peaks[(bits == 1) & ~np.isnan(peaks)]
    zeros = peaks[(bits == 0) & ~np.isnan(peaks)]
    if not len(ones) or not len(zeros):
        raise DecodeError("latency gap needs both 1-periods and 0-periods")
    return int(round(ones.mean() - zeros.mean()))


def adapt_burst(noise_rtt_estimate: int, cfg: ChannelConfig | None = None,
                bursts: Sequence[int] = P.BURST_SIZES, service_time: int = 40 * NS,
                overlap_factor: float = 0.25) -> int:
    """Smallest burst whose modeled gap ``burst * service * overlap`` beats the noise."""
    options = sorted(bursts)
    for b in options:
        if b * service_time * overlap_factor > noise_rtt_estimate:
            return b
    return options[-1]


def noise_estimate(trace: LatencyTrace) -> int:
    """Spread of idle round trips (p95 - p50) used as the noise level.

    p95 matches the decode baseline, so this is how far ordinary round trips
    climb above the median before the receiver treats them as signal.
    """
    return nearest_rank(trace.rtt, 95) - nearest_rank(trace.rtt, 50)


def channel_metrics(sent: Sequence[Frame], decoded: np.ndarray | Sequence[Sequence[int]],
                    elapsed: int, locked: bool = True) -> tuple[float, float]:
    """True capacity (bits/s) and payload accuracy.

    ``decoded`` holds full frames (preamble included) aligned to ``sent``;
    missing frames and erasures count as wrong bits.
    """
    total = sum(len(f.payload) for f in sent)
    if total == 0:
        raise ValueError("no payload bits were sent")
    matched = 0
    for j, frame in enumerate(sent):
        if j >= len(decoded):
            break
        got = np.asarray(decoded[j])[len(frame.preamble):len(frame.preamble) + len(frame.payload)]
        want = np.asarray(frame.payload[:len(got)])
        matched += int(np.sum(got == want))
    accuracy = matched / total
    if not locked or elapsed <= 0:
        return 0.0, accuracy
    return matched * SEC / elapsed, accuracy


# --------------------------------------------------------------------------
# sklearn-style decoder


class ChannelDecoder(BaseEstimator):
    """Trace-in, bits-out decoder.

    ``fit`` takes a silent calibration trace and learns ``baseline_``;
    ``predict`` locks onto the preamble and returns decoded frames;
    ``transform`` returns per-bit trimmed-mean statistics.
    """

    def __init__(self, period: int = P.traffic_period(32), probe_interval: int = 500 * NS,
                 payload_bits: int = 200, preamble_bits: int = 32,
                 baseline_percentile: float = 95.0, margin: int = 0, min_match: int = 30):
        self.period = period
        self.probe_interval = probe_interval
        self.payload_bits = payload_bits
        self.preamble_bits = preamble_bits
        self.baseline_percentile = baseline_percentile
        self.margin = margin
        self.min_match = min_match

    def _config(self) -> ChannelConfig:
        return ChannelConfig(burst_size=1, period=int(self.period),
                             probe_interval=int(self.probe_interval),
                             preamble=tuple([1, 0] * (self.preamble_bits // 2)),
                             payload_bits=int(self.payload_bits),
                             baseline_percentile=self.baseline_percentile, margin=int(self.margin))

    def fit(self, X, y=None):
        trace = LatencyTrace.from_array(X)
        self.config_ = self._config()
        self.baseline_ = calibrate_baseline(trace, self.baseline_percentile)
        return self

    def _check(self):
        if not hasattr(self, "baseline_"):
            raise DecodeError("ChannelDecoder is not fitted; call fit with a silent trace")

    def lock(self, X) -> DecodeState:
        self._check()
        state = DecodeState(unloaded_latency=self.baseline_)
        lock_preamble(LatencyTrace.from_array(X), self.config_, state, min_match=self.min_match)
        self.state_ = state
        return state

    def predict(self, X, n_frames: int | None = None) -> np.ndarray:
        trace = LatencyTrace.from_array(X)
        state = self.lock(trace)
        return decode_frames(trace, self.config_, state, n_frames)

    def transform(self, X) -> np.ndarray:
        trace = LatencyTrace.from_array(X)
        state = getattr(self, "state_", None) or self.lock(trace)
        n = int((int(trace.issue[-1]) - state.bit_phase) // state.period)
        return window_stats(trace, state.bit_phase + np.arange(max(n, 0)) * state.period,
                            state.period)


# --------------------------------------------------------------------------
# agents


class Sender:
    """Issues one burst at the start of every 1-bit period."""

    def __init__(self, fabric, region, addresses: Sequence[int], cfg: ChannelConfig):
        if not len(addresses):
            raise ValueError("sender needs at least one bank address")
        self.fabric = fabric
        self.region = region
        self.addresses = list(addresses)
        self.cfg = cfg
        self._cursor = 0
        self.bursts = 0

    def send_frames(self, frames: Sequence[Frame], start: int) -> int:
        """Schedule ``frames`` back to back from ``start``; returns the end time."""
        t = start
        for frame in frames:
            for bit in frame.bits:
                if bit:
                    self.fabric.sim.schedule(t, self._burst, kind="burst-issue")
                t += self.cfg.period
        return t

    def _burst(self) -> None:
        n = len(self.addresses)
        for _ in range(self.cfg.burst_size):
            self.fabric.issue_read("sender", self.region, self.addresses[self._cursor])
            self._cursor = (self._cursor + 1) % n
        self.bursts += 1


class Receiver:
    """Probes its own same-bank addresses round-robin at a fixed interval."""

    def __init__(self, fabric, region, addresses: Sequence[int], probe_interval: int):
        if not len(addresses):
            raise ValueError("receiver needs at least one bank address")
        self.fabric = fabric
        self.region = region
        self.addresses = list(addresses)
        self.probe_interval = probe_interval
        self.reads = []
        self._cursor = 0
        self._stop = 0

    def probe(self, start: int, stop: int) -> None:
        self._stop = stop
        self.fabric.sim.schedule(start, self._tick, kind="probe-issue")

    def _tick(self) -> None:
        read = self.fabric.issue_read("receiver", self.region, self.addresses[self._cursor])
        self.reads.append(read)
        self._cursor = (self._cursor + 1) % len(self.addresses)
        nxt = self.fabric.sim.now + self.probe_interval
        if nxt < self._stop:
            self.fabric.sim.schedule(nxt, self._tick, kind="probe-issue")

    def trace(self, t0: int = 0, t1: int | None = None) -> LatencyTrace:
        done = [r for r in self.reads if r.complete_time is not None and not r.faulted
                and r.issue_time >= t0 and (t1 is None or r.issue_time < t1)]
        return LatencyTrace([r.issue_time for r in done], [r.rtt for r in done])
