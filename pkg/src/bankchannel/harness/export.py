"""Machine-readable results: a versioned JSON report plus plot-ready CSVs.

Every channel run stores its calibration trace, transmission trace and sent
frames next to the report, so :func:`recompute` can rebuild the headline
metrics offline from those files alone.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..channel import ChannelConfig, LatencyTrace, read_frames, write_frames
from ..simkernel import NS
from .scenario import ChannelRun, RunReport, Scenario, decode_run, per_frame_stats

SCHEMA = 1
METRIC_KEYS = ("locked", "phase_ns", "inferred_period_ns", "baseline_ns", "capacity_kbps",
               "accuracy", "latency_gap_ns", "noise_estimate_ns", "elapsed_ns")


def scenario_json(s: Scenario) -> dict:
    return {
        "name": s.name,
        "preset": s.preset,
        "bursts": list(s.bursts),
        "seed": s.seed,
        "repetitions": s.repetitions,
        "span": list(s.span) if s.span else None,
        "link_gbps": s.link_gbps,
        "probe_interval_ns": s.probe_interval / NS,
        "payload_bits": s.payload_bits,
        "noise": {
            "network_load_gbps": s.noise.network_load / 1e9,
            "local_load_gbps": [v / 1e9 for v in s.noise.local_load],
        },
        "interleaving_key": None if s.interleaving_key is None else f"{s.interleaving_key:x}",
    }


def config_json(cfg: ChannelConfig) -> dict:
    return {"burst_size": cfg.burst_size, "period_ps": cfg.period,
            "probe_interval_ps": cfg.probe_interval, "preamble": list(cfg.preamble),
            "payload_bits": cfg.payload_bits, "baseline_percentile": cfg.baseline_percentile,
            "margin_ps": cfg.margin}


def config_from_json(d: dict) -> ChannelConfig:
    return ChannelConfig(burst_size=d["burst_size"], period=d["period_ps"],
                         probe_interval=d["probe_interval_ps"], preamble=tuple(d["preamble"]),
                         payload_bits=d["payload_bits"],
                         baseline_percentile=d["baseline_percentile"], margin=d["margin_ps"])


def _run_files(burst: int) -> dict:
    return {"calibration": f"calibration_b{burst}.csv", "trace": f"trace_b{burst}.csv",
            "frames": f"frames_b{burst}.hex"}


def report_json(report: RunReport) -> dict:
    runs = []
    for run in sorted(report.runs, key=lambda r: r.burst):
        runs.append({**run.summary(), "config": config_json(run.config),
                     "files": _run_files(run.burst)})
    return {
        "schema": SCHEMA,
        "scenario": scenario_json(report.scenario),
        "runs": runs,
        "discovery": report.discovery.to_json() if report.discovery else None,
        "stealth": report.stealth,
    }


def export(report: RunReport, out_dir: str | Path, fmt: str = "json") -> list[Path]:
    """Write the report; ``fmt='csv'`` adds per-figure CSVs. Returns written paths."""
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown export format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for run in report.runs:
        files = _run_files(run.burst)
        run.calibration.to_csv(out / files["calibration"])
        run.trace.to_csv(out / files["trace"])
        write_frames(out / files["frames"], run.frames)
        written += [out / f for f in files.values()]
    data = report_json(report)
    path = out / "report.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    written.append(path)
    if fmt == "csv":
        written += _write_csvs(report, out)
    return written


def _write_rows(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def ccdf_points(rtt: np.ndarray) -> list[tuple[float, float]]:
    """(rtt_ns, fraction of samples strictly greater) at each distinct value."""
    vals = np.sort(np.asarray(rtt))
    uniq, idx = np.unique(vals, return_index=True)
    n = len(vals)
    counts = np.append(idx[1:], n)
    return [(float(u) / NS, float(n - c) / n) for u, c in zip(uniq, counts)]


def signal_rows(run: ChannelRun):
    """One row per probe: its bit slot, the sent bit and the decoded bit."""
    sent = np.concatenate([np.asarray(f.bits) for f in run.frames])
    decoded = np.asarray(run.decoded).ravel()
    slot = (run.trace.issue - run.phase) // run.period
    for t, r, k in zip(run.trace.issue.tolist(), run.trace.rtt.tolist(), slot.tolist()):
        inside = 0 <= k < len(sent)
        yield [t / NS, r / NS, k if inside else "", int(sent[k]) if inside else "",
               int(decoded[k]) if inside and k < len(decoded) else ""]


def _write_csvs(report: RunReport, out: Path) -> list[Path]:
    paths = []
    for run in report.runs:
        paths.append(_write_rows(out / f"ccdf_b{run.burst}.csv", ["rtt_ns", "ccdf"],
                                 ccdf_points(run.calibration.rtt)))
        paths.append(_write_rows(out / f"signal_b{run.burst}.csv",
                                 ["issue_ns", "rtt_ns", "bit_index", "sent_bit", "decoded_bit"],
                                 signal_rows(run)))
    if report.runs:
        rows = []
        for run in sorted(report.runs, key=lambda r: r.burst):
            st = per_frame_stats(run)
            rows.append([run.burst, run.config.period / NS, run.capacity / 1e3, st["capacity_std"] / 1e3,
                         run.accuracy, st["accuracy_std"],
                         "" if run.latency_gap is None else run.latency_gap / NS])
        paths.append(_write_rows(out / "sweep.csv",
                                 ["burst", "period_ns", "capacity_kbps", "capacity_std_kbps",
                                  "accuracy", "accuracy_std", "latency_gap_ns"], rows))
    if report.stealth:
        st = report.stealth
        header = ["burst", "channel_traffic_gbps"] + [f"p{p:g}_ns" for p in st["percentiles"]] \
            + [f"p{p:g}_inflation" for p in st["percentiles"]]
        rows = [[0, 0.0] + st["idle_ns"] + [0.0] * len(st["percentiles"])]
        rows += [[r["burst"], r["channel_traffic_gbps"]] + r["percentiles_ns"] + r["inflation"]
                 for r in st["bursts"]]
        paths.append(_write_rows(out / "stealth.csv", header, rows))
    if report.discovery:
        rows = [[it.fixed_high, it.throughput / 1e9,
                 "" if it.bank_coverage is None else it.bank_coverage]
                for it in report.discovery.iterations]
        paths.append(_write_rows(out / "discovery.csv",
                                 ["fixed_high", "throughput_gbps", "bank_coverage"], rows))
    return paths


def load_report(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    data = json.loads(p.read_text())
    if data.get("schema") != SCHEMA:
        raise ValueError(f"unsupported report schema {data.get('schema')!r}")
    return data


def recompute(out_dir: str | Path) -> list[dict]:
    """Rebuild each run's metrics from its stored traces and frames."""
    out = Path(out_dir)
    data = load_report(out)
    results = []
    for entry in data["runs"]:
        cfg = config_from_json(entry["config"])
        files = entry["files"]
        calibration = LatencyTrace.from_csv(out / files["calibration"])
        trace = LatencyTrace.from_csv(out / files["trace"])
        frames = read_frames(out / files["frames"], len(cfg.preamble))
        d = decode_run(calibration, trace, cfg, frames)
        results.append({
            "burst": cfg.burst_size,
            "locked": d["locked"],
            "phase_ns": d["phase"] / NS,
            "inferred_period_ns": d["period"] / NS,
            "baseline_ns": d["baseline"] / NS,
            "capacity_kbps": d["capacity"] / 1e3,
            "accuracy": d["accuracy"],
            "latency_gap_ns": None if d["latency_gap"] is None else d["latency_gap"] / NS,
            "noise_estimate_ns": d["noise_estimate"] / NS,
            "elapsed_ns": d["elapsed"] / NS,
        })
    return results


def verify(out_dir: str | Path) -> list[str]:
    """Names of metrics whose offline recomputation differs from the report."""
    data = load_report(out_dir)
    mismatches = []
    for stored, again in zip(data["runs"], recompute(out_dir)):
        for key in METRIC_KEYS:
            if stored[key] != again[key]:
                mismatches.append(f"burst {stored['burst']}: {key} {stored[key]!r} != {again[key]!r}")
    return mismatches
