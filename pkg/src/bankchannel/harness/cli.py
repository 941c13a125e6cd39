"""Command-line entry point.

All settings come from one JSON config file plus flag overrides. Each run
writes its results and a snapshot of the effective config into ``--out``.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .. import presets as P
from ..rdmanet import ConfigError, NoiseProfile
from .export import export, scenario_json
from .scenario import SCENARIOS, RunReport, Scenario, run_discovery, run_scenario, stealth_report

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT = 0, 2, 3
VERBS = ("discover", "transmit", "sweep", "scenario", "stealth", "mitigate")
CONFIG_KEYS = {"scenario", "preset", "link_gbps", "network_load_gbps", "local_load_gbps", "seed",
               "repetitions", "bursts", "span", "key", "probe_interval_ns", "payload_bits"}


def _parse_bursts(text: str) -> tuple[int, ...]:
    try:
        out = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad burst list {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty burst list")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bankchannel",
                                 description="Simulated cross-network DRAM-bank covert channel.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", type=Path, help="JSON config file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", type=Path, default=Path("results"))
    ap.add_argument("--burst", type=_parse_bursts, help="comma-separated burst sizes")
    ap.add_argument("--scenario", choices=SCENARIOS)
    ap.add_argument("--format", choices=("json", "csv"), default="json")
    return ap


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    return data


def scenario_from_config(cfg: dict, name: str) -> Scenario:
    """Build a Scenario; loads are given in Gb/s (network) and GB/s (local)."""
    def num(key, default, kind=float):
        v = cfg.get(key, default)
        try:
            return kind(v) if v is not None else None
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {v!r}") from None

    base = Scenario.named(name)
    noise = base.noise
    if "network_load_gbps" in cfg or "local_load_gbps" in cfg:
        local = cfg.get("local_load_gbps", [v / 1e9 for v in noise.local_load])
        if not (isinstance(local, (list, tuple)) and len(local) == 2):
            raise ConfigError("local_load_gbps: expected [lo, hi]")
        noise = NoiseProfile(network_load=num("network_load_gbps", noise.network_load / 1e9) * 1e9,
                             local_load=(float(local[0]) * 1e9, float(local[1]) * 1e9))
    span = cfg.get("span")
    if span is not None and (not isinstance(span, (list, tuple)) or len(span) != 2):
        raise ConfigError("span: expected [low, high]")
    bursts = cfg.get("bursts", base.bursts)
    if isinstance(bursts, int):
        bursts = [bursts]
    key = cfg.get("key")
    if isinstance(key, str):
        try:
            key = int(key, 16)
        except ValueError:
            raise ConfigError(f"key: expected a hex string, got {key!r}") from None
    preset = cfg.get("preset", base.preset)
    if preset not in P.PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}; expected one of {sorted(P.PRESETS)}")
    kw = dict(name=name, preset=preset, noise=noise, bursts=tuple(int(b) for b in bursts),
              seed=num("seed", 0, int), repetitions=num("repetitions", base.repetitions, int),
              span=tuple(int(x) for x in span) if span else None,
              link_gbps=num("link_gbps", None), payload_bits=num("payload_bits", None, int), key=key)
    if "probe_interval_ns" in cfg:
        kw["probe_interval"] = round(num("probe_interval_ns", 500) * 1000)
    return Scenario(**kw)


def _resolve(args) -> Scenario:
    cfg = load_config(args.config)
    default_name = {"discover": "discovery", "mitigate": "mitigation", "stealth": "stealth"}
    name = args.scenario or cfg.get("scenario") or default_name.get(args.verb, "isolation")
    if args.verb == "mitigate":
        name = "mitigation"
    if name not in SCENARIOS:
        raise ConfigError(f"scenario: unknown name {name!r}")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.burst is not None:
        cfg["bursts"] = list(args.burst)
    elif args.verb == "sweep" and "bursts" not in cfg:
        cfg["bursts"] = [16, 32, 64, 128]
    elif args.verb == "stealth" and "bursts" not in cfg:
        cfg["bursts"] = list(P.BURST_SIZES)
    return scenario_from_config(cfg, name)


def execute(verb: str, s: Scenario) -> RunReport:
    if verb in ("discover", "mitigate"):
        return RunReport(scenario=s, discovery=run_discovery(s))
    if verb == "stealth":
        return RunReport(scenario=s, stealth=stealth_report(s, bursts=s.bursts))
    if verb == "transmit":
        s = replace(s, bursts=s.bursts[:1])
    return run_scenario(s)


def _print_summary(report: RunReport) -> None:
    for run in sorted(report.runs, key=lambda r: r.burst):
        gap = "n/a" if run.latency_gap is None else f"{run.latency_gap / 1e6:.3f}us"
        print(f"burst {run.burst:5d}  capacity {run.capacity / 1e3:7.1f} Kb/s  "
              f"accuracy {run.accuracy:6.1%}  locked {run.locked}  gap {gap}")
    if report.discovery:
        d = report.discovery
        print(f"discovery: {d.outcome}; span {d.fixed_span}")
    if report.stealth:
        st = report.stealth
        for row in st["bursts"]:
            infl = " ".join(f"{x:+.0%}" for x in row["inflation"])
            print(f"burst {row['burst']:5d}  traffic {row['channel_traffic_gbps']:.2f} GB/s  "
                  f"inflation {infl}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        s = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(
        json.dumps({"verb": args.verb, "format": args.format, **scenario_json(s)},
                   indent=2, sort_keys=True) + "\n")
    try:
        report = execute(args.verb, s)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"simulation assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    export(report, args.out, args.format)
    _print_summary(report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
