"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Channel criteria average over SEEDS independent runs (10 frames each).
"""
import functools
import time

import numpy as np
import pytest

from bankchannel import presets as P
from bankchannel.discovery import discover_bank_span
from bankchannel.harness.export import export, report_json, verify
from bankchannel.harness.scenario import Scenario, run_channel, run_scenario, stealth_report
from bankchannel.memsys import InterleavingScheme
from bankchannel.rdmanet import Fabric, NoiseProfile, scheme_for_preset
from bankchannel.simkernel import US, rng_stream

SEEDS = range(5)
RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str, capsys) -> None:
    RESULTS[n] = (ok, detail)
    with capsys.disabled():
        print(f"\nCRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@functools.lru_cache(maxsize=None)
def channel(name: str, burst: int, seeds=tuple(SEEDS)):
    runs = [run_channel(Scenario.named(name, seed=s), burst)[0] for s in seeds]
    return (float(np.mean([r.capacity for r in runs])) / 1e3,
            float(np.mean([r.accuracy for r in runs])),
            float(np.mean([r.latency_gap for r in runs])) / US)


def within(x, target, rel):
    return abs(x - target) <= rel * target


@pytest.fixture(scope="module")
def stealth():
    return stealth_report(Scenario.named("stealth", seed=0))


def test_c01_discovery_soundness(capsys):
    notes, ok = [], True
    for i in range(10):
        high = 12 + (i * 17) % 18
        scheme = InterleavingScheme.random_xor(rng_stream(i, "acceptance:scheme"), high)
        fab = Fabric("private", seed=i, scheme=scheme, noise=NoiseProfile())
        region = fab.add_region("receiver", 256)
        t = time.perf_counter()
        res = discover_bank_span(fab, region, seed=i)
        dt = time.perf_counter() - t
        banks = {scheme.route(region.virt_to_phys(a)) for a in res.sample_addresses}
        good = res.x_bit == high and len(banks) == 1 and dt < 10
        ok &= good
        if not good:
            notes.append(f"scheme {i}: high {high} got {res.x_bit}, {len(banks)} banks, {dt:.1f}s")
    for preset, high in (("private", 26), ("cloud", 27)):
        fab = Fabric(preset, seed=0, noise=NoiseProfile())
        res = discover_bank_span(fab, fab.add_region("receiver", 256))
        ok &= res.x_bit == high
        notes.append(f"{preset} x_bit={res.x_bit}")
    record(1, ok, "; ".join(notes), capsys)


def test_c02_mitigation(capsys):
    ok, worst = True, 1.0
    for k in range(5):
        key = int(rng_stream(k, "acceptance:key").integers(1, 2**63))
        scheme = InterleavingScheme.cryptographic(scheme_for_preset("private"), key)
        fab = Fabric("private", seed=k, scheme=scheme, noise=NoiseProfile())
        region = fab.add_region("receiver", 256)
        res = discover_bank_span(fab, region, seed=k)
        ok &= not res.converged
        for it in res.iterations:
            cover = len({scheme.route(region.virt_to_phys(a)) for a in it.addresses}) / 128
            worst = min(worst, cover)
    ok &= worst >= 0.25
    record(2, ok, f"5 keys, none converged={ok}; min bank coverage {worst:.0%}", capsys)


def test_c03_zero_noise(capsys):
    quiet = NoiseProfile(rtt_jitter=P.JitterModel())
    accs = {}
    for b in (16, 32, 64, 128):
        run, _ = run_channel(Scenario.named("isolation", noise=quiet, seed=1, repetitions=10), b)
        accs[b] = run.accuracy
    record(3, all(a == 1.0 for a in accs.values()), f"accuracy {accs}", capsys)


def test_c04_isolation(capsys):
    t = time.perf_counter()
    run_channel(Scenario.named("isolation", seed=99), 32)
    single = time.perf_counter() - t
    cap, acc, gap32 = channel("isolation", 32)
    _, _, gap128 = channel("isolation", 128)
    ok = within(cap, 114, 0.20) and 0.75 <= acc <= 0.90 and abs(gap32 - 0.5) <= 0.2 \
        and gap128 > 1.0 and single < 30
    record(4, ok, f"b32 {cap:.1f} Kb/s acc {acc:.1%} gap {gap32:.2f}us; b128 gap {gap128:.2f}us; "
                  f"run {single:.1f}s", capsys)


def test_c05_local_load(capsys):
    cap_i, acc_i, _ = channel("isolation", 32)
    cap_l, acc_l, _ = channel("local_load", 32)
    ok = within(cap_l, cap_i, 0.05) and within(acc_l, acc_i, 0.05)
    record(5, ok, f"capacity {cap_l:.1f} vs {cap_i:.1f} Kb/s; accuracy {acc_l:.1%} vs {acc_i:.1%}",
           capsys)


def test_c06_network_load(capsys):
    _, acc32, _ = channel("network_load", 32)
    cap64, acc64, _ = channel("network_load", 64)
    cap128, acc128, _ = channel("network_load", 128)
    ok = acc32 <= 0.60 and within(cap64, 67, 0.25) and abs(acc64 - 0.735) <= 0.10 \
        and acc128 >= 0.93 and within(cap128, 65, 0.25)
    record(6, ok, f"b32 acc {acc32:.1%}; b64 {cap64:.1f} Kb/s acc {acc64:.1%}; "
                  f"b128 {cap128:.1f} Kb/s acc {acc128:.1%}", capsys)


def test_c07_cloud(capsys):
    cap32, acc32, _ = channel("cloud", 32)
    cap128, acc128, _ = channel("cloud", 128)
    ok = within(cap32, 74, 0.25) and abs(acc32 - 0.82) <= 0.10 \
        and acc128 >= 0.94 and within(cap128, 51, 0.25)
    record(7, ok, f"b32 {cap32:.1f} Kb/s acc {acc32:.1%}; b128 {cap128:.1f} Kb/s acc {acc128:.1%}",
           capsys)


def test_c08_traffic_table(stealth, capsys):
    peak = stealth["per_bank_peak_gbps"]
    rows = {r["burst"]: r["channel_traffic_gbps"] for r in stealth["bursts"]}
    ok = all(within(rows[b], P.TRAFFIC_GBPS[b], 0.15) and rows[b] <= peak for b in P.BURST_SIZES)
    table = ", ".join(f"{b}:{rows[b]:.2f}" for b in P.BURST_SIZES)
    record(8, ok, f"GB/s {table}; per-bank peak {peak:.2f}", capsys)


def test_c09_stealth_percentiles(stealth, capsys):
    pct = stealth["percentiles"]
    infl = {r["burst"]: dict(zip(pct, r["inflation"])) for r in stealth["bursts"]}
    ok = infl[128][99.0] < 0.10
    ok &= abs(infl[32][99.9] - 0.20) <= 0.10 and abs(infl[32][99.99] - 0.70) <= 0.10
    for b in (512, 1024):
        ok &= all(2.0 <= infl[b][p] <= 4.0 for p in (99.9, 99.99))
    detail = (f"b128 p99 {infl[128][99.0]:+.0%}; b32 p99.9 {infl[32][99.9]:+.0%} "
              f"p99.99 {infl[32][99.99]:+.0%}; "
              + "; ".join(f"b{b} p99.9 {infl[b][99.9]:+.0%} p99.99 {infl[b][99.99]:+.0%}"
                          for b in (512, 1024)))
    record(9, ok, detail, capsys)


def test_c10_determinism_and_accounting(tmp_path, capsys):
    s = Scenario.named("network_load", bursts=(64,), seed=21, repetitions=3)
    a, b = run_scenario(s), run_scenario(s)
    same_report = report_json(a) == report_json(b)
    hashes = []
    for _ in range(2):
        fab = s.make_fabric(record=True)
        run_channel(s, 64, fabric=fab)
        hashes.append(fab.sim.state_hash())
    conserved = fab.completed == fab.issued - fab.faulted
    bytes_ok = all(bank.served_bytes == 64 * bank.served_count for bank in fab.memory.banks)
    export(a, tmp_path)
    mismatches = verify(tmp_path)
    ok = same_report and hashes[0] == hashes[1] and conserved and bytes_ok and not mismatches
    record(10, ok, f"reports equal={same_report}, event hashes equal={hashes[0] == hashes[1]}, "
                   f"responses=non-faulted {conserved}, bytes=64*count {bytes_ok}, "
                   f"recompute mismatches {len(mismatches)}", capsys)
