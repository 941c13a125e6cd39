import csv
import json

import numpy as np
import pytest

from bankchannel.channel import Frame
from bankchannel.harness import cli
from bankchannel.harness.export import export, load_report, recompute, report_json, verify
from bankchannel.harness.scenario import (RunReport, Scenario, run_channel, run_discovery,
                                          run_scenario)
from bankchannel.rdmanet import ConfigError, NoiseProfile
from bankchannel.simkernel import NS, SEC


@pytest.fixture(scope="module")
def small_report():
    s = Scenario.named("isolation", bursts=(32,), seed=11, repetitions=3)
    return run_scenario(s)


def test_scenario_validation_names_field():
    with pytest.raises(ConfigError, match="^scenario:"):
        Scenario(name="bogus")
    with pytest.raises(ConfigError, match="^bursts:"):
        Scenario(bursts=())
    with pytest.raises(ConfigError, match="^noise:"):
        Scenario(noise=NoiseProfile(network_load=80e9))
    with pytest.raises(ConfigError, match="^seed:"):
        Scenario(seed=-1)


def test_cloud_forces_cloud_preset():
    s = Scenario(name="cloud", preset="private")
    assert s.preset == "cloud"
    c = s.channel_config(32)
    assert c.payload_bits == 100
    assert s.make_fabric().scheme.span == (6, 27)
    assert s.make_fabric().preset.link_gbps == 50.0


def test_reproducible(small_report):
    again = run_scenario(small_report.scenario)
    assert report_json(again) == report_json(small_report)
    assert np.array_equal(again.runs[0].trace.rtt, small_report.runs[0].trace.rtt)


def test_two_seeds_distinct_payloads_same_schema(small_report):
    other = run_scenario(Scenario.named("isolation", bursts=(32,), seed=12, repetitions=3))
    assert other.runs[0].frames != small_report.runs[0].frames
    a, b = report_json(small_report), report_json(other)

    def shape(x):
        if isinstance(x, dict):
            return {k: shape(v) for k, v in x.items()}
        if isinstance(x, list):
            return [shape(x[0])] if x else []
        return type(x).__name__
    assert shape(a) == shape(b)


def test_export_round_trip_exact(small_report, tmp_path):
    export(small_report, tmp_path, "json")
    data = load_report(tmp_path)
    assert data["schema"] == 1
    assert verify(tmp_path) == []
    again = recompute(tmp_path)[0]
    run = small_report.runs[0]
    assert again["capacity_kbps"] == run.capacity / 1e3
    assert again["accuracy"] == run.accuracy


def test_csv_exports(small_report, tmp_path):
    export(small_report, tmp_path, "csv")
    run = small_report.runs[0]
    with open(tmp_path / "signal_b32.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(run.trace)
    with open(tmp_path / "ccdf_b32.csv") as fh:
        ccdf = [float(r["ccdf"]) for r in csv.DictReader(fh)]
    assert ccdf[-1] == 0.0 and all(a >= b for a, b in zip(ccdf, ccdf[1:]))
    assert (tmp_path / "sweep.csv").exists()


def test_export_rejects_unknown_format(small_report, tmp_path):
    with pytest.raises(ValueError):
        export(small_report, tmp_path, "xml")


def test_export_surfaces_io_errors(small_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export(small_report, blocker / "sub")


def test_all_ones_traffic_identity():
    s = Scenario.named("isolation", seed=2, repetitions=2)
    cfg = s.channel_config(64)
    ones = Frame((1,) * len(cfg.preamble), (1,) * cfg.payload_bits)
    run, fab = run_channel(s, 64, frames=[ones] * 2)
    expect = 64 * 64 * SEC / run.config.period
    assert run.channel_traffic == pytest.approx(expect, rel=0.01)
    assert run.channel_traffic < fab.memory.per_bank_peak


def test_zero_bits_are_silent():
    s = Scenario.named("isolation", seed=2, repetitions=1)
    cfg = s.channel_config(32)
    frame = Frame((0,) * len(cfg.preamble), (0,) * cfg.payload_bits)
    run, fab = run_channel(s, 32, frames=[frame])
    assert sum(b.count_by_origin["channel_sender"] for b in fab.memory.banks) == 0
    assert not run.locked and run.capacity == 0.0


def test_accounting_after_channel_run(small_report):
    run, fab = run_channel(small_report.scenario, 32)
    assert fab.completed == fab.issued - fab.faulted
    assert all(b.served_bytes == 64 * b.served_count for b in fab.memory.banks)


def test_capacity_bound():
    s = Scenario.named("isolation", seed=4, repetitions=2)
    run, _ = run_channel(s, 64)
    bound = run.config.payload_bits * SEC / run.config.frame_time
    assert run.capacity <= bound + 1e-9
    assert (run.capacity == pytest.approx(bound)) == (run.accuracy == 1.0)


def test_latency_gap_grows_with_burst():
    s = Scenario.named("isolation", seed=5, repetitions=3)
    gaps = [run_channel(s, b)[0].latency_gap for b in (32, 64, 128)]
    assert gaps[0] < gaps[1] < gaps[2]


def test_discovery_reports_bank_coverage():
    res = run_discovery(Scenario.named("discovery", seed=1))
    assert res.converged and res.x_bit == 26
    assert res.iterations[-1].bank_coverage == pytest.approx(1 / 128)


def test_cli_transmit_and_snapshot(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "private", "seed": 3, "repetitions": 2,
                               "network_load_gbps": 0, "local_load_gbps": [0, 0]}))
    out = tmp_path / "out"
    rc = cli.main(["transmit", "--config", str(cfg), "--out", str(out), "--burst", "64",
                   "--format", "csv"])
    assert rc == 0
    snap = json.loads((out / "config.json").read_text())
    assert snap["seed"] == 3 and snap["bursts"] == [64] and snap["verb"] == "transmit"
    assert verify(out) == []
    assert "burst    64" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"network_load_gbps": 500}))
    assert cli.main(["scenario", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "noise:" in capsys.readouterr().err
    cfg.write_text(json.dumps({"wat": 1}))
    assert cli.main(["sweep", "--config", str(cfg)]) == 2


def test_cli_assertion_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("bank admission out of order")
    monkeypatch.setattr(cli, "execute", boom)
    assert cli.main(["transmit", "--out", str(tmp_path)]) == 3


def test_cli_mitigate(tmp_path):
    assert cli.main(["mitigate", "--seed", "9", "--out", str(tmp_path)]) == 0
    data = load_report(tmp_path)
    assert data["discovery"]["converged"] is False
    assert data["scenario"]["interleaving_key"] is not None
