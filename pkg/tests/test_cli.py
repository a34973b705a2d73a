import csv
import json
import subprocess
import sys

import pytest

from lfnsim.cli import SCENARIO_COLUMNS, SWEEP_COLUMNS, main
from lfnsim.config import ConfigError, RunConfig, load_config_file, make_config
from lfnsim.transport import CcMode, RtoMode


def test_defaults_are_headline_configuration():
    c = RunConfig()
    assert (c.rtt_ms, c.loss, c.rate_mbps, c.mss, c.overhead_bytes, c.size_bytes) == (
        180.0, 0.0, 476.0, 1448, 66, 128_003_200)
    assert (c.cc_mode, c.rto_mode, c.seed, c.samples, c.bin_ms) == (
        CcMode.FIXED, RtoMode.ACCELERATED, 1, 160, 100.0)


@pytest.mark.parametrize("kwargs", [
    {"loss": 2}, {"loss": -0.1}, {"rtt_ms": 0}, {"rate_mbps": float("inf")}, {"mss": 0},
    {"size_bytes": 0}, {"seed": -1}, {"samples": 0}, {"bin_ms": 0}, {"cc_mode": "cubic"},
    {"rto_mode": "fast"}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("loss: 0.01\nrto-mode: rfc2988\nseed: 5\n")
    values = load_config_file(path)
    cfg = make_config(values, seed=9, loss=None)
    assert (cfg.loss, cfg.rto_mode, cfg.seed) == (0.01, RtoMode.RFC2988, 9)
    path.write_text("colour: blue\n")
    with pytest.raises(ConfigError, match="unknown"):
        load_config_file(path)
    path.write_text("- 1\n")
    with pytest.raises(ConfigError):
        load_config_file(path)
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        make_config({"samples": "many"})


def test_transfer_defaults(tmp_path, capsys):
    assert main(["transfer"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert record["true_transfer"] == pytest.approx(2.34, abs=0.02)
    assert record["retransmissions"] == 0


def test_transfer_is_byte_identical_per_seed(tmp_path):
    outs = []
    for name in ("a.json", "b.json"):
        path = tmp_path / name
        args = ["transfer", "--seed", "7", "--loss", "0.01", "--size-bytes", "3000000",
                "--out", str(path)]
        assert main(args) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_invalid_loss_exits_2(capsys):
    assert main(["transfer", "--loss", "2"]) == 2
    assert "loss" in capsys.readouterr().err


def test_timeout_exits_3(capsys):
    assert main(["transfer", "--loss", "1", "--size-bytes", "10000"]) == 3
    assert "timeout" in capsys.readouterr().err


def test_config_file_flag(tmp_path, capsys):
    path = tmp_path / "cfg.yaml"
    path.write_text("size_bytes: 100000\nloss: 0.02\n")
    assert main(["transfer", "--config", str(path), "--seed", "3"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["loss"] == 0.02 and rec["run_id"].endswith("seed3-s0")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_sweep_rows_and_columns(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--samples", "3", "--size-bytes", "3000000", "--out", str(out)]) == 0
    rows = _read_csv(out)
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert len(rows) == 11
    assert [(r[0], r[1]) for r in rows[1:3]] == [("0", "accelerated"), ("0", "rfc2988")]
    assert rows[1][2:-1] == rows[2][2:-1] and float(rows[1][-1]) == 0.0
    assert all(len(v.split(".")[1]) == 6 for v in rows[1][3:])
    assert rows[-1][-1] == rows[-2][-1]


def test_sweep_custom_losses_and_bad_input(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--samples", "2", "--size-bytes", "100000", "--losses", "0.05",
                 "--out", str(out)]) == 0
    assert len(_read_csv(out)) == 3
    assert main(["sweep", "--samples", "1"]) == 2
    assert main(["sweep", "--losses", "a,b"]) == 2
    assert main(["sweep", "--losses", "0.5,7"]) == 2


def test_scenario_outputs(tmp_path):
    out = tmp_path / "scen" / "run.csv"
    timeline = tmp_path / "t.yaml"
    timeline.write_text("- {at: 0.0, action: start, type: efd}\n"
                        "- {at: 0.2, action: start, type: raw}\n"
                        "- {at: 0.6, action: end, type: raw}\n")
    assert main(["scenario", "--timeline", str(timeline), "--out", str(out), "--run-id", "t1"]) == 0
    rows = _read_csv(out)
    assert tuple(rows[0]) == SCENARIO_COLUMNS
    assert len(rows) - 1 == 6 * 26  # 0.6 s + 2 s tail at 100 ms bins
    assert rows[1][:3] == ["t1", "0.000000", "crosstalk"]
    totals = json.loads((tmp_path / "scen" / "run_totals.json").read_text())
    assert totals["run_id"] == "t1" and totals["delivered_bytes"]["raw"] > 0
    assert set(totals["wire_bytes"]) == {"crosstalk", "efd", "interactive", "raw", "catchup",
                                         "adhoc"}


def test_scenario_errors(tmp_path):
    assert main(["scenario"]) == 2
    assert main(["scenario", "--timeline", str(tmp_path / "nope.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("- {at: 1, action: end, type: raw}\n")
    assert main(["scenario", "--timeline", str(bad)]) == 2
    policy = tmp_path / "p.yaml"
    policy.write_text("classes:\n  - {type: efd, priority: 0, guarantee: 1mbit, ceil: 1mbit}\n")
    assert main(["scenario", "--default-timeline", "--policy", str(policy)]) == 2


def test_short_transfer_tail_timer_fires_before_second_window(tmp_path):
    # 200 kB leaves fewer than 100 segments outstanding after the first window,
    # so the 50 ms tail timer expires before the second window is acknowledged.
    out = tmp_path / "short.jsonl"
    assert main(["trace", "--size-bytes", "200000", "--out", str(out)]) == 0
    events = [json.loads(line) for line in out.read_text().splitlines()]
    assert any(e["event"] == "rto" for e in events)
    assert main(["trace", "--size-bytes", "200000", "--rto", "rfc2988", "--out", str(out)]) == 0
    events = [json.loads(line) for line in out.read_text().splitlines()]
    assert not any(e["event"] in ("rto", "retransmit") for e in events)


def test_trace_output(tmp_path):
    out = tmp_path / "trace.jsonl"
    assert main(["trace", "--out", str(out)]) == 0
    events = [json.loads(line) for line in out.read_text().splitlines()]
    assert {e["event"] for e in events} == {"send", "recv", "ack"}
    assert not any(e["retransmission"] for e in events)
    assert sum(e["event"] == "send" for e in events) == 88_400
    out2 = tmp_path / "lossy.jsonl"
    assert main(["trace", "--size-bytes", "2000000", "--loss", "0.05", "--out", str(out2)]) == 0
    events = [json.loads(line) for line in out2.read_text().splitlines()]
    assert any(e["event"] == "retransmit" for e in events)
    assert [e["t"] for e in events] == sorted(e["t"] for e in events)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "lfnsim", "transfer", "--size-bytes", "5000"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout)["packets_sent"] == 4


def _rto_gaps(path):
    times = [e["t"] for e in map(json.loads, path.read_text().splitlines()) if e["event"] == "rto"]
    return [round(b - a, 6) for a, b in zip(times, times[1:])]


def test_trace_shows_backoff_versus_flat_tail_timer(tmp_path):
    out = tmp_path / "t.jsonl"
    base = ["trace", "--loss", "0.01", "--stream", "4", "--out", str(out)]
    assert main(base + ["--rto", "rfc2988"]) == 0
    assert 0.4 in _rto_gaps(out)  # the 200 ms floor doubled
    assert main(base + ["--rto", "accelerated"]) == 0
    gaps = _rto_gaps(out)
    assert gaps.count(0.05) >= 5
