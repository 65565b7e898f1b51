import hashlib
import json
import os
import subprocess
import sys

import pytest

from puppetry.cli import EXIT_CONFIG, EXIT_OK, EXIT_SAFETY, main

from .oracles import linear_scan


def run(tmp_path, *argv):
    return main(["--out", str(tmp_path), *argv])


def load(tmp_path, name):
    return json.loads((tmp_path / name).read_text())


# -- simulate ------------------------------------------------------------------------


def test_simulate_worst_case_crossover(tmp_path):
    assert run(tmp_path, "simulate") == EXIT_OK
    s = load(tmp_path, "summary.json")
    assert abs(s["crossover_s"] - 1080.0) <= 60.0
    assert s["crossover_closed_form_s"] == pytest.approx(1080.108)
    for name in ("marionet.csv", "baseline.csv", "marionet.events.jsonl", "plot.gp"):
        assert (tmp_path / name).exists()


def test_simulate_best_case_crossover(tmp_path):
    assert run(tmp_path, "simulate", "--effective-cores", "1.0") == EXIT_OK
    assert abs(load(tmp_path, "summary.json")["crossover_s"] - 480.0) <= 30.0


def test_simulate_seed_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["--seed", "7", "--out", str(d), "simulate", "--population", "300"]) == EXIT_OK
    for name in ("marionet.csv", "baseline.csv", "marionet.events.jsonl", "baseline.events.jsonl", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert load(a, "summary.json")["seed"] == 7


def test_simulate_config_file_and_bad_values(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"population": 50, "seed": 3}))
    assert main(["--config", str(cfg), "--out", str(tmp_path), "simulate"]) == EXIT_OK
    assert load(tmp_path, "summary.json")["config"]["population"] == 50
    assert run(tmp_path, "simulate", "--push-grant-prob", "1.5") == EXIT_CONFIG
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["--config", str(cfg), "--out", str(tmp_path), "simulate"]) == EXIT_CONFIG


def test_simulate_time_cap(tmp_path):
    assert run(tmp_path, "simulate", "--population", "500", "--sw-time-cap-s", "60") == EXIT_OK
    s = load(tmp_path, "summary.json")
    assert s["terminations_by_cap"] > 0 and s["work_ratio"] < 1.0


# -- crack-demo ----------------------------------------------------------------------


def test_crack_demo_recovers_plaintext(tmp_path):
    assert run(tmp_path, "crack-demo", "--plaintext", "test", "--threads", "--timeout", "60") == EXIT_OK
    r = load(tmp_path, "crack_report.json")
    digest = hashlib.sha256(b"test").digest()
    assert r["status"] == "completed"
    assert [c for _, c in linear_scan("SHA256", digest, "abcdefghijklmnopqrstuvwxyz", 4)] == [r["finding"]]


def test_crack_demo_processes_md5(tmp_path):
    digest = hashlib.md5(b"zz").hexdigest()
    assert run(tmp_path, "crack-demo", "--digest", digest, "--algorithm", "MD5", "--length", "2",
               "--servants", "2", "--timeout", "60") == EXIT_OK
    r = load(tmp_path, "crack_report.json")
    assert (r["finding"], r["config"]["mode"]) == ("zz", "processes")


def test_crack_demo_exhausted(tmp_path):
    assert run(tmp_path, "crack-demo", "--plaintext", "ABC", "--length", "3", "--threads") == EXIT_OK
    r = load(tmp_path, "crack_report.json")
    assert (r["status"], r["finding"]) == ("exhausted", None)


@pytest.mark.parametrize("argv", [["--digest", "zz"], ["--digest", "abcd"], [], ["--plaintext", "a", "--servants", "0"]])
def test_crack_demo_bad_input(tmp_path, argv, capsys):
    assert run(tmp_path, "crack-demo", *argv) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="speedup needs at least 4 cores")
def test_crack_demo_four_servants_beat_one(tmp_path):
    digest = hashlib.sha256(b"zzzz").hexdigest()
    times = {}
    for n in (1, 4):
        d = tmp_path / str(n)
        assert main(["--out", str(d), "crack-demo", "--digest", digest, "--servants", str(n)]) == EXIT_OK
        times[n] = load(d, "crack_report.json")["elapsed_s"]
    assert times[4] < times[1]


# -- flood-demo ----------------------------------------------------------------------


def test_flood_demo_conservation(tmp_path):
    assert run(tmp_path, "flood-demo", "--duration-s", "1", "--rate-cap", "300") == EXIT_OK
    r = load(tmp_path, "flood_report.json")
    f = r["flood"]
    assert r["conservation_ok"]
    assert r["sink"]["total_requests"] == f["attempted"] == f["completed"]
    assert f["achieved_rate"] <= 300


@pytest.mark.parametrize("target", ["10.0.0.5:80", "example.com:80", "8.8.8.8:53"])
def test_flood_demo_refuses_non_loopback(tmp_path, target):
    assert run(tmp_path, "flood-demo", "--target", target, "--duration-s", "0.2") == EXIT_SAFETY


def test_flood_demo_refuses_reserved_port(tmp_path):
    assert run(tmp_path, "flood-demo", "--target", "127.0.0.1:22", "--duration-s", "0.2") == EXIT_SAFETY


def test_flood_demo_hold_open(tmp_path):
    assert run(tmp_path, "flood-demo", "--hold-open", "--duration-s", "1", "--concurrency", "8",
               "--trickle-ms", "200", "--drain-ms", "500") == EXIT_OK
    r = load(tmp_path, "flood_report.json")
    assert r["sink_peak_connections"] == 8 and r["flood"]["completed"] == 0


# -- sink / detect / calibrate ----------------------------------------------------------


def test_sink_command_runs_for_duration(tmp_path):
    stats = tmp_path / "stats.json"
    assert run(tmp_path, "sink", "--bind", "127.0.0.1:0", "--duration-s", "0.2", "--stats-file", str(stats)) == EXIT_OK
    assert json.loads(stats.read_text())["total_requests"] == 0


def test_sink_command_refuses_wildcard_and_bad_bind(tmp_path):
    assert run(tmp_path, "sink", "--bind", "0.0.0.0:0", "--duration-s", "0.1") == EXIT_SAFETY
    assert run(tmp_path, "sink", "--bind", "nonsense", "--duration-s", "0.1") == EXIT_CONFIG


def live_log(tmp_path, jitter, name):
    d = tmp_path / name
    assert main(["--seed", "1", "--out", str(d), "crack-demo", "--plaintext", "zz", "--length", "2",
                 "--servants", "1", "--threads", "--heartbeat-ms", "200", "--jitter", str(jitter),
                 "--min-heartbeats", "30", "--timeout", "60"]) == EXIT_OK
    return d / "puppeteer.jsonl"


def test_detect_flags_plain_and_misses_jittered_live_logs(tmp_path):
    # a single servant keeps scheduler noise on a shared core small next to
    # the 200 ms period; 40% jitter sits clearly above the 0.1 threshold
    plain = live_log(tmp_path, 0.0, "plain")
    assert main(["--out", str(tmp_path / "dp"), "detect", str(plain)]) == EXIT_OK
    verdicts = [json.loads(x) for x in (tmp_path / "dp" / "verdicts.jsonl").read_text().splitlines()]
    assert [v["flagged"] for v in verdicts] == [True]
    jittered = live_log(tmp_path, 0.4, "jit")
    assert main(["--out", str(tmp_path / "dj"), "detect", str(jittered)]) == EXIT_OK
    verdicts = [json.loads(x) for x in (tmp_path / "dj" / "verdicts.jsonl").read_text().splitlines()]
    assert [v["flagged"] for v in verdicts] == [False]


def test_detect_empty_and_malformed_logs(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run(tmp_path, "detect", str(empty)) == EXIT_CONFIG
    assert "empty trace" in capsys.readouterr().err
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run(tmp_path, "detect", str(bad)) == EXIT_CONFIG
    assert run(tmp_path, "detect", str(tmp_path / "missing.jsonl")) == EXIT_CONFIG


def test_calibrate_ratios(tmp_path):
    assert run(tmp_path, "calibrate") == EXIT_OK
    ratios = load(tmp_path, "calibration_report.json")["ratios"]
    assert ratios["PowerSaver/HighPerformance"] == pytest.approx(0.2159, abs=1e-9)
    assert ratios["Firefox/Chrome"] == pytest.approx(1.3455, abs=1e-9)
    assert ratios["i7-4790/i5-5200U"] == pytest.approx(1.29, abs=1e-9)


def test_calibrate_measure(tmp_path):
    assert run(tmp_path, "calibrate", "--measure", "--measure-ms", "100") == EXIT_OK
    m = load(tmp_path, "calibration_report.json")["measured_hashrate"]
    assert m["MD5"] > 0 and m["SHA256"] > 0


def test_missing_config_files_are_config_errors(tmp_path):
    missing = str(tmp_path / "nope.json")
    assert main(["--config", missing, "--out", str(tmp_path), "calibrate"]) == EXIT_CONFIG
    assert main(["--config", missing, "--out", str(tmp_path), "simulate"]) == EXIT_CONFIG


# -- deny-all network environment ---------------------------------------------------------


@pytest.mark.parametrize("argv", [
    ["flood-demo", "--duration-s", "0.2"],
    ["crack-demo", "--plaintext", "ab", "--length", "2", "--servants", "1", "--threads"],
    ["sink", "--bind", "127.0.0.1:0", "--duration-s", "0.1"],
])
def test_deny_all_environment_refuses_networking(tmp_path, monkeypatch, argv):
    monkeypatch.setenv("PUPPETRY_NETWORK", "deny")
    assert run(tmp_path, *argv) == EXIT_SAFETY


def test_deny_all_still_allows_simulation(tmp_path, monkeypatch):
    monkeypatch.setenv("PUPPETRY_NETWORK", "deny")
    assert run(tmp_path, "simulate", "--population", "20") == EXIT_OK


def test_module_entry_point(tmp_path):
    env = dict(os.environ, PUPPETRY_NETWORK="deny")
    proc = subprocess.run([sys.executable, "-m", "puppetry", "--out", str(tmp_path), "flood-demo"],
                          capture_output=True, text=True, env=env, timeout=60)
    assert proc.returncode == EXIT_SAFETY and "refused" in proc.stderr
