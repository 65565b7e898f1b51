"""Experiment runner: ``puppetry <command>``.

Exit codes: 0 success, 1 run failure (timeout, failed check),
2 configuration error, 3 safety refusal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import multiprocessing
import signal
import sys
import threading
import time
from dataclasses import replace
from pathlib import Path
from typing import Any

from .calibration import (
    CalibrationError,
    CalibrationMissing,
    calibration_to_dict,
    effective_hashrate,
    load_calibration,
)
from .defense import EmptyTrace, PolicyConfig, analyze_log, write_verdicts
from .puppeteer import EventLog, Puppeteer, PuppeteerServer, read_event_log
from .safety import SafetyGate, SafetyRefusal, default_gate, gate_from_env, is_loopback, set_default_gate, split_target
from .servant import LiveOptions, Servant, run_servant, servant_process_main
from .simnet import (
    BaselineModel,
    ConfigError,
    Dist,
    empirical_crossover,
    crossover_time,
    gnuplot_script,
    load_sim_config,
    run_pair,
    write_report,
)
from .sink import CorsMode, dump_stats, start_sink
from .workloads import Flood, flood_run, measure_hashrate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SAFETY = 0, 1, 2, 3

log = logging.getLogger("puppetry")

DIGEST_SIZES = {"MD5": 16, "SHA256": 32}


class UsageError(ValueError):
    pass


def _emit(args: argparse.Namespace, name: str, report: dict[str, Any]) -> None:
    text = json.dumps(report, sort_keys=True, indent=2)
    print(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text + "\n", encoding="utf-8")


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    overrides: dict[str, Any] = {
        "seed": args.seed,
        "population": args.population,
        "effective_cores": args.effective_cores,
        "duration_s": args.duration_s,
        "push_grant_prob": args.push_grant_prob,
        "iframe_activation_rate": args.iframe_rate,
        "baseline_cores": args.baseline_cores,
        "sample_interval_s": args.sample_interval_s,
    }
    if args.visit_mean_s is not None:
        overrides["visit_duration"] = Dist("exponential", mean=args.visit_mean_s)
    cfg = load_sim_config(args.config, **overrides)
    if args.sw_time_cap_s is not None:
        base = cfg.policy or PolicyConfig()
        cfg = replace(cfg, policy=replace(base, sw_time_cap_ms=args.sw_time_cap_s * 1000.0))

    started = time.perf_counter()
    marionet, baseline = run_pair(cfg)
    elapsed = time.perf_counter() - started
    out = Path(args.out)
    write_report(marionet, out, "marionet")
    write_report(baseline, out, "baseline")
    crossover = empirical_crossover(marionet, baseline)
    closed = crossover_time(cfg.effective_cores, BaselineModel(cfg.baseline_cores), cfg.visit_duration.expected)
    (out / "plot.gp").write_text(gnuplot_script("marionet.csv", "baseline.csv", crossover_s=crossover),
                                 encoding="utf-8")
    summary = {
        "seed": cfg.seed,
        "config": marionet.config,
        "crossover_s": crossover,
        "crossover_closed_form_s": closed,
        "marionet_final_hashes": marionet.cum_hashes[-1],
        "baseline_final_hashes": baseline.cum_hashes[-1],
        "work_ratio": marionet.cum_hashes[-1] / baseline.cum_hashes[-1] if baseline.cum_hashes[-1] else None,
        "infections": marionet.infections,
        "reactivations_by_push": marionet.reactivations_by_push,
        "reactivations_by_iframe": marionet.reactivations_by_iframe,
        "terminations_by_cap": marionet.terminations_by_cap,
    }
    _emit(args, "summary.json", summary)
    log.info("simulated %d users x2 models in %.2f s", cfg.population, elapsed)
    return EXIT_OK


# -- crack-demo --------------------------------------------------------------


def _parse_digest(args: argparse.Namespace) -> bytes:
    algorithm = args.algorithm
    if args.plaintext is not None:
        return hashlib.new(algorithm.lower(), args.plaintext.encode("utf-8")).digest()
    if args.digest is None:
        raise UsageError("give --digest or --plaintext")
    try:
        digest = bytes.fromhex(args.digest)
    except ValueError:
        raise UsageError(f"digest {args.digest!r} is not hex") from None
    if len(digest) != DIGEST_SIZES[algorithm]:
        raise UsageError(f"{algorithm} digest must be {DIGEST_SIZES[algorithm]} bytes, got {len(digest)}")
    return digest


def cmd_crack_demo(args: argparse.Namespace) -> int:
    digest = _parse_digest(args)
    if args.servants < 1 or args.length < 1 or not args.alphabet:
        raise UsageError("need servants >= 1, length >= 1 and a non-empty alphabet")
    parts = args.parts or args.servants
    device = load_calibration(args.config).device(args.device)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "puppeteer.jsonl"
    job_id = "crack"

    with open(log_path, "w", encoding="utf-8") as fh:
        puppeteer = Puppeteer(heartbeat_interval_ms=args.heartbeat_ms, log_=EventLog(fh, keep=False))
        server = PuppeteerServer(puppeteer).start()
        host, port = server.address
        workers: list[Any] = []
        try:
            if args.threads:
                for i in range(args.servants):
                    servant = Servant(f"servant-{i}", device, scope=f"/servant-{i}/")
                    opts = LiveOptions(heartbeat_jitter=args.jitter, min_heartbeats=args.min_heartbeats,
                                       seed=args.seed * 1000 + i)
                    t = threading.Thread(target=run_servant, args=(host, port, servant, opts), daemon=True)
                    t.start()
                    workers.append(t)
            else:
                ctx = multiprocessing.get_context("spawn")
                for i in range(args.servants):
                    opts = LiveOptions(heartbeat_jitter=args.jitter, min_heartbeats=args.min_heartbeats,
                                       seed=args.seed * 1000 + i)
                    proc = ctx.Process(target=servant_process_main,
                                       args=(host, port, f"servant-{i}", device, opts), daemon=True)
                    proc.start()
                    workers.append(proc)

            deadline = time.monotonic() + args.timeout
            while len(puppeteer.servants) < args.servants:
                if time.monotonic() > deadline:
                    print("servants did not register in time", file=sys.stderr)
                    return EXIT_FAIL
                time.sleep(0.01)

            started = time.perf_counter()
            server.submit(lambda p, now: p.submit_crack(job_id, args.algorithm, digest, args.alphabet,
                                                        args.length, parts, now))
            job = server.wait_job(job_id, timeout=max(0.0, deadline - time.monotonic()))
            elapsed = time.perf_counter() - started
            if args.min_heartbeats:
                for w in workers:
                    w.join(timeout=max(0.1, deadline - time.monotonic()))
        finally:
            server.disconnect_all()
            for w in workers:
                w.join(timeout=5.0)
            server.stop()

    if job is None:
        print(f"job did not finish within {args.timeout} s", file=sys.stderr)
        return EXIT_FAIL
    report = {
        "seed": args.seed,
        "config": {"algorithm": args.algorithm, "digest": digest.hex(), "alphabet": args.alphabet,
                   "length": args.length, "parts": parts, "servants": args.servants,
                   "heartbeat_ms": args.heartbeat_ms, "jitter": args.jitter, "device": device.id,
                   "mode": "threads" if args.threads else "processes"},
        "status": job.status,
        "finding": job.finding,
        "elapsed_s": round(elapsed, 4),
        "throughput": {k: round(v, 1) for k, v in sorted(puppeteer.throughput().items())},
        "work_done": {k: r.work_done for k, r in sorted(puppeteer.servants.items())},
        "log": str(log_path),
    }
    _emit(args, "crack_report.json", report)
    return EXIT_OK


# -- flood-demo --------------------------------------------------------------


def cmd_flood_demo(args: argparse.Namespace) -> int:
    sink = None
    if args.target is not None:
        host, port, path = split_target(args.target)
        if args.i_am_isolated and not is_loopback(host):
            gate = default_gate()
            set_default_gate(SafetyGate(gate.allow_loopback, gate.allowlist | {host}))
        default_gate().check(host, port)
    else:
        sink = start_sink(("127.0.0.1", 0), CorsMode(args.cors))
        host, port = sink.address
        path = "/"
    try:
        task = Flood(f"{host}:{port}", path=path, method=args.method, duration_ms=int(args.duration_s * 1000),
                     max_concurrency=args.concurrency, rate_cap=args.rate_cap, hold_open=args.hold_open,
                     trickle_interval_ms=args.trickle_ms)
        if sink is not None and args.hold_open:
            gauge = _watch_peak(sink, args.duration_s)
        stats = flood_run(task, drain_ms=args.drain_ms)
        sink_stats = sink.stats() if sink is not None else None
    finally:
        if sink is not None:
            sink.stop()

    report: dict[str, Any] = {
        "seed": args.seed,
        "config": {"target": f"{host}:{port}{path}", "rate_cap": args.rate_cap, "duration_s": args.duration_s,
                   "concurrency": args.concurrency, "method": args.method, "hold_open": args.hold_open},
        "flood": stats.to_dict(),
    }
    ok = stats.attempted == stats.completed + stats.failed + stats.in_flight_at_deadline
    if args.rate_cap is not None:
        ok = ok and stats.achieved_rate <= args.rate_cap
    if sink_stats is not None:
        report["sink"] = sink_stats.to_dict()
        if args.hold_open:
            report["sink_peak_connections"] = gauge["peak"]
            ok = ok and gauge["peak"] >= args.concurrency
        else:
            ok = ok and sink_stats.total_requests == stats.attempted
    report["conservation_ok"] = ok
    _emit(args, "flood_report.json", report)
    return EXIT_OK if ok else EXIT_FAIL


def _watch_peak(sink, duration_s: float) -> dict[str, int]:
    """Sample the sink's open-connection gauge while a flood runs."""
    gauge = {"peak": 0}

    def watch() -> None:
        end = time.monotonic() + duration_s
        while time.monotonic() < end:
            gauge["peak"] = max(gauge["peak"], sink.stats().open_connections)
            time.sleep(0.01)

    threading.Thread(target=watch, daemon=True).start()
    return gauge


# -- sink --------------------------------------------------------------------


def cmd_sink(args: argparse.Namespace) -> int:
    host, _, port = args.bind.rpartition(":")
    if not port.isdigit():
        raise UsageError(f"--bind {args.bind!r} is not host:port")
    handle = start_sink((host, int(port)), CorsMode(args.cors))
    print(f"sink listening on {handle.address[0]}:{handle.address[1]} (cors={args.cors})", flush=True)
    stop = threading.Event()
    previous = signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait(args.duration_s)
    except KeyboardInterrupt:
        pass
    finally:
        signal.signal(signal.SIGTERM, previous)
        stats = handle.stop()
    text = dump_stats(stats)
    if args.stats_file:
        Path(args.stats_file).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# -- detect ------------------------------------------------------------------


def cmd_detect(args: argparse.Namespace) -> int:
    try:
        records = read_event_log(args.log)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.log}: not a JSONL event log ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise UsageError(f"{args.log}: {exc.strerror}") from None
    try:
        verdicts = analyze_log(records, args.cv_threshold, args.min_count)
    except EmptyTrace as exc:
        print(f"empty trace: {exc} ({args.log})", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "verdicts.jsonl", "w", encoding="utf-8") as fh:
        write_verdicts(verdicts, fh)
    write_verdicts(verdicts, sys.stdout)
    return EXIT_OK


# -- calibrate ---------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace) -> int:
    table = load_calibration(args.config)
    ratios = {}
    devs = {d.id: d for d in table.devices}
    brs = {b.name: b for b in table.browsers}
    if {"i7-4790", "i5-5200U"} <= devs.keys() and "Chrome" in brs:
        c = brs["Chrome"]
        ratios["i7-4790/i5-5200U"] = (effective_hashrate(devs["i7-4790"], c, 1.0, 1)
                                      / effective_hashrate(devs["i5-5200U"], c, 1.0, 1))
    if {"Firefox", "Chrome"} <= brs.keys() and devs:
        d = next(iter(devs.values()))
        ratios["Firefox/Chrome"] = (effective_hashrate(d, brs["Firefox"], 1.0, 1)
                                    / effective_hashrate(d, brs["Chrome"], 1.0, 1))
    if {"i7-4790K-power-saver", "i7-4790K-high-performance"} <= devs.keys() and "Chrome" in brs:
        c = brs["Chrome"]
        ratios["PowerSaver/HighPerformance"] = (effective_hashrate(devs["i7-4790K-power-saver"], c, 1.0, 1)
                                                / effective_hashrate(devs["i7-4790K-high-performance"], c, 1.0, 1))
    report: dict[str, Any] = {"seed": args.seed, "config": calibration_to_dict(table), "ratios": ratios}
    if args.measure:
        md5 = measure_hashrate("MD5", args.measure_ms)
        sha = measure_hashrate("SHA256", args.measure_ms)
        report["measured_hashrate"] = {"MD5": md5, "SHA256": sha, "md5_at_least_sha256": md5 >= sha}
    _emit(args, "calibration_report.json", report)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="puppetry", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default: config value or 0)")
    parser.add_argument("--config", default=None, help="simulation config (simulate) or calibration table")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="population simulation, MarioNet vs web-worker baseline")
    p.add_argument("--population", type=int)
    p.add_argument("--effective-cores", type=float)
    p.add_argument("--baseline-cores", type=int)
    p.add_argument("--duration-s", type=float, help="virtual duration")
    p.add_argument("--visit-mean-s", type=float)
    p.add_argument("--push-grant-prob", type=float)
    p.add_argument("--iframe-rate", type=float, help="iframe activations per hour")
    p.add_argument("--sw-time-cap-s", type=float, help="enable the service worker time cap policy")
    p.add_argument("--sample-interval-s", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("crack-demo", help="distributed preimage search over loopback")
    p.add_argument("--digest", help="hex digest to invert")
    p.add_argument("--plaintext", help="derive the digest from this string instead")
    p.add_argument("--algorithm", choices=sorted(DIGEST_SIZES), default="SHA256")
    p.add_argument("--alphabet", default="abcdefghijklmnopqrstuvwxyz")
    p.add_argument("--length", type=int, default=4)
    p.add_argument("--parts", type=int, default=None, help="keyspace partitions (default: one per servant)")
    p.add_argument("--servants", type=int, default=4)
    p.add_argument("--device", default="i7-4790")
    p.add_argument("--heartbeat-ms", type=int, default=1000)
    p.add_argument("--jitter", type=float, default=0.0, help="heartbeat jitter fraction, e.g. 0.2")
    p.add_argument("--min-heartbeats", type=int, default=0)
    p.add_argument("--threads", action="store_true", help="run servants as threads instead of processes")
    p.add_argument("--timeout", type=float, default=120.0)
    p.set_defaults(func=cmd_crack_demo)

    p = sub.add_parser("flood-demo", help="rate-capped request flood against a local sink")
    p.add_argument("--target", help="host:port[/path]; default is a fresh loopback sink")
    p.add_argument("--rate-cap", type=float, default=500.0)
    p.add_argument("--duration-s", type=float, default=5.0)
    p.add_argument("--concurrency", type=int, default=16)
    p.add_argument("--method", default="OPTIONS")
    p.add_argument("--hold-open", action="store_true", help="keep connections open with partial requests")
    p.add_argument("--trickle-ms", type=int, default=10_000)
    p.add_argument("--drain-ms", type=float, default=5000.0)
    p.add_argument("--cors", choices=[m.value for m in CorsMode], default="allow")
    p.add_argument("--i-am-isolated", action="store_true",
                   help="allow a non-loopback --target (isolated lab networks only)")
    p.set_defaults(func=cmd_flood_demo)

    p = sub.add_parser("sink", help="run the loopback HTTP sink")
    p.add_argument("--bind", default="127.0.0.1:8088")
    p.add_argument("--cors", choices=[m.value for m in CorsMode], default="allow")
    p.add_argument("--stats-file")
    p.add_argument("--duration-s", type=float, default=None, help="stop after this long")
    p.set_defaults(func=cmd_sink)

    p = sub.add_parser("detect", help="beacon detection over a puppeteer event log")
    p.add_argument("log")
    p.add_argument("--cv-threshold", type=float, default=0.1)
    p.add_argument("--min-count", type=int, default=10)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", help="show calibration ratios, optionally measure local hash rates")
    p.add_argument("--measure", action="store_true")
    p.add_argument("--measure-ms", type=float, default=500.0)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = set_default_gate(gate_from_env())
    if args.seed is None and args.command != "simulate":
        args.seed = 0
    try:
        return args.func(args)
    except SafetyRefusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_SAFETY
    except (ConfigError, CalibrationError, CalibrationMissing, UsageError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    finally:
        set_default_gate(previous)


if __name__ == "__main__":
    sys.exit(main())
