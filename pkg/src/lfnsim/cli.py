"""Command-line front end: ``lfnsim {transfer,sweep,scenario,trace}``.

Exit codes: 0 success, 2 configuration error, 3 simulated transfer timed out.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config_file, make_config
from .core import to_seconds
from .engine import TraceKind
from .htb import PolicyError, TrafficType
from .scenario import (TimelineError, TransferTimeout, default_timeline, load_timeline,
                       run_monte_carlo, run_timeline, run_transfer, trace_transfer)

EXIT_OK, EXIT_CONFIG, EXIT_TIMEOUT = 0, 2, 3
DEFAULT_LOSSES = (0.0, 0.00001, 0.0001, 0.001, 0.01)
STAT_FIELDS = ("min", "max", "median", "mean", "stddev", "three_sigma")
SWEEP_COLUMNS = (("loss", "rto_mode", "samples")
                 + tuple(f"n_time_{s}" for s in STAT_FIELDS)
                 + tuple(f"true_transfer_{s}" for s in STAT_FIELDS)
                 + ("packets_lost_mean", "diff_in_3_sigma"))
SCENARIO_COLUMNS = ("run_id", "bin_start_s", "class", "mbps")

log = logging.getLogger("lfnsim")


def _fmt(value: float) -> str:
    return f"{value:.6f}"


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh


# --- commands -------------------------------------------------------------------

def cmd_transfer(cfg: RunConfig, args) -> int:
    record = run_transfer(cfg, args.stream)
    with _output(cfg.out_path) as fh:
        json.dump(record.to_dict(), fh, indent=2)
        fh.write("\n")
    return EXIT_OK


def _parse_losses(text: str) -> list:
    try:
        losses = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad loss list {text!r}") from None
    if not losses:
        raise ConfigError("empty loss list")
    for loss in losses:
        RunConfig(loss=loss)  # validates the fraction
    return losses


def sweep_rows(cfg: RunConfig, losses, workers=None) -> list:
    """One row per (loss, RTO mode), accelerated first, as lists of strings."""
    rows = []
    for loss in losses:
        results = {}
        for mode in ("accelerated", "rfc2988"):
            log.info("sweep: loss %g, %s, %d samples", loss, mode, cfg.samples)
            results[mode] = run_monte_carlo(cfg.replace(loss=loss, rto_mode=mode), workers=workers)
        diff = results["accelerated"].n_time.three_sigma - results["rfc2988"].n_time.three_sigma
        for mode, mc in results.items():
            lost = sum(r.packets_lost for r in mc.records) / len(mc.records)
            rows.append([f"{loss:g}", mode, str(len(mc.records))]
                        + [_fmt(getattr(mc.n_time, s)) for s in STAT_FIELDS]
                        + [_fmt(getattr(mc.true_transfer, s)) for s in STAT_FIELDS]
                        + [_fmt(lost), _fmt(diff)])
    return rows


def cmd_sweep(cfg: RunConfig, args) -> int:
    losses = _parse_losses(args.losses)
    if cfg.samples < 2:
        raise ConfigError("a sweep needs at least two samples per loss level")
    rows = sweep_rows(cfg, losses, args.workers)
    with _output(cfg.out_path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)
    return EXIT_OK


def cmd_scenario(cfg: RunConfig, args) -> int:
    if cfg.timeline_path is not None:
        try:
            timeline = load_timeline(cfg.timeline_path)
        except OSError as exc:
            raise ConfigError(f"cannot read timeline file: {exc}") from None
    elif args.default_timeline:
        timeline = default_timeline()
    else:
        raise ConfigError("scenario needs --timeline FILE or --default-timeline")
    run_id = args.run_id or f"scenario-loss{cfg.loss:g}-seed{cfg.seed}"
    res = run_timeline(cfg.policy(), timeline, cfg, run_id=run_id)
    with _output(cfg.out_path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCENARIO_COLUMNS)
        for s in res.samples:
            writer.writerow([s.run_id, _fmt(s.bin_start_s), s.traffic_type.label, _fmt(s.mbps)])
    totals = {
        "run_id": run_id,
        "delivered_bytes": {t.label: res.delivered_bytes[t] for t in TrafficType},
        "wire_bytes": {t.label: res.wire_bytes[t] for t in TrafficType},
    }
    if cfg.out_path not in (None, "-"):
        out = Path(cfg.out_path)
        with open(out.with_name(f"{out.stem}_totals.json"), "w") as fh:
            json.dump(totals, fh, indent=2)
            fh.write("\n")
    else:
        log.info("totals: %s", json.dumps(totals))
    return EXIT_OK


def cmd_trace(cfg: RunConfig, args) -> int:
    record, result = trace_transfer(cfg, args.stream)
    with _output(cfg.out_path) as fh:
        for t, kind, flow, seq, retx in result.trace:
            event = "retransmit" if kind is TraceKind.SEND and retx else kind.label
            fh.write(json.dumps({"t": round(to_seconds(t), 9), "event": event, "flow": flow,
                                 "seq": seq, "retransmission": bool(retx)}) + "\n")
    log.info("trace: %s", json.dumps(record.to_dict()))
    return EXIT_OK


COMMANDS = {"transfer": cmd_transfer, "sweep": cmd_sweep, "scenario": cmd_scenario,
            "trace": cmd_trace}


# --- argument parsing ------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="YAML file with any of the settings below")
    p.add_argument("--rtt-ms", type=float, dest="rtt_ms")
    p.add_argument("--loss", type=float, help="loss probability as a fraction (0.01 = 1%%)")
    p.add_argument("--rate-mbps", type=float, dest="rate_mbps")
    p.add_argument("--mss", type=int)
    p.add_argument("--overhead-bytes", type=int, dest="overhead_bytes")
    p.add_argument("--size-bytes", type=int, dest="size_bytes")
    p.add_argument("--cc", choices=["fixed", "reno"], dest="cc_mode")
    p.add_argument("--rto", choices=["accelerated", "rfc2988"], dest="rto_mode")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--bin-ms", type=float, dest="bin_ms")
    p.add_argument("--policy", metavar="FILE", dest="policy_path")
    p.add_argument("--timeline", metavar="FILE", dest="timeline_path")
    p.add_argument("--out", metavar="PATH", dest="out_path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfnsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("transfer", help="one file transfer, TransferRecord as JSON")
    _add_common(p)
    p.add_argument("--stream", type=int, default=0, help="random stream id (sample index)")
    p = sub.add_parser("sweep", help="Monte Carlo statistics per loss level and RTO mode (CSV)")
    _add_common(p)
    p.add_argument("--losses", default=",".join(f"{x:g}" for x in DEFAULT_LOSSES))
    p.add_argument("--workers", type=int, default=None)
    p = sub.add_parser("scenario", help="policy timeline throughput series (CSV)")
    _add_common(p)
    p.add_argument("--default-timeline", action="store_true",
                   help="use the built-in benchmark timeline")
    p.add_argument("--run-id")
    p = sub.add_parser("trace", help="per-packet JSON-lines trace of one transfer")
    _add_common(p)
    p.add_argument("--stream", type=int, default=0)
    return parser


def config_from_args(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else None
    names = ("rtt_ms", "loss", "rate_mbps", "mss", "overhead_bytes", "size_bytes", "cc_mode",
             "rto_mode", "seed", "samples", "bin_ms", "policy_path", "timeline_path", "out_path")
    return make_config(file_values, **{n: getattr(args, n) for n in names})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, TimelineError, PolicyError) as exc:
        print(f"lfnsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TransferTimeout as exc:
        print(f"lfnsim: simulation timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
