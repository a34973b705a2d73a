"""Experiment drivers: single transfers, Monte Carlo sweeps and the policy timeline."""
from __future__ import annotations

import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig
from .core import NS_PER_S, seconds, to_seconds
from .engine import FlowSpec, NetworkSpec, SimResult, simulate
from .htb import PolicyError, PolicyTable, TrafficType
from .transport import RtoPolicyConfig

TRANSFER_CAP = seconds(60)
CROSSTALK_FILE_BYTES = 128_003_200
TIMELINE_TAIL = seconds(2)


class TransferTimeout(RuntimeError):
    """A bounded transfer did not finish inside the simulated cap."""


class TimelineError(ValueError):
    pass


# --- records --------------------------------------------------------------------

@dataclass(frozen=True)
class TransferRecord:
    run_id: str
    loss: float
    n_time: float
    box_width: float
    retrans_tail: float
    true_transfer: float
    packets_sent: int
    packets_lost: int
    retransmissions: int
    spurious_retransmissions: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StatsSummary:
    min: float
    max: float
    median: float
    mean: float
    stddev: float
    three_sigma: float
    sample_count: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(samples) -> StatsSummary:
    values = sorted(float(v) for v in samples)
    if not values:
        raise ValueError("cannot summarize an empty sample")
    mean = statistics.mean(values)
    stddev = statistics.stdev(values) if len(values) > 1 else 0.0
    return StatsSummary(values[0], values[-1], values[(len(values) - 1) // 2], mean, stddev,
                        mean + 3 * stddev, len(values))


# --- single transfer ------------------------------------------------------------

def transfer_spec(cfg: RunConfig, stream_id: int = 0, trace: bool = False) -> NetworkSpec:
    flow = FlowSpec(TrafficType.CROSSTALK, size=cfg.size_bytes, cc_mode=cfg.cc_mode,
                    rto=RtoPolicyConfig(mode=cfg.rto_mode))
    return NetworkSpec(flows=(flow,), link=cfg.link(), policy=cfg.policy(), mss=cfg.mss,
                       overhead=cfg.overhead_bytes, seed=cfg.seed, stream_id=stream_id,
                       t_end=TRANSFER_CAP, stop_when_complete=True, trace=trace)


def measure(result: SimResult, cfg: RunConfig, run_id: str) -> TransferRecord:
    """Timing decomposition of the (single) bounded flow in ``result``."""
    r = result.flows[0]
    if not r.complete:
        raise TransferTimeout(f"{run_id}: transfer incomplete after {to_seconds(TRANSFER_CAP):g} s")
    rtt = cfg.rtt_ns
    n_time = r.complete_at - r.first_send
    box_width = r.box_end - (r.first_send + rtt)
    # The final cumulative ACK echoes the send time of the segment that closed
    # the last hole; when that was a retransmission, it marks the tail's end.
    tail = max(0, r.completion_echo - r.box_end) if r.completion_echo_retx else 0
    true_transfer = box_width + tail + rtt // 2
    return TransferRecord(run_id, cfg.loss, to_seconds(n_time), to_seconds(box_width),
                          to_seconds(tail), to_seconds(true_transfer), r.packets_sent,
                          r.first_tx_lost, r.retransmissions, r.duplicates)


def run_transfer(cfg: RunConfig, stream_id: int = 0, run_id: str | None = None,
                 engine: str = "kernel") -> TransferRecord:
    result = simulate(transfer_spec(cfg, stream_id), engine)
    return measure(result, cfg, run_id or _run_id(cfg, stream_id))


def trace_transfer(cfg: RunConfig, stream_id: int = 0, engine: str = "kernel"):
    """Returns ``(TransferRecord, SimResult)`` with the per-packet trace filled in."""
    result = simulate(transfer_spec(cfg, stream_id, trace=True), engine)
    return measure(result, cfg, _run_id(cfg, stream_id)), result


def _run_id(cfg: RunConfig, stream_id: int) -> str:
    return f"loss{cfg.loss:g}-{cfg.rto_mode.value}-seed{cfg.seed}-s{stream_id}"


# --- Monte Carlo ----------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloResult:
    records: tuple
    n_time: StatsSummary
    true_transfer: StatsSummary


def run_monte_carlo(cfg: RunConfig, samples: int | None = None,
                    workers: int | None = None) -> MonteCarloResult:
    """Independent transfers with ``stream_id`` = sample index 0..samples-1."""
    n = cfg.samples if samples is None else samples
    if n < 2:
        raise ValueError("a Monte Carlo run needs at least two samples")
    workers = workers or os.cpu_count() or 1
    if workers == 1:
        records = [run_transfer(cfg, i) for i in range(n)]
    else:
        # the compiled kernel releases the GIL, so threads run it in parallel
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(lambda i: run_transfer(cfg, i), range(n)))
    return MonteCarloResult(tuple(records), summarize(r.n_time for r in records),
                            summarize(r.true_transfer for r in records))


# --- policy timeline ------------------------------------------------------------

@dataclass(frozen=True)
class TimelineEvent:
    at: float                   # seconds from run start
    action: str                 # "start" | "end"
    traffic_type: TrafficType

    def __post_init__(self):
        object.__setattr__(self, "traffic_type", TrafficType.parse(self.traffic_type))
        if self.action not in ("start", "end"):
            raise TimelineError(f"unknown timeline action {self.action!r}")
        if not (math.isfinite(self.at) and self.at >= 0):
            raise TimelineError(f"bad event time {self.at!r}")


_DEFAULT_TIMELINE = [
    (0.4, "start", "efd"), (3.4, "start", "adhoc"), (6.4, "start", "catchup"),
    (9.4, "start", "interactive"), (12.4, "start", "xtalk"), (14.2, "start", "raw"),
    (14.8, "end", "xtalk"), (15.5, "end", "interactive"), (17.2, "end", "raw"),
    (19.2, "end", "catchup"), (21.4, "start", "xtalk"), (21.4, "start", "interactive"),
    (23.2, "start", "raw"), (23.8, "end", "xtalk"), (26.4, "end", "raw"),
    (27.5, "end", "interactive"),
]


def default_timeline() -> list:
    return [TimelineEvent(*row) for row in _DEFAULT_TIMELINE]


def timeline_from_rows(rows) -> list:
    if not isinstance(rows, list):
        raise TimelineError("timeline must be a list of events")
    events = []
    for row in rows:
        try:
            events.append(TimelineEvent(float(row["at"]), str(row["action"]),
                                        row.get("type", row.get("traffic_type"))))
        except (KeyError, TypeError, ValueError, PolicyError) as exc:
            raise TimelineError(f"bad timeline entry {row!r}: {exc}") from None
    return events


def load_timeline(path) -> list:
    with open(Path(path)) as fh:
        data = yaml.safe_load(fh)
    if isinstance(data, dict):
        data = data.get("events")
    return timeline_from_rows(data)


def timeline_flows(timeline, cfg: RunConfig) -> tuple:
    """Crosstalk starts become bounded file transfers; every other start opens a
    greedy source that stops producing at the matching end marker."""
    times = [e.at for e in timeline]
    if times != sorted(times):
        raise TimelineError("timeline must be sorted by time")
    rto = RtoPolicyConfig(mode=cfg.rto_mode)
    open_since = {}
    flows = []
    for e in timeline:
        t = e.traffic_type
        at = round(e.at * NS_PER_S)
        if e.action == "start":
            if t in open_since:
                raise TimelineError(f"{t.label} started at {e.at} s while already active")
            open_since[t] = len(flows)
            size = CROSSTALK_FILE_BYTES if t is TrafficType.CROSSTALK else None
            flows.append(FlowSpec(t, start=at, size=size, cc_mode=cfg.cc_mode, rto=rto))
        else:
            if t not in open_since:
                raise TimelineError(f"{t.label} ended at {e.at} s without being active")
            idx = open_since.pop(t)
            if t is not TrafficType.CROSSTALK:  # a file transfer ends when it completes
                f = flows[idx]
                flows[idx] = FlowSpec(t, start=f.start, stop=at, cc_mode=f.cc_mode, rto=rto)
    return tuple(flows)


@dataclass(frozen=True)
class ThroughputSample:
    run_id: str
    bin_start_s: float
    traffic_type: TrafficType
    mbps: float


@dataclass(frozen=True)
class TimelineResult:
    samples: list               # ThroughputSample, bin-major then class order
    delivered_bytes: dict       # TrafficType -> payload bytes delivered in order
    wire_bytes: dict            # TrafficType -> wire bytes received
    result: SimResult

    def series(self, traffic_type) -> list:
        t = TrafficType.parse(traffic_type)
        return [s.mbps for s in self.samples if s.traffic_type is t]


def run_timeline(policy: PolicyTable | None = None, timeline=None, cfg: RunConfig | None = None,
                 run_id: str = "timeline", duration: int | None = None,
                 engine: str = "kernel") -> TimelineResult:
    """Replays ``timeline`` and bins received wire bits per class.

    ``duration`` (ns) defaults to two seconds past the last event.
    """
    cfg = cfg or RunConfig()
    policy = policy if policy is not None else cfg.policy()
    timeline = default_timeline() if timeline is None else list(timeline)
    flows = timeline_flows(timeline, cfg)
    if duration is None:
        duration = round(max((e.at for e in timeline), default=0.0) * NS_PER_S) + TIMELINE_TAIL
    bin_ns = cfg.bin_ns
    duration = max(bin_ns, -(-duration // bin_ns) * bin_ns)
    spec = NetworkSpec(flows=flows, link=cfg.link(), policy=policy, mss=cfg.mss,
                       overhead=cfg.overhead_bytes, seed=cfg.seed, t_end=duration, bin_ns=bin_ns)
    result = simulate(spec, engine)
    scale = NS_PER_S / bin_ns * 8 / 1e6
    samples = [ThroughputSample(run_id, to_seconds(b * bin_ns), t, float(result.bins[b, t]) * scale)
               for b in range(result.bins.shape[0]) for t in TrafficType]
    delivered = {t: 0 for t in TrafficType}
    for r in result.flows:
        delivered[r.traffic_type] += r.delivered_bytes
    wire = {t: int(result.bins[:, t].sum()) for t in TrafficType}
    return TimelineResult(samples, delivered, wire, result)


__all__ = [
    "ConfigError", "MonteCarloResult", "StatsSummary", "ThroughputSample", "TimelineError",
    "TimelineEvent", "TimelineResult", "TransferRecord", "TransferTimeout", "default_timeline",
    "load_timeline", "measure", "run_monte_carlo", "run_timeline", "run_transfer", "summarize",
    "timeline_flows", "trace_transfer", "transfer_spec",
]
