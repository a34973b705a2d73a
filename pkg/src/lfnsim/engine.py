"""Network description shared by both simulation engines, plus the dispatcher.

A :class:`NetworkSpec` fully determines a run: one sender host shaped by HTB,
a lossy fixed-delay path, and a set of flows that start and stop at fixed
times.  :func:`simulate` runs it on the compiled array kernel (default) or on
the object-oriented reference engine; both produce identical results.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import seconds
from .htb import DEFAULT_QUEUE_LIMIT, PolicyTable, TrafficType, default_policy
from .link import DEFAULT_MSS, DEFAULT_OVERHEAD, LinkConfig
from .transport import CcMode, RtoPolicyConfig

N_CLASSES = len(TrafficType)


class TraceKind(enum.IntEnum):
    SEND = 0        # data segment leaves the scheduler onto the path
    DATA_DROP = 1   # data segment lost on the forward path
    RECV = 2        # data segment reaches the receiver
    ACK = 3         # acknowledgment reaches the sender (seq = cumulative ack)
    ACK_DROP = 4    # acknowledgment lost on the reverse path
    RTO = 5         # retransmission timer expiry (seq = retransmitted segment)

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class FlowSpec:
    traffic_type: TrafficType
    start: int = 0
    stop: int | None = None      # greedy sources stop producing new data here
    size: int | None = None      # bytes; None means a greedy (unbounded) source
    cc_mode: CcMode = CcMode.FIXED
    rto: RtoPolicyConfig = field(default_factory=RtoPolicyConfig)

    def __post_init__(self):
        object.__setattr__(self, "traffic_type", TrafficType.parse(self.traffic_type))
        object.__setattr__(self, "cc_mode", CcMode(self.cc_mode))
        if self.size is not None and self.size <= 0:
            raise ValueError("flow size must be positive")
        if self.start < 0 or (self.stop is not None and self.stop < self.start):
            raise ValueError("flow must start at t >= 0 and stop after it starts")


@dataclass(frozen=True)
class NetworkSpec:
    flows: tuple
    link: LinkConfig = field(default_factory=LinkConfig)
    policy: PolicyTable = field(default_factory=default_policy)
    mss: int = DEFAULT_MSS
    overhead: int = DEFAULT_OVERHEAD
    queue_limit: int = DEFAULT_QUEUE_LIMIT
    seed: int = 1
    stream_id: int = 0
    t_end: int = seconds(60)
    bin_ns: int = 0              # 0 disables throughput binning
    stop_when_complete: bool = False
    trace: bool = False

    def __post_init__(self):
        object.__setattr__(self, "flows", tuple(self.flows))
        if self.mss <= 0 or self.overhead < 0:
            raise ValueError("mss must be positive and overhead non-negative")
        if self.queue_limit <= 0:
            raise ValueError("queue_limit must be positive")
        if self.bin_ns < 0:
            raise ValueError("bin width must be non-negative")

    @property
    def nbins(self) -> int:
        return -(-self.t_end // self.bin_ns) if self.bin_ns else 0


@dataclass
class FlowResult:
    traffic_type: TrafficType
    size: int | None
    first_send: int | None = None
    box_end: int | None = None
    complete_at: int | None = None
    completion_echo: int | None = None
    completion_echo_retx: bool = False
    packets_sent: int = 0
    retransmissions: int = 0
    first_tx_lost: int = 0
    data_lost: int = 0
    acks_lost: int = 0
    duplicates: int = 0
    timeouts: int = 0
    delivered_bytes: int = 0
    max_in_flight: int = 0
    cwnd_min: int = 0
    cwnd_max: int = 0

    @property
    def complete(self) -> bool:
        return self.complete_at is not None


@dataclass
class SimResult:
    flows: list
    bins: np.ndarray            # [nbins, N_CLASSES] wire bytes received per bin
    trace: list                 # (time, TraceKind, flow, seq_start, retransmission)
    end_time: int
    events: int
    scheduler_drops: int

    def equivalent(self, other: "SimResult") -> bool:
        return (self.flows == other.flows and np.array_equal(self.bins, other.bins)
                and self.trace == other.trace and self.end_time == other.end_time
                and self.scheduler_drops == other.scheduler_drops)


def simulate(spec: NetworkSpec, engine: str = "kernel") -> SimResult:
    if engine == "kernel":
        from .kernel import run_kernel
        return run_kernel(spec)
    if engine == "reference":
        from .reference import run_reference
        return run_reference(spec)
    raise ValueError(f"unknown engine {engine!r}")
