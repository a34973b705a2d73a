"""Wide-area path emulation: fixed one-way delay plus i.i.d. loss per direction."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import RandomStream, Simulator, bernoulli_threshold, ms

DEFAULT_MSS = 1448
# 52 B of IPv4/TCP headers with the timestamp option plus a 14 B Ethernet header.
DEFAULT_OVERHEAD = 66


class Direction(enum.IntEnum):
    FORWARD = 0  # sender -> receiver (data)
    REVERSE = 1  # receiver -> sender (acks)


class Kind(enum.IntEnum):
    DATA = 0
    ACK = 1


@dataclass(frozen=True)
class LinkConfig:
    rtt: int = ms(180)
    loss_probability: float = 0.0

    def __post_init__(self):
        if self.rtt <= 0 or self.rtt % 2:
            raise ValueError(f"rtt must be a positive even number of ns, got {self.rtt}")
        bernoulli_threshold(self.loss_probability)  # validates the range

    @property
    def one_way_delay(self) -> int:
        return self.rtt // 2


@dataclass(slots=True)
class Segment:
    """A data segment or an acknowledgment.

    ``ts_echo`` and ``echo_retransmission`` play the role of the TCP timestamp
    echo: an ACK carries the wire time of the data segment that triggered it
    and whether that segment was a retransmission.
    """

    flow_id: int
    kind: Kind
    seq_start: int = 0
    seq_end: int = 0
    ack_cum: int = 0
    sack_ranges: tuple[tuple[int, int], ...] = ()
    payload_bytes: int = 0
    wire_bytes: int = 0
    is_retransmission: bool = False
    sent_at: int | None = None
    ts_echo: int | None = None
    echo_retransmission: bool = False

    @classmethod
    def data(cls, flow_id, seq_start, seq_end, overhead=DEFAULT_OVERHEAD, retransmission=False):
        length = seq_end - seq_start
        return cls(flow_id, Kind.DATA, seq_start=seq_start, seq_end=seq_end,
                   payload_bytes=length, wire_bytes=length + overhead,
                   is_retransmission=retransmission)

    @classmethod
    def ack(cls, flow_id, ack_cum, sack_ranges=(), overhead=DEFAULT_OVERHEAD,
            ts_echo=None, echo_retransmission=False):
        return cls(flow_id, Kind.ACK, ack_cum=ack_cum, sack_ranges=tuple(sack_ranges),
                   wire_bytes=overhead, ts_echo=ts_echo,
                   echo_retransmission=echo_retransmission)


@dataclass
class DirectionStats:
    transmitted: int = 0
    delivered: int = 0
    dropped: int = 0
    dropped_first_transmissions: int = 0
    drops: list = field(default_factory=list)  # (time, flow_id, seq_start, retransmission)


class Link:
    """Emulated path.  One random stream serves both directions in call order."""

    def __init__(self, sim: Simulator, config: LinkConfig, stream: RandomStream, record_drops=False):
        self.sim = sim
        self.config = config
        self.stream = stream
        self.record_drops = record_drops
        self._threshold = bernoulli_threshold(config.loss_probability)
        self.stats = {Direction.FORWARD: DirectionStats(), Direction.REVERSE: DirectionStats()}

    def transmit(self, segment: Segment, direction: Direction, now: int, on_arrival, *args):
        """Send ``segment``; return the arrival time, or ``None`` if dropped.

        On survival ``on_arrival(segment, *args)`` is scheduled one one-way
        delay later.  Equal delays keep each direction FIFO.
        """
        stats = self.stats[direction]
        stats.transmitted += 1
        if (self.stream.next_u64() >> 11) < self._threshold:
            stats.dropped += 1
            if segment.kind == Kind.DATA and not segment.is_retransmission:
                stats.dropped_first_transmissions += 1
            if self.record_drops:
                stats.drops.append((now, segment.flow_id, segment.seq_start, segment.is_retransmission))
            return None
        stats.delivered += 1
        arrival = now + self.config.one_way_delay
        self.sim.schedule(arrival, on_arrival, segment, *args)
        return arrival
