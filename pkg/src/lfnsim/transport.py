"""Reliable byte-stream transport: SACK sender/receiver with pluggable policies.

The sender counts in whole segments internally (segment ``i`` covers bytes
``[i*mss, min((i+1)*mss, total))``) and speaks bytes on the wire.

Congestion control is either ``fixed`` (window pinned at 99999 segments from
the first packet) or ``reno`` (a textbook baseline kept for comparison).  The
retransmission timer follows RFC 2988; in ``accelerated`` mode the timer is
replaced by a flat 50 ms while fewer than 100 segments are in flight and a
flat 185 ms below 6800, without exponential backoff.
"""
from __future__ import annotations

import enum
import math
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass

from .core import ms, seconds
from .link import DEFAULT_MSS, DEFAULT_OVERHEAD, Kind, Segment

FIXED_CWND = 99_999
RENO_INITIAL_CWND = 10
RWND_SEGMENTS = 99_999
# Largest window a peer can advertise before window scaling is in effect.
HANDSHAKE_WINDOW = 65_535
DUPTHRESH = 3
MAX_SACK_BLOCKS = 3
_MAX_BACKOFF_EXPONENT = 40
_HUGE = 1 << 62


class CcMode(str, enum.Enum):
    FIXED = "fixed"
    RENO = "reno"


class RtoMode(str, enum.Enum):
    RFC2988 = "rfc2988"
    ACCELERATED = "accelerated"


class ProtocolViolation(RuntimeError):
    """An acknowledgment referenced bytes that were never sent."""


class TimerError(RuntimeError):
    """The retransmission timer fired with nothing outstanding."""


class Action(str, enum.Enum):
    RETRANSMIT = "retransmit-enqueue"
    REARM = "timer-rearm"
    DISARM = "timer-disarm"
    COMPLETE = "transfer-complete"


@dataclass(frozen=True)
class RtoPolicyConfig:
    mode: RtoMode = RtoMode.ACCELERATED
    tail_threshold_small: int = 100
    tail_rto_small: int = ms(50)
    tail_threshold_large: int = 6800
    tail_rto_large: int = ms(185)
    min_rto: int = ms(200)
    max_rto: int = seconds(120)
    clock_granularity: int = ms(1)
    initial_rto: int = seconds(3)

    def __post_init__(self):
        object.__setattr__(self, "mode", RtoMode(self.mode))
        if not 0 < self.tail_threshold_small < self.tail_threshold_large:
            raise ValueError("need 0 < tail_threshold_small < tail_threshold_large")
        if not 0 < self.tail_rto_small < self.tail_rto_large:
            raise ValueError("need 0 < tail_rto_small < tail_rto_large")
        if not 0 < self.min_rto <= self.max_rto:
            raise ValueError("need 0 < min_rto <= max_rto")


def rto_update(srtt: float | None, rttvar: float | None, sample: int, cfg: RtoPolicyConfig):
    """One RFC 2988 estimator step; all quantities are nanoseconds.

    Returns ``(srtt, rttvar, rto)``.  ``srtt is None`` means no sample yet.
    """
    r = float(sample)
    if srtt is None:
        srtt = r
        rttvar = r / 2.0
    else:
        rttvar = 0.75 * rttvar + 0.25 * abs(srtt - r)
        srtt = 0.875 * srtt + 0.125 * r
    rto = srtt + max(float(cfg.clock_granularity), 4.0 * rttvar)
    rto = min(max(rto, float(cfg.min_rto)), float(cfg.max_rto))
    return srtt, rttvar, rto


class _SegState:
    __slots__ = ("sent_at", "retx_count", "lost", "pending")

    def __init__(self):
        self.sent_at = None
        self.retx_count = 0
        self.lost = False
        self.pending = False


class Sender:
    """Sliding-window sender for one flow.

    ``total`` is the transfer size in bytes, or ``None`` for a source that
    produces data until :meth:`stop` is called.
    """

    def __init__(self, flow_id, total: int | None, cc_mode=CcMode.FIXED,
                 rto: RtoPolicyConfig | None = None, mss: int = DEFAULT_MSS,
                 overhead: int = DEFAULT_OVERHEAD):
        if total is not None and total <= 0:
            raise ValueError("transfer size must be positive")
        if mss <= 0:
            raise ValueError("mss must be positive")
        self.flow_id = flow_id
        self.total = total
        self.mss = mss
        self.overhead = overhead
        self.nseg = None if total is None else -(-total // mss)
        self.cc_mode = CcMode(cc_mode)
        self.rto_cfg = rto or RtoPolicyConfig()

        self.next_seg = 0
        self.una = 0
        self.in_flight: dict[int, _SegState] = {}
        self.scoreboard: list[list[int]] = []  # SACKed segment ranges [a, b)
        self.retx_queue: deque[int] = deque()
        # retransmissions in send order: (segment, next_seg when sent, retx_count)
        self.retx_watch: deque[tuple[int, int, int]] = deque()
        self.rto_slot: int | None = None
        self.lost_ptr = 0

        if self.cc_mode is CcMode.FIXED:
            self.cwnd = FIXED_CWND
        else:
            self.cwnd = RENO_INITIAL_CWND
        self.ssthresh = _HUGE
        self.cwnd_cnt = 0
        self.in_recovery = False
        self.recover = 0
        self.rwnd_bytes = RWND_SEGMENTS * mss

        self.srtt: float | None = None
        self.rttvar: float | None = None
        self.rto = float(min(max(self.rto_cfg.initial_rto, self.rto_cfg.min_rto), self.rto_cfg.max_rto))
        self.rto_backoff_count = 0
        self.timer_armed_at: int | None = None

        self.cap_lifted = False
        self.stopped = False
        self.complete = False
        self.first_send_at: int | None = None
        self.box_end_at: int | None = None
        self.complete_at: int | None = None
        self.completion_echo: int | None = None
        self.completion_echo_retx = False

        self.packets_sent = 0
        self.retransmissions = 0
        self.timeouts = 0
        self.rtt_samples = 0

    # byte/segment helpers ----------------------------------------------------
    def seg_start(self, i: int) -> int:
        return i * self.mss

    def seg_end(self, i: int) -> int:
        end = (i + 1) * self.mss
        return end if self.total is None else min(end, self.total)

    def _byte_to_seg(self, b: int) -> int:
        if self.total is not None and b >= self.total:
            return self.nseg
        return b // self.mss

    @property
    def next_seq(self) -> int:
        return self.seg_start(self.next_seg) if self.nseg is None or self.next_seg < self.nseg else self.total

    @property
    def cum_acked(self) -> int:
        return self.seg_start(self.una) if self.nseg is None or self.una < self.nseg else self.total

    @property
    def packets_in_flight(self) -> int:
        return len(self.in_flight)

    @property
    def bytes_total(self):
        return self.total

    def stop(self) -> None:
        """No new data after this point; outstanding data is still recovered."""
        self.stopped = True

    def lift_handshake_cap(self) -> None:
        self.cap_lifted = True

    # timer -------------------------------------------------------------------
    def update_rto(self, sample: int):
        self.srtt, self.rttvar, self.rto = rto_update(self.srtt, self.rttvar, sample, self.rto_cfg)
        self.rtt_samples += 1
        return self.srtt, self.rttvar, self.rto

    def _backed_off(self) -> int:
        exp = min(self.rto_backoff_count, _MAX_BACKOFF_EXPONENT)
        return int(min(math.ldexp(self.rto, exp), float(self.rto_cfg.max_rto)))

    def _in_tail_branch(self) -> bool:
        # The flat timers replace the estimator's output, so they only apply
        # once the estimator has produced one (the initial RTO stands before).
        return (self.rto_cfg.mode is RtoMode.ACCELERATED and self.srtt is not None
                and len(self.in_flight) < self.rto_cfg.tail_threshold_large)

    def effective_rto(self) -> int:
        if self._in_tail_branch():
            if len(self.in_flight) < self.rto_cfg.tail_threshold_small:
                return self.rto_cfg.tail_rto_small
            return self.rto_cfg.tail_rto_large
        return self._backed_off()

    @property
    def timer_deadline(self) -> int | None:
        """Expiry of the retransmission timer under the current state.

        The timer runs from the moment it was (re)armed; its length is the
        current :meth:`effective_rto`, so it tracks the in-flight count.
        """
        if self.timer_armed_at is None:
            return None
        return self.timer_armed_at + self.effective_rto()

    # sending -----------------------------------------------------------------
    def on_send_opportunity(self, now: int) -> Segment | None:
        """Next segment to hand to the scheduler, retransmissions first."""
        if self.complete:
            return None
        idx = None
        if self.rto_slot is not None:
            i, self.rto_slot = self.rto_slot, None
            st = self.in_flight.get(i)
            if st is not None and st.pending:
                idx = i
        while idx is None and self.retx_queue:
            i = self.retx_queue.popleft()
            st = self.in_flight.get(i)
            if st is not None and st.pending:
                idx = i
        if idx is not None:
            st.pending = False
            st.retx_count += 1
            self.retx_watch.append((idx, self.next_seg, st.retx_count))
            retx = True
        else:
            if self.stopped or (self.nseg is not None and self.next_seg >= self.nseg):
                return None
            if len(self.in_flight) >= self.cwnd:
                return None
            window = self.rwnd_bytes if self.cap_lifted else HANDSHAKE_WINDOW
            if self.seg_end(self.next_seg) - self.una * self.mss > window:
                return None
            idx = self.next_seg
            self.next_seg += 1
            self.in_flight[idx] = _SegState()
            retx = False
        if self.timer_armed_at is None:
            self.timer_armed_at = now
        return Segment.data(self.flow_id, self.seg_start(idx), self.seg_end(idx),
                            self.overhead, retransmission=retx)

    def on_transmit(self, segment: Segment, now: int) -> bool:
        """Record that ``segment`` left the scheduler at ``now``.

        Returns True for the very first data transmission of the connection.
        """
        segment.sent_at = now
        st = self.in_flight.get(segment.seq_start // self.mss)
        if st is not None:
            st.sent_at = now
        self.packets_sent += 1
        if segment.is_retransmission:
            self.retransmissions += 1
        elif self.total is not None and segment.seq_end == self.total:
            self.box_end_at = now
        if self.first_send_at is None:
            self.first_send_at = now
            return True
        return False

    # acknowledgments ---------------------------------------------------------
    def _sack_insert(self, a: int, b: int) -> list[int]:
        """Merge ``[a, b)`` into the scoreboard; return the newly covered segments."""
        a = max(a, self.una)
        if a >= b:
            return []
        new, out = [], []
        cur, lo, hi, placed = a, a, b, False
        for s, e in self.scoreboard:
            if e < a:
                out.append([s, e])
                continue
            if s > b:
                if not placed:
                    out.append([lo, hi])
                    placed = True
                out.append([s, e])
                continue
            if s > cur:
                new.extend(range(cur, min(s, b)))
            cur = max(cur, e)
            lo, hi = min(lo, s), max(hi, e)
        if cur < b:
            new.extend(range(cur, b))
        if not placed:
            out.append([lo, hi])
        self.scoreboard = out
        return new

    def _third_highest_sacked(self) -> int | None:
        need = DUPTHRESH
        for s, e in reversed(self.scoreboard):
            if e - s >= need:
                return e - need
            need -= e - s
        return None

    def _mark_losses(self) -> int:
        s3 = self._third_highest_sacked()
        if s3 is None:
            return 0
        marked = 0
        for i in range(max(self.lost_ptr, self.una), s3):
            st = self.in_flight.get(i)
            if st is not None and not st.lost:
                st.lost = True
                st.pending = True
                self.retx_queue.append(i)
                marked += 1
        self.lost_ptr = max(self.lost_ptr, s3)
        return marked + self._mark_lost_retransmissions(s3)

    def _mark_lost_retransmissions(self, s3: int) -> int:
        """A retransmission is lost once three segments first sent after it are SACKed."""
        marked = 0
        watch = self.retx_watch
        while watch:
            i, sent_before, count = watch[0]
            st = self.in_flight.get(i)
            live = st is not None and st.retx_count == count
            if live and sent_before > s3:
                break
            watch.popleft()
            if live and not st.pending:
                st.lost = True
                st.pending = True
                self.retx_queue.append(i)
                marked += 1
        return marked

    def on_ack(self, ack: Segment, now: int) -> list[Action]:
        if ack.kind != Kind.ACK:
            raise ValueError("on_ack expects an acknowledgment")
        if self.complete:
            return []
        if ack.ack_cum > self.next_seq or ack.ack_cum < 0:
            raise ProtocolViolation(f"flow {self.flow_id}: ack {ack.ack_cum} beyond sent {self.next_seq}")
        for a, b in ack.sack_ranges:
            if not ack.ack_cum <= a < b <= self.next_seq:
                raise ProtocolViolation(f"flow {self.flow_id}: bad SACK block [{a}, {b})")
        actions: list[Action] = []
        old_una = self.una
        ack_seg = self._byte_to_seg(ack.ack_cum)
        cum_advanced = ack_seg > self.una
        if cum_advanced:
            for i in range(self.una, ack_seg):
                self.in_flight.pop(i, None)
            self.una = ack_seg
            self.lost_ptr = max(self.lost_ptr, ack_seg)
            while self.scoreboard and self.scoreboard[0][1] <= ack_seg:
                self.scoreboard.pop(0)
            if self.scoreboard and self.scoreboard[0][0] < ack_seg:
                self.scoreboard[0][0] = ack_seg
            self.rto_backoff_count = 0
        newly_sacked = 0
        for a, b in ack.sack_ranges:
            for i in self._sack_insert(a // self.mss, self._byte_to_seg(b)):
                if self.in_flight.pop(i, None) is not None:
                    newly_sacked += 1
        if (cum_advanced or newly_sacked) and ack.ts_echo is not None and not ack.echo_retransmission:
            self.update_rto(now - ack.ts_echo)
        newly_lost = self._mark_losses()
        if newly_lost:
            actions.append(Action.RETRANSMIT)
        if self.cc_mode is CcMode.RENO:
            self._reno_on_ack(newly_lost, cum_advanced, ack_seg - old_una)

        if self.nseg is not None and self.una >= self.nseg:
            self.complete = True
            self.complete_at = now
            self.completion_echo = ack.ts_echo
            self.completion_echo_retx = ack.echo_retransmission
            self.timer_armed_at = None
            actions.append(Action.COMPLETE)
        elif cum_advanced:
            if self.in_flight:
                self.timer_armed_at = now
                actions.append(Action.REARM)
            else:
                self.timer_armed_at = None
                actions.append(Action.DISARM)
        return actions

    def _flight_size(self) -> int:
        """Segments sent but not cumulatively acknowledged."""
        return self.next_seg - self.una

    def _reno_on_ack(self, newly_lost: int, cum_advanced: bool, acked: int) -> None:
        if newly_lost and not self.in_recovery:
            self.ssthresh = max(self._flight_size() // 2, 2)
            self.cwnd = self.ssthresh
            self.cwnd_cnt = 0
            self.in_recovery = True
            self.recover = self.next_seg
        elif cum_advanced:
            if self.in_recovery and self.una >= self.recover:
                self.in_recovery = False
            if not self.in_recovery:
                if self.cwnd < self.ssthresh:
                    self.cwnd += acked
                else:
                    self.cwnd_cnt += acked
                    while self.cwnd_cnt >= self.cwnd:
                        self.cwnd_cnt -= self.cwnd
                        self.cwnd += 1

    def on_rto_timeout(self, now: int) -> list[Action]:
        if not self.in_flight:
            raise TimerError(f"flow {self.flow_id}: RTO fired with nothing in flight")
        head = self.in_flight.get(self.una)
        if head is None:
            raise TimerError(f"flow {self.flow_id}: head segment {self.una} not outstanding")
        head.pending = True
        self.rto_slot = self.una
        self.timeouts += 1
        if not self._in_tail_branch():
            self.rto_backoff_count += 1
        if self.cc_mode is CcMode.RENO:
            self.ssthresh = max(self._flight_size() // 2, 2)
            self.cwnd = 1
            self.cwnd_cnt = 0
            self.in_recovery = False
        self.timer_armed_at = now
        return [Action.RETRANSMIT, Action.REARM]


class Receiver:
    """Cumulative + selective acknowledgment generator for one flow."""

    def __init__(self, flow_id, total: int | None, mss: int = DEFAULT_MSS,
                 overhead: int = DEFAULT_OVERHEAD):
        self.flow_id = flow_id
        self.total = total
        self.mss = mss
        self.overhead = overhead
        self.delivered_seg = 0
        self.ranges: list[list[int]] = []  # out-of-order [a, b, stamp], segment units
        self._stamp = 0
        self.duplicate_count = 0
        self.segments_received = 0
        self.delivered_chunks = 0

    def _seg_to_byte(self, i: int) -> int:
        b = i * self.mss
        return b if self.total is None else min(b, self.total)

    @property
    def delivered(self) -> int:
        """Length of the contiguous prefix handed to the application."""
        return self._seg_to_byte(self.delivered_seg)

    @property
    def received_ranges(self) -> list[tuple[int, int]]:
        out = [(0, self.delivered)] if self.delivered_seg else []
        out += [(self._seg_to_byte(a), self._seg_to_byte(b)) for a, b, _ in self.ranges]
        return out

    def _has(self, i: int) -> bool:
        if i < self.delivered_seg:
            return True
        k = bisect_right(self.ranges, [i, _HUGE, _HUGE]) - 1
        return k >= 0 and self.ranges[k][0] <= i < self.ranges[k][1]

    def _insert(self, i: int) -> None:
        self._stamp += 1
        k = bisect_right(self.ranges, [i, _HUGE, _HUGE])
        left = self.ranges[k - 1] if k > 0 and self.ranges[k - 1][1] == i else None
        right = self.ranges[k] if k < len(self.ranges) and self.ranges[k][0] == i + 1 else None
        if left and right:
            left[1] = right[1]
            left[2] = self._stamp
            del self.ranges[k]
        elif left:
            left[1] = i + 1
            left[2] = self._stamp
        elif right:
            right[0] = i
            right[2] = self._stamp
        else:
            self.ranges.insert(k, [i, i + 1, self._stamp])

    def sack_blocks(self) -> list[tuple[int, int]]:
        newest = sorted(self.ranges, key=lambda r: -r[2])[:MAX_SACK_BLOCKS]
        return [(self._seg_to_byte(a), self._seg_to_byte(b)) for a, b, _ in newest]

    def on_data(self, segment: Segment, now: int) -> Segment:
        if segment.kind != Kind.DATA:
            raise ValueError("on_data expects a data segment")
        self.segments_received += 1
        i = segment.seq_start // self.mss
        if self._has(i):
            self.duplicate_count += 1
        elif i == self.delivered_seg:
            self.delivered_seg += 1
            if self.ranges and self.ranges[0][0] == self.delivered_seg:
                self.delivered_seg = self.ranges.pop(0)[1]
            self.delivered_chunks += 1
        else:
            self._insert(i)
        return Segment.ack(self.flow_id, self.delivered, self.sack_blocks(), self.overhead,
                           ts_echo=segment.sent_at,
                           echo_retransmission=segment.is_retransmission)


def open_connection(bytes_total: int, cc_mode=CcMode.FIXED, rto_mode=RtoMode.ACCELERATED,
                    mss: int = DEFAULT_MSS, flow_id=0, overhead: int = DEFAULT_OVERHEAD,
                    rto: RtoPolicyConfig | None = None):
    """Create a sender/receiver pair for a bounded transfer."""
    if bytes_total is None or bytes_total <= 0:
        raise ValueError("zero-size transfer")
    cfg = rto or RtoPolicyConfig(mode=RtoMode(rto_mode))
    if cfg.mode is not RtoMode(rto_mode):
        cfg = RtoPolicyConfig(**{**cfg.__dict__, "mode": RtoMode(rto_mode)})
    sender = Sender(flow_id, bytes_total, cc_mode, cfg, mss, overhead)
    return sender, Receiver(flow_id, bytes_total, mss, overhead)
