"""Object-oriented engine built directly from the module-level state machines.

It is slow (pure Python objects per packet) but easy to audit; the compiled
kernel in :mod:`lfnsim.kernel` replays exactly the same event sequence and is
checked against this engine in the test suite.

Wiring, per flow:

* the sender keeps at most one segment queued in the scheduler (like Linux
  TCP small queues), so retransmissions decided late still go out promptly;
* the scheduler has a single pending wake-up event; after every enqueue and
  dequeue it is re-aimed at :meth:`HtbScheduler.next_dequeue_time`;
* each flow has one pending timer event tagged with a generation number; it
  is only moved when the sender's deadline becomes earlier, and a timer that
  fires before the current deadline simply re-arms itself.
"""
from __future__ import annotations

import numpy as np

from .core import RandomStream, Simulator
from .engine import N_CLASSES, FlowResult, NetworkSpec, SimResult, TraceKind
from .htb import HtbScheduler
from .link import Direction, Link
from .transport import Action, Receiver, Sender


class ReferenceEngine:
    def __init__(self, spec: NetworkSpec, observer=None):
        self.spec = spec
        self.observer = observer
        self.sim = Simulator()
        self.link = Link(self.sim, spec.link, RandomStream(spec.seed, spec.stream_id))
        self.htb = HtbScheduler.build_tree(spec.policy, spec.mss, spec.overhead, spec.queue_limit)
        self.senders, self.receivers, self.results = [], [], []
        for f, fs in enumerate(spec.flows):
            self.htb.register_flow(f, fs.traffic_type)
            self.senders.append(Sender(f, fs.size, fs.cc_mode, fs.rto, spec.mss, spec.overhead))
            self.receivers.append(Receiver(f, fs.size, spec.mss, spec.overhead))
            self.results.append(FlowResult(fs.traffic_type, fs.size))
        n = len(spec.flows)
        self.active = [False] * n
        self.queued = [False] * n
        self.timer_at = [None] * n
        self.timer_gen = [0] * n
        self.wake_at = None
        self.wake_gen = 0
        self.bins = np.zeros((spec.nbins, N_CLASSES), dtype=np.int64)
        self.trace = []
        self.bounded_left = sum(1 for fs in spec.flows if fs.size is not None)
        for f, fs in enumerate(spec.flows):
            self.sim.schedule(fs.start, self._start, f)
            if fs.stop is not None:
                self.sim.schedule(fs.stop, self._stop, f)

    # helpers ----------------------------------------------------------------
    def _trace(self, kind, f, seq, retx):
        if self.spec.trace:
            self.trace.append((self.sim.now, TraceKind(kind), f, seq, bool(retx)))

    def _observe(self, f):
        s = self.senders[f]
        r = self.results[f]
        r.cwnd_min = s.cwnd if r.cwnd_min == 0 else min(r.cwnd_min, s.cwnd)
        r.cwnd_max = max(r.cwnd_max, s.cwnd)
        if self.observer is not None:
            self.observer(self, f)

    def _try_emit(self, f):
        if not self.active[f] or self.queued[f]:
            return
        seg = self.senders[f].on_send_opportunity(self.sim.now)
        if seg is None:
            return
        r = self.results[f]
        r.max_in_flight = max(r.max_in_flight, self.senders[f].packets_in_flight)
        if self.htb.enqueue(seg, self.sim.now):
            self.queued[f] = True

    def _sync_timer(self, f):
        d = self.senders[f].timer_deadline
        if d is None:
            return
        d = max(d, self.sim.now)  # the deadline may have moved into the past
        if self.timer_at[f] is None or d < self.timer_at[f]:
            self.timer_gen[f] += 1
            self.timer_at[f] = d
            self.sim.schedule(d, self._rto, f, self.timer_gen[f])

    def _kick(self):
        t = self.htb.next_dequeue_time(self.sim.now)
        if t is not None and (self.wake_at is None or t < self.wake_at):
            self.wake_gen += 1
            self.wake_at = t
            self.sim.schedule(t, self._wake, self.wake_gen)

    # handlers ---------------------------------------------------------------
    def _start(self, f):
        self.active[f] = True
        self._try_emit(f)
        self._sync_timer(f)
        self._kick()
        self._observe(f)

    def _stop(self, f):
        self.senders[f].stop()

    def _cap_lift(self, f):
        self.senders[f].lift_handshake_cap()
        self._try_emit(f)
        self._sync_timer(f)
        self._kick()

    def _wake(self, gen):
        if gen != self.wake_gen:
            return
        self.wake_at = None
        now = self.sim.now
        seg = self.htb.dequeue(now)
        if seg is not None:
            f = seg.flow_id
            self.queued[f] = False
            if self.senders[f].on_transmit(seg, now):
                self.sim.schedule(now + self.spec.link.rtt, self._cap_lift, f)
            self._trace(TraceKind.SEND, f, seg.seq_start, seg.is_retransmission)
            if self.link.transmit(seg, Direction.FORWARD, now, self._data, f) is None:
                self._trace(TraceKind.DATA_DROP, f, seg.seq_start, seg.is_retransmission)
                r = self.results[f]
                r.data_lost += 1
                if not seg.is_retransmission:
                    r.first_tx_lost += 1
            self._try_emit(f)
            self._sync_timer(f)
        self._kick()

    def _data(self, seg, f):
        now = self.sim.now
        self._trace(TraceKind.RECV, f, seg.seq_start, seg.is_retransmission)
        if self.spec.bin_ns:
            b = now // self.spec.bin_ns
            if b < self.bins.shape[0]:
                self.bins[b, self.spec.flows[f].traffic_type] += seg.wire_bytes
        ack = self.receivers[f].on_data(seg, now)
        if self.link.transmit(ack, Direction.REVERSE, now, self._ack, f) is None:
            self._trace(TraceKind.ACK_DROP, f, ack.ack_cum, ack.echo_retransmission)
            self.results[f].acks_lost += 1

    def _ack(self, ack, f):
        self._trace(TraceKind.ACK, f, ack.ack_cum, ack.echo_retransmission)
        actions = self.senders[f].on_ack(ack, self.sim.now)
        if Action.COMPLETE in actions:
            self.bounded_left -= 1
            if self.spec.stop_when_complete and self.bounded_left == 0:
                self._observe(f)
                self.sim.stop()
                return
        self._try_emit(f)
        self._sync_timer(f)
        self._kick()
        self._observe(f)

    def _rto(self, f, gen):
        if gen != self.timer_gen[f]:
            return
        self.timer_at[f] = None
        s = self.senders[f]
        d = s.timer_deadline
        if d is None:
            return
        if self.sim.now < d:
            self._sync_timer(f)
            return
        head = s.una
        s.on_rto_timeout(self.sim.now)
        self._trace(TraceKind.RTO, f, s.seg_start(head), True)
        self._try_emit(f)
        self._sync_timer(f)
        self._kick()
        self._observe(f)

    # driver -----------------------------------------------------------------
    def run(self) -> SimResult:
        end = self.sim.run_until(self.spec.t_end)
        for f, s in enumerate(self.senders):
            r = self.results[f]
            r.first_send = s.first_send_at
            r.box_end = s.box_end_at
            r.complete_at = s.complete_at
            r.completion_echo = s.completion_echo
            r.completion_echo_retx = s.completion_echo_retx
            r.packets_sent = s.packets_sent
            r.retransmissions = s.retransmissions
            r.timeouts = s.timeouts
            r.duplicates = self.receivers[f].duplicate_count
            r.delivered_bytes = self.receivers[f].delivered
        return SimResult(self.results, self.bins, self.trace, end, self.sim.dispatched,
                         self.htb.dropped)


def run_reference(spec: NetworkSpec, observer=None) -> SimResult:
    return ReferenceEngine(spec, observer).run()
