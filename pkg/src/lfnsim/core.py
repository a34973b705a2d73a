"""Discrete-event engine: integer nanosecond clock, event queue, seeded streams.

All simulated time is an ``int`` count of nanoseconds since the start of the
run.  Events that share a firing time are dispatched in insertion order.

The pseudo-random generator is SplitMix64 (Steele, Lea & Flood 2014) used in
counter mode, so a ``(seed, stream_id)`` pair reproduces the same draws on
every platform and in every language that implements the same 64-bit mixing
function.  See :class:`RandomStream` for the exact construction.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def ms(value: float) -> int:
    """Milliseconds to integer nanoseconds."""
    return int(round(value * NS_PER_MS))


def seconds(value: float) -> int:
    return int(round(value * NS_PER_S))


def to_seconds(ns: int) -> float:
    return ns / NS_PER_S


class SchedulingError(RuntimeError):
    """An event was scheduled before the current clock."""


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit unsigned integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, stream_id: int) -> int:
    """Initial SplitMix64 state for ``(seed, stream_id)``."""
    return (mix64(seed) + (stream_id & MASK64)) & MASK64


def bernoulli_threshold(p: float) -> int:
    """Integer threshold so that ``(draw >> 11) < threshold`` has probability p.

    ``p * 2**53`` is exact in binary floating point, so the comparison is
    equivalent to ``u < p`` for the 53-bit uniform ``u = (draw >> 11) / 2**53``.
    """
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"probability must lie in [0, 1], got {p!r}")
    return math.ceil(p * (1 << 53))


class RandomStream:
    """Counter-mode SplitMix64 stream.

    ``state_0 = mix64(seed) + stream_id  (mod 2**64)``; draw ``k`` (k >= 1) is
    ``mix64(state_0 + k * 0x9E3779B97F4A7C15)``.
    """

    __slots__ = ("seed", "stream_id", "_state", "draws")

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or seed > MASK64 or stream_id < 0 or stream_id > MASK64:
            raise ValueError("seed and stream_id must be 64-bit unsigned integers")
        self.seed = seed
        self.stream_id = stream_id
        self._state = stream_key(seed, stream_id)
        self.draws = 0

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN_GAMMA) & MASK64
        self.draws += 1
        return mix64(self._state)

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) / (1 << 53)

    def bernoulli(self, p: float) -> bool:
        threshold = bernoulli_threshold(p)
        return (self.next_u64() >> 11) < threshold


def bernoulli(stream: RandomStream, p: float) -> bool:
    """True with probability ``p``; consumes exactly one draw of ``stream``."""
    return stream.bernoulli(p)


@dataclass(order=False, eq=False)
class Event:
    fire_at: int
    sequence_number: int
    action: Callable[..., Any]
    args: tuple = ()
    cancelled: bool = field(default=False)

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Single-threaded event loop over a binary heap keyed by (time, sequence)."""

    def __init__(self):
        self.now = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._stopped = False
        self.dispatched = 0

    def schedule(self, fire_at: int, action: Callable[..., Any], *args) -> Event:
        if fire_at < self.now:
            raise SchedulingError(f"cannot schedule at {fire_at} ns; clock is {self.now} ns")
        event = Event(int(fire_at), self._seq, action, args)
        self._seq += 1
        heapq.heappush(self._queue, (event.fire_at, event.sequence_number, event))
        return event

    def schedule_in(self, delay: int, action: Callable[..., Any], *args) -> Event:
        return self.schedule(self.now + delay, action, *args)

    @staticmethod
    def cancel(event: Event) -> None:
        event.cancel()

    def stop(self) -> None:
        """Make the running ``run_until`` return after the current handler."""
        self._stopped = True

    @property
    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def run_until(self, t_end: int) -> int:
        """Dispatch every event with ``fire_at <= t_end``; return the clock.

        The clock ends at ``t_end`` unless :meth:`stop` was called, in which
        case it stays at the time of the stopping event.
        """
        self._stopped = False
        queue = self._queue
        while queue and queue[0][0] <= t_end:
            fire_at, _, event = heapq.heappop(queue)
            if event.cancelled:
                continue
            self.now = fire_at
            self.dispatched += 1
            event.action(*event.args)
            if self._stopped:
                return self.now
        self.now = max(self.now, t_end)
        return self.now
