"""Hierarchical token bucket (root + one leaf per traffic type).

Token buckets are integers in units of bit-nanoseconds per second of credit:
a class with rate ``r`` bit/s gains ``r`` units per nanosecond and a packet of
``w`` wire bytes costs ``w * 8e9`` units.  All arithmetic is exact.

Selection runs in two passes.  The guarantee pass serves the highest-priority
backlogged leaf that holds enough guarantee tokens and ceiling tokens while the
root bucket is non-negative; it charges the leaf's tokens, its ctokens and the
root.  The borrow pass serves the highest-priority backlogged leaf whose
ctokens and the root's tokens both cover the head packet; it charges ctokens
and the root.  Only the root can go below zero, and by at most one packet.
"""
from __future__ import annotations

import enum
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .link import DEFAULT_MSS, DEFAULT_OVERHEAD, Segment

UNITS_PER_BYTE = 8 * 1_000_000_000
DEFAULT_TOTAL_RATE = 476_000_000
DEFAULT_QUEUE_LIMIT = 10_000


class PolicyError(ValueError):
    pass


class TrafficType(enum.IntEnum):
    CROSSTALK = 0
    EFD = 1
    INTERACTIVE = 2
    RAW = 3
    CATCHUP = 4
    ADHOC = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text) -> "TrafficType":
        if isinstance(text, TrafficType):
            return text
        key = str(text).strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        try:
            return _ALIASES[key]
        except KeyError:
            raise PolicyError(f"unknown traffic type {text!r}") from None


_ALIASES = {t.name.lower(): t for t in TrafficType}
_ALIASES.update({
    "xtalk": TrafficType.CROSSTALK,
    "crosstalkcorrected": TrafficType.CROSSTALK,
    "crosstalkcorrectedimages": TrafficType.CROSSTALK,
    "rawimages": TrafficType.RAW,
    "catchupimages": TrafficType.CATCHUP,
})

_RATE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(%|[kmg]?(?:bit|bps)?)\s*$", re.IGNORECASE)
_SCALE = {"": 1, "k": 1_000, "m": 1_000_000, "g": 1_000_000_000}


def parse_rate(value, total_rate: int | None = None) -> int:
    """Parse ``"476mbit"``, ``"1Mbit"``, ``"95%"`` or a bare number of bit/s."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return int(round(value))
    m = _RATE_RE.match(str(value))
    if not m:
        raise PolicyError(f"cannot parse rate {value!r}")
    number, unit = float(m.group(1)), m.group(2).lower()
    if unit == "%":
        if total_rate is None:
            raise PolicyError(f"percentage rate {value!r} needs a total rate")
        return int(round(total_rate * number / 100.0))
    prefix = unit[:1] if unit[:1] in "kmg" else ""
    return int(round(number * _SCALE[prefix]))


@dataclass(frozen=True)
class PolicyRow:
    priority: int
    guarantee: object  # "95%", "1mbit" or bit/s
    ceil: object


@dataclass(frozen=True)
class PolicyTable:
    total_rate: int = DEFAULT_TOTAL_RATE
    rows: dict = field(default_factory=dict)  # TrafficType -> PolicyRow

    def resolved(self) -> dict:
        """TrafficType -> (priority, guarantee bit/s, ceil bit/s)."""
        return {t: (row.priority, parse_rate(row.guarantee, self.total_rate),
                    parse_rate(row.ceil, self.total_rate))
                for t, row in self.rows.items()}


def default_policy(total_rate: int = DEFAULT_TOTAL_RATE) -> PolicyTable:
    """The six-class LSST policy; "~0%" guarantees are 1 Mbit/s."""
    rows = {
        TrafficType.CROSSTALK: PolicyRow(0, "95%", "100%"),
        TrafficType.EFD: PolicyRow(1, "5%", "5%"),
        TrafficType.INTERACTIVE: PolicyRow(2, "1mbit", "10%"),
        TrafficType.RAW: PolicyRow(3, "1mbit", "100%"),
        TrafficType.CATCHUP: PolicyRow(4, "1mbit", "100%"),
        TrafficType.ADHOC: PolicyRow(5, "1mbit", "100%"),
    }
    return PolicyTable(total_rate, rows)


def policy_from_dict(data: dict, total_rate: int | None = None) -> PolicyTable:
    if not isinstance(data, dict) or not data.get("classes"):
        raise PolicyError("policy needs a non-empty 'classes' list")
    if total_rate is None:
        total_rate = parse_rate(data.get("total_rate", DEFAULT_TOTAL_RATE))
    rows = {}
    for entry in data["classes"]:
        try:
            t = TrafficType.parse(entry["type"])
            row = PolicyRow(int(entry["priority"]), entry["guarantee"], entry["ceil"])
        except KeyError as exc:
            raise PolicyError(f"policy entry {entry!r} lacks field {exc}") from None
        if t in rows:
            raise PolicyError(f"duplicate policy row for {t.label}")
        rows[t] = row
    return PolicyTable(total_rate, rows)


def load_policy(path, total_rate: int | None = None) -> PolicyTable:
    with open(Path(path)) as fh:
        return policy_from_dict(yaml.safe_load(fh), total_rate)


def burst_bytes(rate: int, full_wire_bytes: int) -> int:
    """Bucket depth: ten full packets or one millisecond at ``rate``, whichever is larger."""
    return max(10 * full_wire_bytes, -(-rate // 8000))


def _wait(have: int, need: int, rate: int) -> int:
    if have >= need:
        return 0
    return -(-(need - have) // rate)


@dataclass
class BandwidthClass:
    class_id: str
    parent: str | None
    priority: int
    guarantee_rate: int
    ceil_rate: int
    burst_bytes: int
    cburst_bytes: int
    tokens: int = 0
    ctokens: int = 0
    last_update: int = 0
    queue: deque = field(default_factory=deque)
    traffic_type: TrafficType | None = None
    dropped: int = 0
    sent_bytes: int = 0
    sent_packets: int = 0

    def __post_init__(self):
        if self.guarantee_rate <= 0 or self.ceil_rate <= 0:
            raise PolicyError(f"class {self.class_id}: rates must be positive")
        if self.guarantee_rate > self.ceil_rate:
            raise PolicyError(f"class {self.class_id}: guarantee exceeds ceiling")
        self.tokens = self.burst_bytes * UNITS_PER_BYTE
        self.ctokens = self.cburst_bytes * UNITS_PER_BYTE

    @property
    def burst_units(self) -> int:
        return self.burst_bytes * UNITS_PER_BYTE

    @property
    def cburst_units(self) -> int:
        return self.cburst_bytes * UNITS_PER_BYTE

    def refresh(self, now: int) -> None:
        dt = now - self.last_update
        if dt <= 0:
            return
        self.tokens = _refill(self.tokens, self.burst_units, self.guarantee_rate, dt)
        self.ctokens = _refill(self.ctokens, self.cburst_units, self.ceil_rate, dt)
        self.last_update = now


def _refill(tokens: int, cap: int, rate: int, dt: int) -> int:
    missing = cap - tokens
    if missing <= 0:
        return cap
    if dt >= -(-missing // rate):
        return cap
    return tokens + rate * dt


class HtbScheduler:
    """Two-level HTB: a root class and one leaf per :class:`TrafficType`."""

    def __init__(self, root: BandwidthClass, leaves: dict, queue_limit: int = DEFAULT_QUEUE_LIMIT):
        self.root = root
        self.leaves = leaves  # TrafficType -> BandwidthClass
        self.order = sorted(leaves)  # leaf scan order: TrafficType value
        self.queue_limit = queue_limit
        self.flows: dict = {}
        max_prio = max(c.priority for c in leaves.values())
        self._rr_last = [-1] * (max_prio + 1)
        self.dropped = 0

    @classmethod
    def build_tree(cls, policy: PolicyTable, mss: int = DEFAULT_MSS,
                   overhead: int = DEFAULT_OVERHEAD, queue_limit: int = DEFAULT_QUEUE_LIMIT):
        if not policy.rows:
            raise PolicyError("empty policy")
        missing = [t.label for t in TrafficType if t not in policy.rows]
        if missing:
            raise PolicyError(f"policy lacks rows for: {', '.join(missing)}")
        full = mss + overhead
        total = int(policy.total_rate)
        root_burst = burst_bytes(total, full)
        root = BandwidthClass("root", None, 0, total, total, root_burst, root_burst)
        leaves = {}
        for t, (prio, rate, ceil) in sorted(policy.resolved().items()):
            if prio < 0:
                raise PolicyError(f"{t.label}: priority must be non-negative")
            if ceil > total:
                raise PolicyError(f"{t.label}: ceiling {ceil} exceeds total rate {total}")
            leaves[t] = BandwidthClass(
                t.label, "root", prio, rate, ceil,
                burst_bytes(rate, full), burst_bytes(ceil, full), traffic_type=t)
        return cls(root, leaves, queue_limit)

    # classification -------------------------------------------------------
    def register_flow(self, flow_id, traffic_type) -> None:
        self.flows[flow_id] = TrafficType.parse(traffic_type)

    def classify(self, flow_id, flow_metadata=None) -> TrafficType:
        """Declared type of the flow; unknown flows fall into the ad hoc class."""
        if flow_metadata is not None and flow_id not in self.flows:
            declared = flow_metadata.get("type") if isinstance(flow_metadata, dict) else flow_metadata
            if declared is not None:
                return TrafficType.parse(declared)
        return self.flows.get(flow_id, TrafficType.ADHOC)

    # queueing ---------------------------------------------------------------
    def enqueue(self, segment: Segment, now: int) -> bool:
        leaf = self.leaves[self.classify(segment.flow_id)]
        if len(leaf.queue) >= self.queue_limit:
            leaf.dropped += 1
            self.dropped += 1
            return False
        leaf.queue.append(segment)
        return True

    def backlog(self) -> int:
        return sum(len(c.queue) for c in self.leaves.values())

    def _refresh(self, now: int) -> None:
        self.root.refresh(now)
        for leaf in self.leaves.values():
            leaf.refresh(now)

    def _pick(self, eligible) -> TrafficType | None:
        best, best_key = None, None
        n = len(self.order)
        for idx, t in enumerate(self.order):
            leaf = self.leaves[t]
            if not leaf.queue or not eligible(leaf):
                continue
            key = (leaf.priority, (idx - self._rr_last[leaf.priority] - 1) % n)
            if best_key is None or key < best_key:
                best, best_key = idx, key
        if best is None:
            return None
        self._rr_last[self.leaves[self.order[best]].priority] = best
        return self.order[best]

    def dequeue(self, now: int) -> Segment | None:
        self._refresh(now)
        root = self.root

        def guaranteed(leaf):
            cost = leaf.queue[0].wire_bytes * UNITS_PER_BYTE
            return leaf.tokens >= cost and leaf.ctokens >= cost and root.tokens >= 0

        def borrowing(leaf):
            cost = leaf.queue[0].wire_bytes * UNITS_PER_BYTE
            return leaf.ctokens >= cost and root.ctokens >= cost

        t = self._pick(guaranteed)
        if t is not None:
            leaf = self.leaves[t]
            cost = leaf.queue[0].wire_bytes * UNITS_PER_BYTE
            leaf.tokens -= cost
        else:
            t = self._pick(borrowing)
            if t is None:
                return None
            leaf = self.leaves[t]
            cost = leaf.queue[0].wire_bytes * UNITS_PER_BYTE
        leaf.ctokens -= cost
        root.tokens -= cost
        root.ctokens -= cost
        segment = leaf.queue.popleft()
        leaf.sent_bytes += segment.wire_bytes
        leaf.sent_packets += 1
        return segment

    def next_dequeue_time(self, now: int) -> int | None:
        """Earliest time at which :meth:`dequeue` will return a packet."""
        self._refresh(now)
        root = self.root
        best = None
        for t in self.order:
            leaf = self.leaves[t]
            if not leaf.queue:
                continue
            cost = leaf.queue[0].wire_bytes * UNITS_PER_BYTE
            ceil_wait = _wait(leaf.ctokens, cost, leaf.ceil_rate)
            guaranteed = max(_wait(leaf.tokens, cost, leaf.guarantee_rate), ceil_wait,
                             _wait(root.tokens, 0, root.guarantee_rate))
            borrowed = max(ceil_wait, _wait(root.ctokens, cost, root.ceil_rate))
            wait = min(guaranteed, borrowed)
            if best is None or wait < best:
                best = wait
        return None if best is None else now + best
