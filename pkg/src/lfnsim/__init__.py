"""Packet-level simulator of HTB-shaped bulk transfers over a long fat network."""
from .config import ConfigError, RunConfig
from .engine import FlowSpec, NetworkSpec, SimResult, TraceKind, simulate
from .htb import PolicyTable, TrafficType, default_policy, load_policy
from .scenario import (StatsSummary, TimelineEvent, TransferRecord, TransferTimeout,
                       default_timeline, run_monte_carlo, run_timeline, run_transfer, summarize)
from .transport import CcMode, RtoMode

__version__ = "0.1.0"
