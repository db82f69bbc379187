"""Reconfigurable sequence consensus with ballot leader election, persistence,
log compaction, a deterministic simulation harness, and a trace checker."""

from .core import (
    BALLOT_CAP,
    Command,
    Entry,
    Log,
    Round,
    StopSign,
    ballot_make,
    round_cmp,
)
from .paxos import Replica
from .rsm import Get, KvStateMachine, Put

__all__ = [
    "BALLOT_CAP",
    "Command",
    "Entry",
    "Log",
    "Round",
    "StopSign",
    "ballot_make",
    "round_cmp",
    "Replica",
    "Get",
    "KvStateMachine",
    "Put",
]

__version__ = "0.1.0"
