"""Log truncation coordination.

Every replica takes a deterministic state-machine snapshot at the same log
positions and announces it by proposing a marker command that travels through
the decided sequence. A replica may truncate its log up to a position once
markers from *all* replicas of the configuration cover it; global indices
survive truncation via offset translation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .core import Command, TruncationViolated

# Marker commands use a reserved client-id namespace derived from the
# proposing process, so (client, seq) identity works unchanged.
MARKER_CLIENT_BASE = -1


def marker_client(pid: int) -> int:
    return MARKER_CLIENT_BASE - pid


@dataclass(frozen=True)
class SnapshotMark:
    """Payload of a snapshot announcement: process j finished snapshot k
    covering the first `covered` log entries."""

    process: int
    snap_id: int
    covered: int

    def encode(self) -> tuple:
        return ("snap", self.process, self.snap_id, self.covered)

    @staticmethod
    def decode(op: object) -> Optional["SnapshotMark"]:
        if (
            isinstance(op, tuple)
            and len(op) == 4
            and op[0] == "snap"
            and all(isinstance(x, int) for x in op[1:])
        ):
            return SnapshotMark(op[1], op[2], op[3])
        return None


def mark_command(pid: int, snap_id: int, covered: int) -> Command:
    return Command(marker_client(pid), snap_id, SnapshotMark(pid, snap_id, covered).encode())


def is_marker(entry) -> bool:
    return isinstance(entry, Command) and SnapshotMark.decode(entry.op) is not None


class SnapshotLedger:
    """Per-replica largest decided snapshot coverage and the last truncation
    point; truncation never exceeds the minimum over all replicas."""

    def __init__(self, processes):
        self.covered: dict[int, int] = {p: 0 for p in sorted(processes)}
        self.truncated = 0

    def on_snapshot_decided(self, pid: int, snap_id: int, covered: int) -> Optional[int]:
        """Record a decided marker; returns a new safe truncation point when
        the all-replica minimum advanced."""
        if pid not in self.covered:
            return None
        if covered > self.covered[pid]:
            self.covered[pid] = covered
        low = min(self.covered.values())
        if low > self.truncated:
            self.truncated = low
            return low
        return None


def translate(global_index: int, offset: int) -> int:
    """Global log index to local position after truncation."""
    if global_index < offset:
        raise TruncationViolated(
            f"index {global_index} below truncation offset {offset}"
        )
    return global_index - offset
