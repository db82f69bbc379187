import pytest

from seqpaxos.compaction import (
    SnapshotLedger,
    SnapshotMark,
    is_marker,
    mark_command,
    marker_client,
    translate,
)
from seqpaxos.core import Command, StopSign, TruncationViolated


class TestLedger:
    def test_all_replicas_reporting_unlocks_truncation(self):
        ledger = SnapshotLedger((1, 2, 3))
        assert ledger.on_snapshot_decided(1, 1, 32) is None
        assert ledger.on_snapshot_decided(2, 1, 32) is None
        assert ledger.on_snapshot_decided(3, 1, 32) == 32

    def test_partial_coverage_blocks(self):
        ledger = SnapshotLedger((1, 2, 3))
        ledger.on_snapshot_decided(1, 1, 32)
        assert ledger.on_snapshot_decided(2, 1, 32) is None
        assert ledger.truncated == 0

    def test_report_below_minimum_is_noop(self):
        ledger = SnapshotLedger((1, 2))
        ledger.on_snapshot_decided(1, 1, 32)
        ledger.on_snapshot_decided(2, 1, 32)
        assert ledger.on_snapshot_decided(1, 1, 16) is None
        assert ledger.covered[1] == 32

    def test_monotone_advance(self):
        ledger = SnapshotLedger((1, 2))
        ledger.on_snapshot_decided(1, 1, 32)
        ledger.on_snapshot_decided(2, 1, 32)
        ledger.on_snapshot_decided(1, 2, 64)
        assert ledger.on_snapshot_decided(2, 2, 64) == 64

    def test_foreign_replica_ignored(self):
        ledger = SnapshotLedger((1, 2))
        assert ledger.on_snapshot_decided(9, 1, 32) is None


class TestTranslate:
    def test_arithmetic(self):
        assert translate(7, 3) == 4

    def test_boundary(self):
        assert translate(3, 3) == 0

    def test_below_offset(self):
        with pytest.raises(TruncationViolated):
            translate(2, 3)


class TestMarkers:
    def test_marker_encoding_golden(self):
        cmd = mark_command(3, 2, 32)
        assert cmd.client == marker_client(3) == -4
        assert cmd.seq == 2
        assert cmd.op == ("snap", 3, 2, 32)
        assert SnapshotMark.decode(cmd.op) == SnapshotMark(3, 2, 32)

    def test_marker_detection(self):
        assert is_marker(mark_command(1, 1, 0))
        assert not is_marker(Command(1, 1, ("put", "k", b"v")))
        assert not is_marker(StopSign(1, (1,)))
