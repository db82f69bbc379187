"""Replicated key-value state machine over decided log entries.

Implements exactly-once execution for sequential clients via a per-client
last-command table, and deterministic snapshots that couple the key-value
state with that table so replay after truncation stays duplicate-free.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

from .compaction import SnapshotMark
from .core import Command, Entry, InvalidArgument, SeqPaxosError, is_stop


class ContractViolation(SeqPaxosError):
    """A gap in the decided stream; indicates a harness bug, never handled."""


@dataclass(frozen=True)
class Put:
    key: str
    value: bytes

    def encode(self) -> tuple:
        return ("put", self.key, self.value)


@dataclass(frozen=True)
class Get:
    key: str

    def encode(self) -> tuple:
        return ("get", self.key)


def decode_op(op: object):
    if isinstance(op, tuple) and op:
        if op[0] == "put" and len(op) == 3:
            return Put(op[1], op[2])
        if op[0] == "get" and len(op) == 2:
            return Get(op[1])
    return None


ACK = b"ok"


@dataclass
class RsmSnapshot:
    snap_id: int
    covered: int  # global log entries included
    commands: int  # client commands among them (markers and stops excluded)
    kv: dict[str, bytes]
    clients: dict[int, tuple[int, bytes]]

    def encode(self) -> bytes:
        """Deterministic bytes: length-prefixed sorted key/value pairs, then
        the client table. Cross-replica equality is a byte comparison."""
        parts = [struct.pack(">IQQ", self.snap_id, self.covered, self.commands)]
        parts.append(struct.pack(">I", len(self.kv)))
        for key in sorted(self.kv):
            raw = key.encode("utf-8")
            val = self.kv[key]
            parts.append(struct.pack(">I", len(raw)) + raw)
            parts.append(struct.pack(">I", len(val)) + val)
        parts.append(struct.pack(">I", len(self.clients)))
        for client in sorted(self.clients):
            seq, resp = self.clients[client]
            parts.append(struct.pack(">qq", client, seq))
            parts.append(struct.pack(">I", len(resp)) + resp)
        return b"".join(parts)

    @staticmethod
    def decode(blob: bytes) -> "RsmSnapshot":
        pos = 0
        snap_id, covered, commands = struct.unpack_from(">IQQ", blob, pos)
        pos += 20
        (nkv,) = struct.unpack_from(">I", blob, pos)
        pos += 4
        kv: dict[str, bytes] = {}
        for _ in range(nkv):
            (klen,) = struct.unpack_from(">I", blob, pos)
            pos += 4
            key = blob[pos : pos + klen].decode("utf-8")
            pos += klen
            (vlen,) = struct.unpack_from(">I", blob, pos)
            pos += 4
            kv[key] = bytes(blob[pos : pos + vlen])
            pos += vlen
        (nclients,) = struct.unpack_from(">I", blob, pos)
        pos += 4
        clients: dict[int, tuple[int, bytes]] = {}
        for _ in range(nclients):
            client, seq = struct.unpack_from(">qq", blob, pos)
            pos += 16
            (rlen,) = struct.unpack_from(">I", blob, pos)
            pos += 4
            clients[client] = (seq, bytes(blob[pos : pos + rlen]))
            pos += rlen
        return RsmSnapshot(snap_id, covered, commands, kv, clients)


class KvStateMachine:
    """Key-value store plus the sequential-client deduplication table."""

    def __init__(self, base: int = 0):
        self.kv: dict[str, bytes] = {}
        self.clients: dict[int, tuple[int, bytes]] = {}
        self.applied = base  # next expected global index
        self.commands = 0  # client commands applied (markers and stops excluded)
        self.snap_counter = 0

    def apply(self, entry: Entry, global_index: int):
        """Execute one decided entry. Returns (response, was_duplicate);
        stop-signs and snapshot markers are no-ops with no response."""
        if global_index != self.applied:
            raise ContractViolation(
                f"decided entry at {global_index}, expected {self.applied}"
            )
        self.applied += 1
        if is_stop(entry):
            return None, False
        assert isinstance(entry, Command)
        if SnapshotMark.decode(entry.op) is not None:
            return None, False
        self.commands += 1
        known = self.clients.get(entry.client)
        if known is not None and known[0] == entry.seq:
            return known[1], True  # stored response, not re-executed
        op = decode_op(entry.op)
        if isinstance(op, Put):
            self.kv[op.key] = op.value
            resp = ACK
        elif isinstance(op, Get):
            resp = self.kv.get(op.key, b"")
        else:
            resp = ACK  # opaque payloads acknowledge without effect
        self.clients[entry.client] = (entry.seq, resp)
        return resp, False

    def peek_response(self, client: int, seq: int) -> Optional[bytes]:
        """Stored response for a client's last decided command, if it is the
        one asked about."""
        known = self.clients.get(client)
        if known is not None and known[0] == seq:
            return known[1]
        return None

    def take_snapshot(self, covered: int) -> RsmSnapshot:
        if covered != self.applied:
            raise InvalidArgument(
                f"snapshot at {covered} but machine applied {self.applied}"
            )
        self.snap_counter += 1
        return RsmSnapshot(
            self.snap_counter, covered, self.commands, dict(self.kv), dict(self.clients)
        )

    def digest(self) -> str:
        snap = RsmSnapshot(0, self.applied, self.commands, dict(self.kv), dict(self.clients))
        return hashlib.sha256(snap.encode()).hexdigest()[:16]


def restore(snapshot: RsmSnapshot, entries: Iterable[Entry]) -> KvStateMachine:
    """State machine from a snapshot plus the log suffix it does not cover;
    replayed entries go through the normal dedup path."""
    machine = KvStateMachine(base=snapshot.covered)
    machine.kv = dict(snapshot.kv)
    machine.clients = dict(snapshot.clients)
    machine.commands = snapshot.commands
    machine.snap_counter = snapshot.snap_id
    g = snapshot.covered
    for entry in entries:
        machine.apply(entry, g)
        g += 1
    return machine
