"""Domain types shared by every layer: ids, ballots, rounds, commands,
stop-signs, the truncatable log, and the closed wire-message vocabulary.

All values here are immutable (or single-owner, for Log) and carry a
canonical text rendering that the trace format and the checker rely on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

# Fixed upper bound on cluster size used to fold (s, pid) ballots into one
# integer. Small enough to keep ballots readable in traces.
BALLOT_CAP = 1024


class SeqPaxosError(Exception):
    pass


class InvalidArgument(SeqPaxosError):
    pass


class LogStopped(SeqPaxosError):
    """Raised on an attempt to extend a log whose last entry is a stop-sign."""


class TruncationViolated(SeqPaxosError):
    """Raised when an index below a log's truncation offset is referenced."""


# ---------------------------------------------------------------------------
# Identifiers, ballots, rounds


def ballot_make(s: int, pid: int, cap: int = BALLOT_CAP) -> int:
    """Fold a (sequence number, process id) pair into a single ballot."""
    if pid < 0 or pid >= cap:
        raise InvalidArgument(f"pid {pid} out of range for cap {cap}")
    if s < 0:
        raise InvalidArgument(f"negative sequence number {s}")
    return s * cap + pid


def ballot_pid(ballot: int, cap: int = BALLOT_CAP) -> int:
    return ballot % cap


def ballot_seq(ballot: int, cap: int = BALLOT_CAP) -> int:
    return ballot // cap


def ballot_increment(ballot: int, cap: int = BALLOT_CAP) -> int:
    """Next higher ballot owned by the same process."""
    return ballot + cap


@dataclass(frozen=True, order=True)
class Round:
    """Proposal round: (configuration id, ballot), ordered lexicographically
    so every round of configuration i+1 exceeds every round of i."""

    config: int
    ballot: int

    def text(self) -> str:
        return f"{self.config}.{self.ballot}"


def round_cmp(a: Round, b: Round) -> int:
    """-1, 0 or 1 per the total (config, ballot) order."""
    if a == b:
        return 0
    return -1 if a < b else 1


@dataclass(frozen=True, order=True)
class ReplicaId:
    """A process acting in one configuration."""

    config: int
    process: int

    def text(self) -> str:
        return f"r{self.config}.{self.process}"


# ---------------------------------------------------------------------------
# Log entries


class Command:
    """A client command. Identity (and thus equality) is the
    (client, client_seq) pair; the payload is opaque to consensus."""

    __slots__ = ("client", "seq", "op")

    def __init__(self, client: int, seq: int, op: object = None):
        self.client = client
        self.seq = seq
        self.op = op

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Command)
            and self.client == other.client
            and self.seq == other.seq
        )

    def __hash__(self) -> int:
        return hash((self.client, self.seq))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Command({self.client}:{self.seq})"

    def text(self) -> str:
        return f"{self.client}:{self.seq}"


@dataclass(frozen=True)
class StopSign:
    """Final command of a configuration, carrying the next membership."""

    next_config: int
    processes: tuple[int, ...]  # sorted pids of the next configuration

    def __post_init__(self):
        object.__setattr__(self, "processes", tuple(sorted(self.processes)))

    def replica_map(self) -> dict[int, ReplicaId]:
        return {p: ReplicaId(self.next_config, p) for p in self.processes}

    def text(self) -> str:
        return f"SS{{cfg{self.next_config};{','.join('p%d' % p for p in self.processes)}}}"


Entry = Union[Command, StopSign]


def is_stop(entry: Entry) -> bool:
    return isinstance(entry, StopSign)


def entry_text(entry: Entry) -> str:
    return entry.text()


# ---------------------------------------------------------------------------
# Sequence helpers (prefix / suffix / append)


def seq_prefix(v: tuple, l: int) -> tuple:
    """First min(l, |v|) elements; clamps out-of-range l."""
    if l <= 0:
        return ()
    return tuple(v[:l])


def seq_suffix(v: tuple, l: int) -> tuple:
    """Elements from index min(l, |v|) onward; clamps out-of-range l."""
    if l <= 0:
        return tuple(v)
    return tuple(v[l:])


def seq_append(v: tuple, entry: Entry, dedup: bool) -> tuple:
    """The append operator on plain sequences. With dedup on, an already
    present equal command leaves the sequence unchanged."""
    if v and is_stop(v[-1]):
        raise LogStopped("cannot append after a stop-sign")
    if dedup and not is_stop(entry) and entry in v:
        return tuple(v)
    return tuple(v) + (entry,)


class Log:
    """Accepted sequence with a truncation offset.

    All indices and lengths exposed here are *global*: global length =
    offset + local entry count, and global index g resolves to
    entries[g - offset]. Resolving below the offset raises."""

    __slots__ = ("offset", "entries")

    def __init__(self, offset: int = 0, entries: Iterable[Entry] = ()):
        self.offset = offset
        self.entries: list[Entry] = list(entries)

    def glen(self) -> int:
        return self.offset + len(self.entries)

    def get(self, g: int) -> Entry:
        if g < self.offset:
            raise TruncationViolated(f"index {g} below offset {self.offset}")
        if g >= self.glen():
            raise InvalidArgument(f"index {g} beyond length {self.glen()}")
        return self.entries[g - self.offset]

    def last(self) -> Optional[Entry]:
        return self.entries[-1] if self.entries else None

    def stopped(self) -> bool:
        return bool(self.entries) and is_stop(self.entries[-1])

    def suffix_from(self, l: int) -> tuple[Entry, ...]:
        if l < self.offset:
            raise TruncationViolated(f"suffix from {l} below offset {self.offset}")
        return tuple(self.entries[l - self.offset :])

    def cut_and_extend(self, cut: int, suffix: Iterable[Entry]) -> None:
        """prefix(v, cut) ++ suffix, in place."""
        if cut < self.offset:
            raise TruncationViolated(f"cut {cut} below offset {self.offset}")
        del self.entries[max(cut - self.offset, 0) :]
        self.entries.extend(suffix)

    def append(self, entry: Entry, dedup: bool) -> bool:
        """Append via the append operator; returns False when dedup left the
        log unchanged."""
        if self.stopped():
            raise LogStopped("log ends in a stop-sign")
        if dedup and not is_stop(entry) and entry in self.entries:
            return False
        self.entries.append(entry)
        return True

    def truncate_to(self, up_to: int) -> None:
        """Drop entries below global index up_to and advance the offset."""
        if up_to <= self.offset:
            return
        if up_to > self.glen():
            raise InvalidArgument(f"truncate {up_to} beyond length {self.glen()}")
        del self.entries[: up_to - self.offset]
        self.offset = up_to

    def snapshot(self) -> "Log":
        return Log(self.offset, list(self.entries))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Log(offset={self.offset}, entries={self.entries!r})"


def max_promise(promises: Iterable[tuple[ReplicaId, Round, tuple]]) -> tuple:
    """Pick the promised suffix with the maximal round, longest among equal
    rounds; among full ties the lowest replica id wins (deterministic)."""
    best = None
    for rid, rnd, suffix in promises:
        if best is None:
            best = (rid, rnd, suffix)
            continue
        brid, brnd, bsfx = best
        key, bkey = (rnd, len(suffix)), (brnd, len(bsfx))
        if key > bkey or (key == bkey and rid < brid):
            best = (rid, rnd, suffix)
    if best is None:
        raise InvalidArgument("max_promise over an empty promise set")
    return best[2]


# ---------------------------------------------------------------------------
# Wire messages


@dataclass(frozen=True)
class Prepare:
    n: Round
    ld: int
    na: Round  # leader's accepted round, guarding stale suffixes

    def text(self) -> str:
        return f"Prepare{{n={self.n.text()},ld={self.ld},na={self.na.text()}}}"


@dataclass(frozen=True)
class Promise:
    n: Round
    na: Round
    suffix: tuple[Entry, ...]
    ld: int

    def text(self) -> str:
        return (
            f"Promise{{n={self.n.text()},na={self.na.text()}"
            f",sfx=[{entries_text(self.suffix)}],sfxb={entries_size(self.suffix)},ld={self.ld}}}"
        )


@dataclass(frozen=True)
class AcceptSync:
    n: Round
    suffix: tuple[Entry, ...]
    ld: int

    def text(self) -> str:
        return f"AcceptSync{{n={self.n.text()},sfx=[{entries_text(self.suffix)}],ld={self.ld}}}"


@dataclass(frozen=True)
class Accept:
    n: Round
    entry: Entry

    def text(self) -> str:
        return f"Accept{{n={self.n.text()},{entry_text(self.entry)}}}"


@dataclass(frozen=True)
class Accepted:
    n: Round
    la: int

    def text(self) -> str:
        return f"Accepted{{n={self.n.text()},la={self.la}}}"


@dataclass(frozen=True)
class Decide:
    l: int
    n: Round

    def text(self) -> str:
        return f"Decide{{l={self.l},n={self.n.text()}}}"


@dataclass(frozen=True)
class PrepareReq:
    def text(self) -> str:
        return "PrepareReq{}"


@dataclass(frozen=True)
class HeartbeatRequest:
    round: int
    max_ballot: int

    def text(self) -> str:
        return f"HbReq{{r={self.round},max={self.max_ballot}}}"


@dataclass(frozen=True)
class HeartbeatReply:
    round: int
    ballot: int

    def text(self) -> str:
        return f"HbRep{{r={self.round},b={self.ballot}}}"


@dataclass(frozen=True)
class StateOffer:
    """Announcement that the sender can hand out the initial sequence for
    `config` (the final sequence of config - 1)."""

    config: int
    base: int

    def text(self) -> str:
        return f"StateOffer{{cfg{self.config},base={self.base}}}"


@dataclass(frozen=True)
class StateRequest:
    config: int

    def text(self) -> str:
        return f"StateRequest{{cfg{self.config}}}"


@dataclass(frozen=True)
class StateChunk:
    config: int
    transfer: "StateTransfer"

    def text(self) -> str:
        return f"StateChunk{{cfg{self.config},{self.transfer.text()}}}"


Message = Union[
    Prepare,
    Promise,
    AcceptSync,
    Accept,
    Accepted,
    Decide,
    PrepareReq,
    HeartbeatRequest,
    HeartbeatReply,
    StateOffer,
    StateRequest,
    StateChunk,
]

HEARTBEAT_TYPES = (HeartbeatRequest, HeartbeatReply)


@dataclass(frozen=True)
class Envelope:
    """Routing wrapper: every message travels tagged with the configuration
    it belongs to plus sender and destination process ids."""

    config: int
    src: int
    dst: int
    msg: Message

    def text(self) -> str:
        return f"p{self.src}->p{self.dst} cfg{self.config} {self.msg.text()}"


@dataclass(frozen=True)
class StateTransfer:
    """Initial-sequence handoff for a new configuration: an RSM snapshot plus
    the final-sequence entries it does not cover."""

    config: int  # configuration being started
    processes: tuple[int, ...]  # its membership
    base: int  # |sigma_{config-1}|, the global length handed over
    snapshot_blob: bytes
    snapshot_covered: int  # global entries covered by the snapshot
    suffix: tuple[Entry, ...]  # entries [snapshot_covered, base)

    def encode(self) -> bytes:
        parts = [
            struct.pack(">IIQ", self.config, len(self.processes), self.base),
            b"".join(struct.pack(">I", p) for p in self.processes),
            struct.pack(">Q", self.snapshot_covered),
            struct.pack(">I", len(self.snapshot_blob)),
            self.snapshot_blob,
            encode_entries(self.suffix),
        ]
        return b"".join(parts)

    def digest(self) -> str:
        import zlib

        return f"{zlib.crc32(self.encode()):08x}"

    def text(self) -> str:
        return f"base={self.base},snap@{self.snapshot_covered},sfx={len(self.suffix)},sig={self.digest()}"


# ---------------------------------------------------------------------------
# Canonical binary encoding (storage records, transfer blobs, byte measures)

_TAG_NONE = 0
_TAG_INT = 1
_TAG_STR = 2
_TAG_BYTES = 3
_TAG_TUPLE = 4
_TAG_TRUE = 5
_TAG_FALSE = 6


def encode_value(v: object) -> bytes:
    if v is None:
        return bytes([_TAG_NONE])
    if v is True:
        return bytes([_TAG_TRUE])
    if v is False:
        return bytes([_TAG_FALSE])
    if isinstance(v, int):
        return bytes([_TAG_INT]) + struct.pack(">q", v)
    if isinstance(v, str):
        raw = v.encode("utf-8")
        return bytes([_TAG_STR]) + struct.pack(">I", len(raw)) + raw
    if isinstance(v, bytes):
        return bytes([_TAG_BYTES]) + struct.pack(">I", len(v)) + v
    if isinstance(v, tuple):
        out = [bytes([_TAG_TUPLE]), struct.pack(">I", len(v))]
        out.extend(encode_value(x) for x in v)
        return b"".join(out)
    raise InvalidArgument(f"unencodable value of type {type(v).__name__}")


def decode_value(buf: bytes, pos: int = 0) -> tuple[object, int]:
    tag = buf[pos]
    pos += 1
    if tag == _TAG_NONE:
        return None, pos
    if tag == _TAG_TRUE:
        return True, pos
    if tag == _TAG_FALSE:
        return False, pos
    if tag == _TAG_INT:
        return struct.unpack_from(">q", buf, pos)[0], pos + 8
    if tag == _TAG_STR:
        (n,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        return buf[pos : pos + n].decode("utf-8"), pos + n
    if tag == _TAG_BYTES:
        (n,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        return bytes(buf[pos : pos + n]), pos + n
    if tag == _TAG_TUPLE:
        (n,) = struct.unpack_from(">I", buf, pos)
        pos += 4
        items = []
        for _ in range(n):
            item, pos = decode_value(buf, pos)
            items.append(item)
        return tuple(items), pos
    raise InvalidArgument(f"bad value tag {tag}")


_ENTRY_CMD = 0
_ENTRY_STOP = 1


def encode_entry(entry: Entry) -> bytes:
    if is_stop(entry):
        body = struct.pack(">II", entry.next_config, len(entry.processes))
        body += b"".join(struct.pack(">I", p) for p in entry.processes)
        return bytes([_ENTRY_STOP]) + body
    return (
        bytes([_ENTRY_CMD])
        + struct.pack(">qq", entry.client, entry.seq)
        + encode_value(entry.op)
    )


def decode_entry(buf: bytes, pos: int = 0) -> tuple[Entry, int]:
    tag = buf[pos]
    pos += 1
    if tag == _ENTRY_STOP:
        next_config, n = struct.unpack_from(">II", buf, pos)
        pos += 8
        pids = []
        for _ in range(n):
            pids.append(struct.unpack_from(">I", buf, pos)[0])
            pos += 4
        return StopSign(next_config, tuple(pids)), pos
    if tag == _ENTRY_CMD:
        client, seq = struct.unpack_from(">qq", buf, pos)
        pos += 16
        op, pos = decode_value(buf, pos)
        return Command(client, seq, op), pos
    raise InvalidArgument(f"bad entry tag {tag}")


def encode_entries(entries: Iterable[Entry]) -> bytes:
    items = [encode_entry(e) for e in entries]
    return struct.pack(">I", len(items)) + b"".join(items)


def decode_entries(buf: bytes, pos: int = 0) -> tuple[tuple[Entry, ...], int]:
    (n,) = struct.unpack_from(">I", buf, pos)
    pos += 4
    out = []
    for _ in range(n):
        e, pos = decode_entry(buf, pos)
        out.append(e)
    return tuple(out), pos


def entries_size(entries: Iterable[Entry]) -> int:
    """Encoded byte size of a suffix, as reported in Promise renderings."""
    return sum(len(encode_entry(e)) for e in entries)


def entries_text(entries: Iterable[Entry]) -> str:
    return ",".join(entry_text(e) for e in entries)


def encode_round(r: Round) -> bytes:
    return struct.pack(">Iq", r.config, r.ballot)


def decode_round(buf: bytes, pos: int = 0) -> tuple[Round, int]:
    config, ballot = struct.unpack_from(">Iq", buf, pos)
    return Round(config, ballot), pos + 12
