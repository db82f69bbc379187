"""Persistence of the durable replica variables with pluggable backends.

A replica owns one storage instance per configuration. Every persist_* call
is durable on return with respect to the harness's crash model: the volatile
backend applies calls atomically in memory (playing the disk for pure
simulations), the file backend appends checksummed records to a write-ahead
log and periodically folds them into a base image.

Record log format (wal.bin), fixed per golden tests:

    record  := type:u8  len:u32(BE)  crc32:u32(BE)  payload[len]
    crc32   := zlib.crc32(payload)

Payload encodings use the canonical value codec from core. A short final
record (torn write) is discarded on load; a checksum mismatch on a complete
record is fail-stop corruption.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

from .core import (
    Entry,
    InvalidArgument,
    Log,
    Round,
    SeqPaxosError,
    decode_entries,
    decode_entry,
    decode_round,
    encode_entries,
    encode_entry,
    encode_round,
)


class CorruptStorage(SeqPaxosError):
    pass


@dataclass
class PersistentState:
    """Everything a replica reloads after a crash."""

    config: int
    processes: tuple[int, ...]
    base: int  # |sigma_{config-1}|: global length handed over at start
    n_prom: Round
    n_a: Round
    v_a: Log
    l_d: int
    snapshot_blob: bytes = b""  # latest state-machine snapshot
    snapshot_covered: int = 0
    boot_blob: bytes = b""  # immutable bootstrap snapshot (initial-sequence handoff)
    boot_covered: int = 0
    pre_entries: tuple[Entry, ...] = ()  # sigma entries in [boot_covered, base)

    def clone(self) -> "PersistentState":
        return PersistentState(
            config=self.config,
            processes=self.processes,
            base=self.base,
            n_prom=self.n_prom,
            n_a=self.n_a,
            v_a=self.v_a.snapshot(),
            l_d=self.l_d,
            snapshot_blob=self.snapshot_blob,
            snapshot_covered=self.snapshot_covered,
            boot_blob=self.boot_blob,
            boot_covered=self.boot_covered,
            pre_entries=self.pre_entries,
        )


# Listener callback: (kind, detail) fired after each durable update; the
# simulator uses it for trace ordering and crash-point injection.
Listener = Callable[[str, str], None]


class Storage:
    """Shared persist logic; subclasses provide the durable medium."""

    def __init__(self):
        self.listener: Optional[Listener] = None
        self._state: Optional[PersistentState] = None

    # -- lifecycle ---------------------------------------------------------

    def bootstrap(
        self,
        config: int,
        processes,
        base: int,
        snapshot_blob: bytes = b"",
        snapshot_covered: int = 0,
        pre_entries: tuple[Entry, ...] = (),
    ) -> PersistentState:
        """Record the initial state of a configuration instance. Must be the
        first durable action for this (process, configuration)."""
        if self._state is not None:
            raise InvalidArgument("storage already bootstrapped")
        st = PersistentState(
            config=config,
            processes=tuple(sorted(processes)),
            base=base,
            n_prom=Round(config, 0),
            n_a=Round(config, 0),
            v_a=Log(offset=base),
            l_d=base,
            snapshot_blob=snapshot_blob,
            snapshot_covered=snapshot_covered,
            boot_blob=snapshot_blob,
            boot_covered=snapshot_covered,
            pre_entries=tuple(pre_entries),
        )
        self._state = st
        self._write_boot(st)
        self._notify("boot", f"cfg{config} base={base}")
        return st.clone()

    def load(self) -> Optional[PersistentState]:
        if self._state is None:
            return None
        return self._state.clone()

    # -- persist operations (monotone by contract) --------------------------

    def persist_promise(self, n: Round) -> None:
        st = self._require()
        st.n_prom = n
        self._write_record(_REC_PROM, encode_round(n))
        self._notify("prom", f"n={n.text()}")

    def persist_accept(self, n_a: Round, cut: int, suffix: tuple[Entry, ...]) -> None:
        """Composite accept: replace the log from global index `cut` with
        `suffix` and adopt round n_a (AcceptSync / leader adoption)."""
        st = self._require()
        st.n_a = n_a
        st.v_a.cut_and_extend(cut, suffix)
        self._write_record(
            _REC_ACC, encode_round(n_a) + struct.pack(">Q", cut) + encode_entries(suffix)
        )
        self._notify("acc", f"n={n_a.text()} cut={cut} len={st.v_a.glen()}")

    def persist_append(self, entry: Entry) -> None:
        """Single-entry append in the already accepted round."""
        st = self._require()
        st.v_a.entries.append(entry)
        self._write_record(_REC_APP, encode_entry(entry))
        self._notify("app", f"len={st.v_a.glen()}")

    def persist_decide(self, l_d: int) -> None:
        st = self._require()
        if l_d < st.l_d:
            raise InvalidArgument(f"l_d may not decrease ({st.l_d} -> {l_d})")
        st.l_d = l_d
        self._write_record(_REC_DEC, struct.pack(">Q", l_d))
        self._notify("dec", f"l={l_d}")

    def persist_snapshot(self, blob: bytes, covered: int) -> None:
        st = self._require()
        st.snapshot_blob = blob
        st.snapshot_covered = covered
        self._write_record(_REC_SNAP, struct.pack(">Q", covered) + blob)
        self._notify("snap", f"lk={covered}")

    def persist_truncate(self, up_to: int) -> None:
        st = self._require()
        st.v_a.truncate_to(up_to)
        self._write_record(_REC_TRUNC, struct.pack(">Q", up_to))
        self._notify("trunc", f"to={up_to}")
        self._maybe_compact()

    # -- internals -----------------------------------------------------------

    def _require(self) -> PersistentState:
        if self._state is None:
            raise InvalidArgument("storage not bootstrapped")
        return self._state

    def _notify(self, kind: str, detail: str) -> None:
        if self.listener is not None:
            self.listener(kind, detail)

    def _write_boot(self, st: PersistentState) -> None:
        raise NotImplementedError

    def _write_record(self, rtype: int, payload: bytes) -> None:
        raise NotImplementedError

    def _maybe_compact(self) -> None:
        pass


class VolatileStorage(Storage):
    """In-memory backend: the simulator keeps it across simulated crashes, so
    it plays the role of the disk without file I/O."""

    def _write_boot(self, st: PersistentState) -> None:
        pass

    def _write_record(self, rtype: int, payload: bytes) -> None:
        pass


# Record types
_REC_BOOT = 1
_REC_PROM = 2
_REC_ACC = 3
_REC_APP = 4
_REC_DEC = 5
_REC_SNAP = 6
_REC_TRUNC = 7

_HEADER = struct.Struct(">BII")


def pack_record(rtype: int, payload: bytes) -> bytes:
    return _HEADER.pack(rtype, len(payload), zlib.crc32(payload)) + payload


class FileStorage(Storage):
    """Append-only record log plus base image, one directory per
    (process, configuration)."""

    WAL = "wal.bin"
    BASE = "base.bin"
    COMPACT_AFTER = 4096  # wal records folded into the base image

    def __init__(self, directory: str):
        super().__init__()
        self.directory = directory
        self._wal_records = 0
        self._wal_fh = None
        existing = self._read_existing()
        if existing is not None:
            self._state = existing

    # -- durable writes ------------------------------------------------------

    def _open_wal(self):
        if self._wal_fh is None:
            os.makedirs(self.directory, exist_ok=True)
            self._wal_fh = open(os.path.join(self.directory, self.WAL), "ab")
        return self._wal_fh

    def _write_boot(self, st: PersistentState) -> None:
        self._write_record(_REC_BOOT, _encode_boot(st))

    def _write_record(self, rtype: int, payload: bytes) -> None:
        fh = self._open_wal()
        fh.write(pack_record(rtype, payload))
        fh.flush()
        self._wal_records += 1

    def _maybe_compact(self) -> None:
        if self._wal_records >= self.COMPACT_AFTER:
            self.compact()

    def compact(self) -> None:
        """Fold the record log into a fresh base image."""
        st = self._require()
        os.makedirs(self.directory, exist_ok=True)
        tmp = os.path.join(self.directory, self.BASE + ".tmp")
        with open(tmp, "wb") as fh:
            payload = _encode_state(st)
            fh.write(pack_record(_REC_BOOT, payload))
        os.replace(tmp, os.path.join(self.directory, self.BASE))
        if self._wal_fh is not None:
            self._wal_fh.close()
            self._wal_fh = None
        with open(os.path.join(self.directory, self.WAL), "wb"):
            pass
        self._wal_records = 0

    def close(self) -> None:
        if self._wal_fh is not None:
            self._wal_fh.close()
            self._wal_fh = None

    def wipe(self) -> None:
        self.close()
        for name in (self.WAL, self.BASE):
            path = os.path.join(self.directory, name)
            if os.path.exists(path):
                os.remove(path)
        self._state = None

    # -- load ----------------------------------------------------------------

    def _read_existing(self) -> Optional[PersistentState]:
        base_path = os.path.join(self.directory, self.BASE)
        wal_path = os.path.join(self.directory, self.WAL)
        st: Optional[PersistentState] = None
        if os.path.exists(base_path):
            with open(base_path, "rb") as fh:
                records = list(_iter_records(fh.read(), tolerate_torn_tail=False))
            if len(records) != 1 or records[0][0] != _REC_BOOT:
                raise CorruptStorage(f"bad base image in {self.directory}")
            st = _decode_state(records[0][1])
        if os.path.exists(wal_path):
            with open(wal_path, "rb") as fh:
                data = fh.read()
            for rtype, payload in _iter_records(data, tolerate_torn_tail=True):
                st = _apply_record(st, rtype, payload)
                self._wal_records += 1
        return st


def _apply_record(st: Optional[PersistentState], rtype: int, payload: bytes):
    if rtype == _REC_BOOT:
        return _decode_state(payload)
    if st is None:
        raise CorruptStorage("record log does not start with a bootstrap record")
    if rtype == _REC_PROM:
        st.n_prom, _ = decode_round(payload)
    elif rtype == _REC_ACC:
        n_a, pos = decode_round(payload)
        (cut,) = struct.unpack_from(">Q", payload, pos)
        suffix, _ = decode_entries(payload, pos + 8)
        st.n_a = n_a
        st.v_a.cut_and_extend(cut, suffix)
    elif rtype == _REC_APP:
        entry, _ = decode_entry(payload)
        st.v_a.entries.append(entry)
    elif rtype == _REC_DEC:
        (st.l_d,) = struct.unpack(">Q", payload)
    elif rtype == _REC_SNAP:
        (covered,) = struct.unpack_from(">Q", payload)
        st.snapshot_covered = covered
        st.snapshot_blob = payload[8:]
    elif rtype == _REC_TRUNC:
        (up_to,) = struct.unpack(">Q", payload)
        st.v_a.truncate_to(up_to)
    else:
        raise CorruptStorage(f"unknown record type {rtype}")
    return st


def _iter_records(data: bytes, tolerate_torn_tail: bool):
    pos = 0
    size = len(data)
    while pos < size:
        if size - pos < _HEADER.size:
            if tolerate_torn_tail:
                return  # torn header at tail
            raise CorruptStorage("truncated record header")
        rtype, length, crc = _HEADER.unpack_from(data, pos)
        body_start = pos + _HEADER.size
        if size - body_start < length:
            if tolerate_torn_tail:
                return  # torn payload at tail
            raise CorruptStorage("truncated record payload")
        payload = data[body_start : body_start + length]
        if zlib.crc32(payload) != crc:
            raise CorruptStorage("record checksum mismatch")
        yield rtype, payload
        pos = body_start + length


def _encode_boot(st: PersistentState) -> bytes:
    return _encode_state(st)


def _encode_state(st: PersistentState) -> bytes:
    parts = [
        struct.pack(">II", st.config, len(st.processes)),
        b"".join(struct.pack(">I", p) for p in st.processes),
        struct.pack(">Q", st.base),
        encode_round(st.n_prom),
        encode_round(st.n_a),
        struct.pack(">Q", st.v_a.offset),
        encode_entries(tuple(st.v_a.entries)),
        struct.pack(">Q", st.l_d),
        struct.pack(">Q", st.snapshot_covered),
        struct.pack(">I", len(st.snapshot_blob)),
        st.snapshot_blob,
        struct.pack(">Q", st.boot_covered),
        struct.pack(">I", len(st.boot_blob)),
        st.boot_blob,
        encode_entries(st.pre_entries),
    ]
    return b"".join(parts)


def _decode_state(payload: bytes) -> PersistentState:
    pos = 0
    config, nprocs = struct.unpack_from(">II", payload, pos)
    pos += 8
    procs = []
    for _ in range(nprocs):
        procs.append(struct.unpack_from(">I", payload, pos)[0])
        pos += 4
    (base,) = struct.unpack_from(">Q", payload, pos)
    pos += 8
    n_prom, pos = decode_round(payload, pos)
    n_a, pos = decode_round(payload, pos)
    (offset,) = struct.unpack_from(">Q", payload, pos)
    pos += 8
    entries, pos = decode_entries(payload, pos)
    (l_d,) = struct.unpack_from(">Q", payload, pos)
    pos += 8
    (covered,) = struct.unpack_from(">Q", payload, pos)
    pos += 8
    (bloblen,) = struct.unpack_from(">I", payload, pos)
    pos += 4
    blob = payload[pos : pos + bloblen]
    pos += bloblen
    (boot_covered,) = struct.unpack_from(">Q", payload, pos)
    pos += 8
    (bootlen,) = struct.unpack_from(">I", payload, pos)
    pos += 4
    boot = payload[pos : pos + bootlen]
    pos += bootlen
    pre, pos = decode_entries(payload, pos)
    return PersistentState(
        config=config,
        processes=tuple(procs),
        base=base,
        n_prom=n_prom,
        n_a=n_a,
        v_a=Log(offset, list(entries)),
        l_d=l_d,
        snapshot_blob=bytes(blob),
        snapshot_covered=covered,
        boot_blob=bytes(boot),
        boot_covered=boot_covered,
        pre_entries=pre,
    )


# ---------------------------------------------------------------------------
# Providers: hand out per-(process, configuration) storages and enumerate
# what survived a crash.


class StorageProvider:
    def storage(self, pid: int, config: int) -> Storage:
        raise NotImplementedError

    def configs(self, pid: int) -> list[int]:
        """Configurations with persisted data for this process."""
        raise NotImplementedError

    def wipe(self, pid: int, config: int) -> None:
        raise NotImplementedError


class VolatileProvider(StorageProvider):
    def __init__(self):
        self._stores: dict[tuple[int, int], VolatileStorage] = {}

    def storage(self, pid: int, config: int) -> Storage:
        key = (pid, config)
        if key not in self._stores:
            self._stores[key] = VolatileStorage()
        return self._stores[key]

    def configs(self, pid: int) -> list[int]:
        return sorted(
            cfg
            for (p, cfg), store in self._stores.items()
            if p == pid and store._state is not None
        )

    def wipe(self, pid: int, config: int) -> None:
        self._stores.pop((pid, config), None)


class FileProvider(StorageProvider):
    def __init__(self, root: str):
        self.root = root
        self._open: dict[tuple[int, int], FileStorage] = {}

    def _dir(self, pid: int, config: int) -> str:
        return os.path.join(self.root, f"p{pid}", f"cfg{config}")

    def storage(self, pid: int, config: int) -> Storage:
        key = (pid, config)
        store = self._open.get(key)
        if store is None:
            store = FileStorage(self._dir(pid, config))
            self._open[key] = store
        return store

    def configs(self, pid: int) -> list[int]:
        pdir = os.path.join(self.root, f"p{pid}")
        if not os.path.isdir(pdir):
            return []
        out = []
        for name in os.listdir(pdir):
            if name.startswith("cfg"):
                d = os.path.join(pdir, name)
                if os.path.exists(os.path.join(d, FileStorage.WAL)) or os.path.exists(
                    os.path.join(d, FileStorage.BASE)
                ):
                    store = self.storage(pid, int(name[3:]))
                    if store.load() is not None:
                        out.append(int(name[3:]))
        return sorted(out)

    def wipe(self, pid: int, config: int) -> None:
        store = self._open.pop((pid, config), None)
        if store is not None:
            store.wipe()
        else:
            FileStorage(self._dir(pid, config)).wipe()

    def crash(self, pid: int) -> None:
        """Drop open handles so a recovered process re-reads from disk."""
        for key in [k for k in self._open if k[0] == pid]:
            self._open[key].close()
            del self._open[key]
