import os
import zlib

import pytest

from seqpaxos.core import Command, Round, StopSign
from seqpaxos.storage import (
    CorruptStorage,
    FileProvider,
    FileStorage,
    VolatileStorage,
    pack_record,
)


def C(client, seq, op=None):
    return Command(client, seq, op)


SCRIPT = [
    ("persist_promise", (Round(0, 2),)),
    ("persist_accept", (Round(0, 2), 0, (C(1, 1, ("put", "a", b"1")), C(1, 2)))),
    ("persist_append", (C(2, 1),)),
    ("persist_append", (C(2, 2),)),
    ("persist_decide", (3,)),
    ("persist_snapshot", (b"blob-bytes", 3)),
    ("persist_promise", (Round(0, 7),)),
    ("persist_append", (StopSign(1, (1, 2, 4)),)),
    ("persist_decide", (5,)),
]


def run_script(store, upto=None):
    store.bootstrap(0, (1, 2, 3), 0)
    for name, args in SCRIPT[:upto]:
        getattr(store, name)(*args)


def assert_final_state(st):
    assert st.n_prom == Round(0, 7)
    assert st.n_a == Round(0, 2)
    assert st.l_d == 5
    assert st.v_a.glen() == 5
    assert st.v_a.entries[-1] == StopSign(1, (1, 2, 4))
    assert st.snapshot_blob == b"blob-bytes" and st.snapshot_covered == 3


@pytest.fixture(params=["volatile", "file"])
def store(request, tmp_path):
    if request.param == "volatile":
        return VolatileStorage()
    return FileStorage(str(tmp_path / "p1" / "cfg0"))


class TestRoundTrip:
    def test_cumulative_state(self, store):
        run_script(store)
        assert_final_state(store.load())

    def test_fresh_is_none(self, store):
        assert store.load() is None

    def test_reload_from_disk(self, tmp_path):
        d = str(tmp_path / "s")
        run_script(FileStorage(d))
        assert_final_state(FileStorage(d).load())

    def test_compacted_image_equivalent(self, tmp_path):
        d = str(tmp_path / "s")
        first = FileStorage(d)
        run_script(first)
        first.compact()
        assert os.path.getsize(os.path.join(d, FileStorage.WAL)) == 0
        assert_final_state(FileStorage(d).load())


class TestCrashPrefix:
    def test_every_persist_boundary_is_a_valid_cut(self, tmp_path):
        for k in range(len(SCRIPT) + 1):
            d = str(tmp_path / f"cut{k}")
            run_script(FileStorage(d), upto=k)
            expect = VolatileStorage()
            run_script(expect, upto=k)
            got = FileStorage(d).load()
            want = expect.load()
            assert got.n_prom == want.n_prom and got.n_a == want.n_a
            assert got.l_d == want.l_d
            assert got.v_a.offset == want.v_a.offset
            assert got.v_a.entries == want.v_a.entries

    def test_torn_tail_discarded(self, tmp_path):
        d = str(tmp_path / "torn")
        full = FileStorage(d)
        run_script(full)
        full.close()
        wal = os.path.join(d, FileStorage.WAL)
        size = os.path.getsize(wal)
        with open(wal, "rb+") as fh:
            fh.truncate(size - 3)  # tear the last record mid-payload
        st = FileStorage(d).load()
        assert st.l_d == 3  # everything before the torn record survives
        assert st.v_a.entries[-1] == StopSign(1, (1, 2, 4))

    def test_checksum_corruption_is_fail_stop(self, tmp_path):
        d = str(tmp_path / "corrupt")
        full = FileStorage(d)
        run_script(full)
        full.close()
        wal = os.path.join(d, FileStorage.WAL)
        with open(wal, "rb+") as fh:
            fh.seek(20)
            b = fh.read(1)
            fh.seek(20)
            fh.write(bytes([b[0] ^ 0xFF]))
        with pytest.raises(CorruptStorage):
            FileStorage(d).load()


class TestTruncate:
    def test_offset_and_remainder(self, store):
        store.bootstrap(0, (1, 2, 3), 0)
        store.persist_accept(Round(0, 1), 0, tuple(C(1, i) for i in range(7)))
        store.persist_truncate(3)
        st = store.load()
        assert st.v_a.offset == 3 and len(st.v_a.entries) == 4
        assert st.v_a.glen() == 7

    def test_survives_reload(self, tmp_path):
        d = str(tmp_path / "s")
        s = FileStorage(d)
        s.bootstrap(0, (1, 2), 0)
        s.persist_accept(Round(0, 1), 0, tuple(C(1, i) for i in range(7)))
        s.persist_truncate(3)
        st = FileStorage(d).load()
        assert st.v_a.offset == 3 and st.v_a.glen() == 7


class TestListener:
    def test_fires_in_call_order(self):
        store = VolatileStorage()
        seen = []
        store.listener = lambda kind, detail: seen.append(kind)
        store.bootstrap(0, (1,), 0)
        store.persist_promise(Round(0, 1))
        store.persist_append(C(1, 1))
        store.persist_decide(1)
        assert seen == ["boot", "prom", "app", "dec"]


class TestGoldenFormat:
    def test_record_layout(self):
        payload = b"payload"
        rec = pack_record(5, payload)
        assert rec[0] == 5
        assert int.from_bytes(rec[1:5], "big") == len(payload)
        assert int.from_bytes(rec[5:9], "big") == zlib.crc32(payload)
        assert rec[9:] == payload

    def test_wal_bytes_frozen(self, tmp_path):
        d = str(tmp_path / "golden")
        s = FileStorage(d)
        s.bootstrap(0, (1, 2), 0)
        s.persist_promise(Round(0, 3))
        s.persist_decide(0)
        s.close()
        with open(os.path.join(d, FileStorage.WAL), "rb") as fh:
            data = fh.read()
        # boot record (cfg 0, procs (1,2), base 0, zero rounds, empty log),
        # then promise (round 0.3), then decide (l_d = 0)
        assert data.hex() == (
            "0100000060a28ee4d90000000000000002000000010000000200000000000000"
            "0000000000000000000000000000000000000000000000000000000000000000"
            "0000000000000000000000000000000000000000000000000000000000000000"
            "000000000000000000020000000ce2dc97d50000000000000000000000030500"
            "0000086522df690000000000000000"
        )


class TestProvider:
    def test_file_provider_enumerates_configs(self, tmp_path):
        prov = FileProvider(str(tmp_path))
        s0 = prov.storage(1, 0)
        s0.bootstrap(0, (1, 2), 0)
        s1 = prov.storage(1, 1)
        s1.bootstrap(1, (1, 2), 4)
        prov.crash(1)
        assert prov.configs(1) == [0, 1]
        assert prov.configs(2) == []
        prov.wipe(1, 0)
        assert prov.configs(1) == [1]
