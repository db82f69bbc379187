import pytest
from hypothesis import given, strategies as st

from seqpaxos.core import (
    Command,
    InvalidArgument,
    Log,
    LogStopped,
    Round,
    StopSign,
    TruncationViolated,
    ReplicaId,
    ballot_make,
    ballot_pid,
    ballot_seq,
    decode_entries,
    encode_entries,
    entries_size,
    max_promise,
    round_cmp,
    seq_append,
    seq_prefix,
    seq_suffix,
)


def C(client, seq, op=None):
    return Command(client, seq, op)


class TestBallot:
    def test_fold_examples(self):
        assert ballot_make(0, 2, cap=3) == 2
        assert ballot_make(2, 1, cap=3) == 7

    def test_pid_out_of_range(self):
        with pytest.raises(InvalidArgument):
            ballot_make(1, 5, cap=3)

    @given(st.integers(0, 500), st.integers(0, 9))
    def test_decode_recovers_components(self, s, pid):
        b = ballot_make(s, pid, cap=10)
        assert ballot_seq(b, cap=10) == s
        assert ballot_pid(b, cap=10) == pid

    @given(st.tuples(st.integers(0, 50), st.integers(0, 9)), st.tuples(st.integers(0, 50), st.integers(0, 9)))
    def test_injective(self, a, b):
        ba = ballot_make(a[0], a[1], cap=10)
        bb = ballot_make(b[0], b[1], cap=10)
        assert (ba == bb) == (a == b)


class TestRoundOrder:
    def test_higher_config_dominates(self):
        assert round_cmp(Round(0, 9), Round(1, 0)) == -1

    def test_reflexive(self):
        assert round_cmp(Round(1, 3), Round(1, 3)) == 0

    def test_ballot_tiebreak(self):
        assert round_cmp(Round(2, 1), Round(2, 0)) == 1

    rounds = st.builds(Round, st.integers(0, 3), st.integers(0, 5))

    @given(rounds, rounds)
    def test_antisymmetric(self, a, b):
        if round_cmp(a, b) == 0:
            assert a == b
        else:
            assert round_cmp(a, b) == -round_cmp(b, a)

    @given(rounds, rounds, rounds)
    def test_transitive(self, a, b, c):
        if a <= b and b <= c:
            assert a <= c

    @given(st.integers(0, 3), st.integers(0, 100), st.integers(0, 100))
    def test_config_dominant(self, i, b1, b2):
        assert Round(i, b1) < Round(i + 1, b2)


class TestAppend:
    def test_dedup_on_skips_existing(self):
        v = (C(1, 1), C(1, 2))
        assert seq_append(v, C(1, 1), dedup=True) == v

    def test_dedup_off_always_extends(self):
        v = (C(1, 1), C(1, 2))
        assert seq_append(v, C(1, 1), dedup=False) == v + (C(1, 1),)

    def test_empty(self):
        assert seq_append((), C(1, 1), dedup=True) == (C(1, 1),)

    def test_append_after_stop_fails(self):
        v = (C(1, 1), StopSign(1, (1, 2)))
        with pytest.raises(LogStopped):
            seq_append(v, C(1, 2), dedup=False)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=6))
    def test_dedup_idempotent(self, pairs):
        v = ()
        for client, seq in pairs:
            v = seq_append(v, C(client, seq), dedup=True)
        once = v
        for client, seq in pairs:
            v = seq_append(v, C(client, seq), dedup=True)
        assert v == once


class TestPrefixSuffix:
    def test_examples(self):
        assert seq_prefix(("a", "b", "c"), 2) == ("a", "b")
        assert seq_suffix(("a", "b", "c"), 2) == ("c",)
        assert seq_suffix(("a",), 5) == ()

    @given(st.lists(st.integers(), max_size=8), st.integers(0, 8))
    def test_concat_inverse(self, v, l):
        v = tuple(v)
        assert seq_prefix(v, l) + seq_suffix(v, l) == v


class TestMaxPromise:
    r1 = ReplicaId(0, 1)
    r2 = ReplicaId(0, 2)

    def test_max_round_wins_even_if_shorter(self):
        promises = [
            (self.r1, Round(0, 2), (C(1, 1),)),
            (self.r2, Round(0, 3), ()),
        ]
        assert max_promise(promises) == ()

    def test_longest_among_equal_rounds(self):
        promises = [
            (self.r1, Round(0, 2), (C(1, 1),)),
            (self.r2, Round(0, 2), (C(1, 1), C(1, 2))),
        ]
        assert max_promise(promises) == (C(1, 1), C(1, 2))

    def test_singleton(self):
        assert max_promise([(self.r1, Round(0, 1), ())]) == ()

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgument):
            max_promise([])

    @given(
        st.lists(
            st.tuples(
                st.integers(1, 5),
                st.integers(0, 3),
                st.integers(0, 4),
            ),
            min_size=1,
            max_size=6,
            unique_by=lambda t: t[0],
        )
    )
    def test_matches_bruteforce(self, raw):
        promises = [
            (ReplicaId(0, pid), Round(0, ballot), tuple(C(9, i) for i in range(ln)))
            for pid, ballot, ln in raw
        ]
        # independent oracle: max on (round, length), lowest replica id on ties
        best = sorted(
            promises, key=lambda p: (p[1], len(p[2]), [-p[0].config, -p[0].process])
        )[-1]
        assert max_promise(promises) == best[2]


class TestLog:
    def test_global_indexing(self):
        log = Log(offset=3, entries=[C(1, 1), C(1, 2)])
        assert log.glen() == 5
        assert log.get(3) == C(1, 1)
        assert log.get(4) == C(1, 2)
        with pytest.raises(TruncationViolated):
            log.get(2)

    def test_suffix_from_below_offset(self):
        log = Log(offset=3, entries=[C(1, 1)])
        with pytest.raises(TruncationViolated):
            log.suffix_from(2)
        assert log.suffix_from(3) == (C(1, 1),)
        assert log.suffix_from(9) == ()

    def test_cut_and_extend(self):
        log = Log(0, [C(1, 1), C(1, 2), C(1, 3)])
        log.cut_and_extend(1, (C(2, 1), C(2, 2)))
        assert [e.text() for e in log.entries] == ["1:1", "2:1", "2:2"]

    def test_truncate_preserves_content(self):
        log = Log(0, [C(1, i) for i in range(7)])
        before = {g: log.get(g) for g in range(3, 7)}
        log.truncate_to(3)
        assert log.offset == 3 and len(log.entries) == 4
        assert {g: log.get(g) for g in range(3, 7)} == before

    def test_stopped(self):
        assert not Log(0, []).stopped()
        assert not Log(0, [C(1, 1)]).stopped()
        assert Log(0, [C(1, 1), StopSign(1, (1, 2))]).stopped()


class TestCodec:
    def test_roundtrip(self):
        entries = (
            C(1, 4, ("put", "k", b"v")),
            C(-3, 2, ("snap", 3, 2, 32)),
            StopSign(2, (1, 2, 4)),
        )
        blob = encode_entries(entries)
        decoded, pos = decode_entries(blob)
        assert pos == len(blob)
        assert decoded == entries
        assert decoded[2].processes == (1, 2, 4)

    def test_empty_suffix_measures_zero_bytes(self):
        assert entries_size(()) == 0
        assert entries_size((C(1, 1),)) > 0
