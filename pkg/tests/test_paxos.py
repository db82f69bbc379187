"""Single-step replays of the replica transition function against
hand-executed expectations, plus brute-force oracles for chosen lengths."""

from itertools import combinations

import pytest

from seqpaxos.core import (
    Accept,
    Accepted,
    AcceptSync,
    Command,
    Decide,
    Log,
    LogStopped,
    Prepare,
    PrepareReq,
    Promise,
    Round,
    StopSign,
)
from seqpaxos.paxos import (
    MUTATION_ACCEPT_STALE,
    MUTATION_EXTEND_PAST_SS,
    MUTATION_OMIT_NA_GUARD,
    MUTATION_SKIP_PROM_PERSIST,
    Phase,
    Replica,
    Role,
    recover_replica,
)
from seqpaxos.storage import VolatileStorage


def C(client, seq):
    return Command(client, seq)


def make_replica(pid, procs=(1, 2, 3), config=0, sigma_len=0, **kw):
    store = VolatileStorage()
    store.bootstrap(config, procs, sigma_len)
    return Replica(config, procs, pid, store, sigma_len=sigma_len, **kw)


def elect(replica, ballot):
    return replica.on_leader(replica.self_pid, ballot)


class TestOnLeader:
    def test_fresh_election_sends_prepares(self):
        r = make_replica(1)
        out = elect(r, 1)
        assert (r.role, r.phase) == (Role.LEADER, Phase.PREPARE)
        assert out.sends == [
            (2, Prepare(Round(0, 1), 0, Round(0, 0))),
            (3, Prepare(Round(0, 1), 0, Round(0, 0))),
        ]
        assert r.promises == {r.rself: (Round(0, 0), ())}
        assert r.lds[r.rself] == 0

    def test_stale_ballot_only_demotes(self):
        r = make_replica(1)
        r.n_prom = Round(0, 100)
        out = elect(r, 1)
        assert out.sends == []
        assert (r.role, r.phase) == (Role.FOLLOWER, Phase.NONE)

    def test_recovering_follower_sends_prepare_req(self):
        r = make_replica(1)
        r.phase = Phase.RECOVER
        out = r.on_leader(3, 3)
        assert out.sends == [(3, PrepareReq())]
        assert r.phase is Phase.RECOVER


class TestOnPrepare:
    def test_promise_carries_suffix_beyond_leader_decided(self):
        r = make_replica(2)
        r.n_prom = Round(0, 1)
        r.n_a = Round(0, 1)
        r.v_a = Log(0, [C(1, i) for i in range(5)])
        r.l_d = 3
        out = r.on_prepare(1, Prepare(Round(0, 2), ld=3, na=Round(0, 1)))
        assert out.sends == [
            (1, Promise(Round(0, 2), Round(0, 1), (C(1, 3), C(1, 4)), 3))
        ]
        assert r.n_prom == Round(0, 2)
        assert (r.role, r.phase) == (Role.FOLLOWER, Phase.PREPARE)

    def test_stale_log_guard_withholds_suffix(self):
        r = make_replica(2)
        r.n_a = Round(0, 1)
        r.v_a = Log(0, [C(9, i) for i in range(1000)])
        r.l_d = 0
        out = r.on_prepare(1, Prepare(Round(0, 5), ld=0, na=Round(0, 3)))
        (dst, promise), = out.sends
        assert promise.suffix == ()

    def test_lower_round_ignored(self):
        r = make_replica(2)
        r.n_prom = Round(0, 7)
        out = r.on_prepare(1, Prepare(Round(0, 7), ld=0, na=Round(0, 0)))
        assert out.sends == []


class TestPromisePreparePhase:
    def test_majority_flushes_buffered_command(self):
        r = make_replica(1)
        elect(r, 1)
        r.on_propose(C(7, 1))  # buffered during prepare
        out = r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (), 0))
        assert (r.role, r.phase) == (Role.LEADER, Phase.ACCEPT)
        assert [e.text() for e in r.v_a.entries] == ["7:1"]
        assert out.sends == [(2, AcceptSync(Round(0, 1), (C(7, 1),), 0))]
        assert r.las[r.rself] == 1

    def test_adopted_stop_sign_discards_buffer(self):
        r = make_replica(1)
        elect(r, 1)
        r.on_propose(C(7, 1))
        ss = StopSign(1, (1, 2, 3))
        out = r.on_promise(
            2, Promise(Round(0, 1), Round(0, 0), (C(5, 1), ss), 0)
        )
        assert r.stopped()
        assert [e.text() for e in r.v_a.entries] == ["5:1", ss.text()]
        assert r.prop_buffer == []
        sync = out.sends[0][1]
        assert sync.suffix[-1] == ss

    def test_buffered_stop_sign_ordered_last(self):
        r = make_replica(1)
        elect(r, 1)
        ss = StopSign(1, (1, 2, 3))
        r.on_propose(ss)
        r.on_propose(C(7, 1))
        r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (), 0))
        assert [type(e).__name__ for e in r.v_a.entries] == ["Command", "StopSign"]

    def test_below_majority_only_bookkeeping(self):
        r = make_replica(1, procs=(1, 2, 3, 4, 5))
        elect(r, 1)
        out = r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (), 0))
        assert out.sends == []
        assert r.phase is Phase.PREPARE
        assert r.lds[r.rid_of[2]] == 0


class TestPromiseAcceptPhase:
    def _leader_with_decided(self, n_entries, decided):
        r = make_replica(1)
        elect(r, 1)
        r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (), 0))
        for i in range(n_entries):
            r.on_propose(C(7, i + 1))
        r.las[r.rid_of[2]] = n_entries
        r.l_c = decided
        return r

    def test_late_follower_gets_sync_then_decide(self):
        r = self._leader_with_decided(4, 4)
        out = r.on_promise(3, Promise(Round(0, 1), Round(0, 0), (), 0))
        sync = out.sends[0]
        assert sync[0] == 3
        assert len(sync[1].suffix) == 4 and sync[1].ld == 0
        assert out.sends[1] == (3, Decide(4, Round(0, 1)))

    def test_nothing_decided_sends_sync_only(self):
        r = self._leader_with_decided(2, 0)
        out = r.on_promise(3, Promise(Round(0, 1), Round(0, 0), (), 0))
        assert len(out.sends) == 1
        assert isinstance(out.sends[0][1], AcceptSync)

    def test_wrong_round_ignored(self):
        r = self._leader_with_decided(2, 2)
        out = r.on_promise(3, Promise(Round(0, 9), Round(0, 0), (), 0))
        assert out.sends == []


class TestAcceptSync:
    def test_rewrites_from_cut(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.role, r.phase = Role.FOLLOWER, Phase.PREPARE
        r.v_a = Log(0, [C(1, i) for i in range(5)])
        out = r.on_accept_sync(
            1, AcceptSync(Round(0, 2), (C(2, 1), C(2, 2), C(2, 3)), 3)
        )
        assert r.v_a.glen() == 6
        assert out.sends == [(1, Accepted(Round(0, 2), 6))]
        assert r.phase is Phase.ACCEPT
        assert r.n_a == Round(0, 2)

    def test_wrong_round_ignored(self):
        r = make_replica(2)
        r.n_prom = Round(0, 5)
        r.phase = Phase.PREPARE
        out = r.on_accept_sync(1, AcceptSync(Round(0, 2), (), 0))
        assert out.sends == [] and r.phase is Phase.PREPARE

    def test_wrong_phase_ignored(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.phase = Phase.ACCEPT
        before = r.v_a.glen()
        out = r.on_accept_sync(1, AcceptSync(Round(0, 2), (C(1, 1),), 0))
        assert out.sends == [] and r.v_a.glen() == before


class TestAccept:
    def _synced_follower(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.n_a = Round(0, 2)
        r.role, r.phase = Role.FOLLOWER, Phase.ACCEPT
        return r

    def test_appends_and_acks(self):
        r = self._synced_follower()
        out = r.on_accept(1, Accept(Round(0, 2), C(1, 1)))
        assert r.v_a.glen() == 1
        assert out.sends == [(1, Accepted(Round(0, 2), 1))]

    def test_stale_round_ignored(self):
        r = self._synced_follower()
        out = r.on_accept(1, Accept(Round(0, 1), C(1, 1)))
        assert out.sends == [] and r.v_a.glen() == 0

    def test_accept_past_stop_surfaces_error(self):
        r = self._synced_follower()
        r.v_a = Log(0, [StopSign(1, (1, 2, 3))])
        with pytest.raises(LogStopped):
            r.on_accept(1, Accept(Round(0, 2), C(1, 1)))


def bruteforce_chosen(las_values, majority):
    best = 0
    for size in range(majority, len(las_values) + 1):
        for subset in combinations(las_values, size):
            best = max(best, min(subset))
    return best


class TestAccepted:
    def _leader(self, entries):
        r = make_replica(1)
        elect(r, 1)
        r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (), 0))
        for i in range(entries):
            r.on_propose(C(7, i + 1))
        return r

    def test_majority_at_two_decides_two(self):
        r = self._leader(2)
        out = r.on_accepted(2, Accepted(Round(0, 1), 2))
        # las = {self: 2, r2: 2, r3: 0} -> chosen 2
        assert r.l_c == 2
        assert (2, Decide(2, Round(0, 1))) in out.sends
        assert [g for g, _ in out.decided] == [0, 1]  # self-delivery

    def test_late_smaller_la_never_regresses(self):
        r = self._leader(2)
        r.on_accepted(2, Accepted(Round(0, 1), 2))
        out = r.on_accepted(3, Accepted(Round(0, 1), 1))
        assert r.l_c == 2
        assert out.sends == []

    def test_mixed_las_choose_median_supported(self):
        r = self._leader(3)
        r.on_promise(3, Promise(Round(0, 1), Round(0, 0), (), 0))
        r.on_accepted(3, Accepted(Round(0, 1), 2))
        # las = {self: 3, r2: 0(sync pending), r3: 2} -> majority supports 2
        assert r.l_c == 2

    @pytest.mark.parametrize(
        "las",
        [(2, 2, 0), (3, 1, 2), (5, 5, 5), (0, 0, 4), (1, 2, 3)],
    )
    def test_matches_bruteforce_over_majority_subsets(self, las):
        r = self._leader(0)
        for rid, la in zip(sorted(r.las), las):
            r.las[rid] = la
        assert r._chosen_length() == bruteforce_chosen(las, r.majority())


class TestDecide:
    def test_delivers_gap_to_target(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.phase = Phase.ACCEPT
        r.v_a = Log(0, [C(1, i) for i in range(4)])
        r.l_d = 1
        out = r.on_decide(Decide(3, Round(0, 2)))
        assert [(g, e.text()) for g, e in out.decided] == [(1, "1:1"), (2, "1:2")]
        assert r.l_d == 3

    def test_stale_round_ignored(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.v_a = Log(0, [C(1, 0)])
        out = r.on_decide(Decide(1, Round(0, 1)))
        assert out.decided == [] and r.l_d == 0

    def test_no_op_when_behind(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.phase = Phase.ACCEPT
        r.l_d = 3
        r.v_a = Log(0, [C(1, i) for i in range(3)])
        out = r.on_decide(Decide(2, Round(0, 2)))
        assert out.decided == []

    def test_stop_delivery_raises_flag(self):
        r = make_replica(2)
        r.n_prom = Round(0, 2)
        r.phase = Phase.ACCEPT
        r.v_a = Log(0, [C(1, 0), StopSign(1, (1, 2))])
        out = r.on_decide(Decide(2, Round(0, 2)))
        assert out.stopped


class TestPropose:
    def test_leader_in_accept_broadcasts(self):
        r = make_replica(1)
        elect(r, 1)
        r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (), 0))
        r.on_promise(3, Promise(Round(0, 1), Round(0, 0), (), 0))
        out = r.on_propose(C(7, 1))
        assert sorted(dst for dst, _ in out.sends) == [2, 3]
        assert all(isinstance(m, Accept) for _, m in out.sends)

    def test_stopped_leader_drops(self):
        r = make_replica(1)
        elect(r, 1)
        r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (StopSign(1, (1, 2)),), 0))
        out = r.on_propose(C(7, 1))
        assert out.sends == []
        assert r.v_a.glen() == 1

    def test_follower_drops(self):
        r = make_replica(2)
        out = r.on_propose(C(7, 1))
        assert out.sends == [] and r.prop_buffer == []


class TestPrepareReq:
    def test_leader_resends_prepare(self):
        r = make_replica(1)
        elect(r, 1)
        out = r.on_prepare_req(3)
        assert out.sends == [(3, Prepare(Round(0, 1), 0, Round(0, 0)))]

    def test_follower_ignores(self):
        r = make_replica(2)
        assert r.on_prepare_req(3).sends == []


class TestConnectionLost:
    def test_follower_losing_leader_recovers(self):
        r = make_replica(2)
        r.on_leader(1, 1)  # learns the leader
        r.on_connection_lost(1)
        assert r.phase is Phase.RECOVER

    def test_leader_unaffected(self):
        r = make_replica(1)
        elect(r, 1)
        r.on_connection_lost(2)
        assert (r.role, r.phase) == (Role.LEADER, Phase.PREPARE)

    def test_other_peer_unaffected(self):
        r = make_replica(2)
        r.on_leader(1, 1)
        r.on_connection_lost(3)
        assert r.phase is not Phase.RECOVER


class TestRecovery:
    def test_recovers_decided_prefix(self):
        store = VolatileStorage()
        store.bootstrap(0, (1, 2, 3), 0)
        store.persist_promise(Round(0, 2))
        store.persist_accept(Round(0, 2), 0, tuple(C(1, i) for i in range(5)))
        store.persist_decide(5)
        r = recover_replica(store, 2)
        assert r.l_d == 5 and r.v_a.glen() == 5
        assert r.phase is Phase.RECOVER
        assert r.on_decide(Decide(5, Round(0, 2))).decided == []

    def test_fresh_storage_returns_none(self):
        assert recover_replica(VolatileStorage(), 2) is None

    def test_recovered_promise_seeds_ble(self):
        store = VolatileStorage()
        store.bootstrap(0, (1, 2, 3), 0)
        store.persist_promise(Round(0, 2049))
        r = recover_replica(store, 2)
        assert r.n_prom.ballot == 2049


class TestStopped:
    def test_cases(self):
        r = make_replica(1)
        assert not r.stopped()
        r.v_a = Log(0, [C(1, 1)])
        assert not r.stopped()
        r.v_a = Log(0, [C(1, 1), StopSign(1, (1, 2))])
        assert r.stopped()


class TestMutations:
    def test_skip_prom_persist_leaves_storage_stale(self):
        r = make_replica(2, mutation=MUTATION_SKIP_PROM_PERSIST)
        r.on_prepare(1, Prepare(Round(0, 2), 0, Round(0, 0)))
        assert r.n_prom == Round(0, 2)
        assert r.storage.load().n_prom == Round(0, 0)

    def test_accept_stale_takes_lower_round(self):
        r = make_replica(2, mutation=MUTATION_ACCEPT_STALE)
        r.n_prom = Round(0, 5)
        r.role, r.phase = Role.FOLLOWER, Phase.ACCEPT
        out = r.on_accept(1, Accept(Round(0, 1), C(1, 1)))
        assert r.v_a.glen() == 1 and out.sends

    def test_omit_na_guard_leaks_stale_suffix(self):
        r = make_replica(2, mutation=MUTATION_OMIT_NA_GUARD)
        r.n_a = Round(0, 1)
        r.v_a = Log(0, [C(9, 1)])
        out = r.on_prepare(1, Prepare(Round(0, 5), 0, Round(0, 3)))
        assert out.sends[0][1].suffix == (C(9, 1),)

    def test_extend_past_ss_appends_after_stop(self):
        r = make_replica(1, mutation=MUTATION_EXTEND_PAST_SS)
        elect(r, 1)
        r.on_promise(2, Promise(Round(0, 1), Round(0, 0), (StopSign(1, (1, 2)),), 0))
        out = r.on_propose(C(7, 1))
        assert r.v_a.glen() == 2  # entry written past the stop-sign
        assert out.sends
