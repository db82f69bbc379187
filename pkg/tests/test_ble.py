import pytest

from seqpaxos.ble import (
    ble_check_leader,
    ble_init,
    ble_on_heartbeat_reply,
    ble_on_heartbeat_request,
    ble_on_timeout,
)
from seqpaxos.core import HeartbeatReply, HeartbeatRequest, InvalidArgument, ballot_make


class TestInit:
    def test_fresh_start(self):
        st = ble_init(1, {1, 2, 3})
        assert st.own_ballot == 1  # s=0 folded with pid 1
        assert st.max_ballot == 1
        assert st.leader is None and st.round == 0 and st.ballots == {}

    def test_recovery_seed(self):
        st = ble_init(1, {1, 2, 3}, seed_ballot=2049)
        assert st.max_ballot == 2049
        assert st.own_ballot == 1

    def test_self_must_be_member(self):
        with pytest.raises(InvalidArgument):
            ble_init(9, {1, 2, 3})


class TestTimeout:
    def test_one_reply_reaches_majority_of_three(self):
        st = ble_init(1, {1, 2, 3})
        ble_on_heartbeat_reply(st, 2, 0, ballot_make(0, 2))
        msgs, event = ble_on_timeout(st)
        # self plus one reply is a majority: the check ran and adopted p2
        assert event == (2, ballot_make(0, 2))
        assert st.round == 1 and st.ballots == {}
        assert [dst for dst, _ in msgs] == [2, 3]
        assert all(isinstance(m, HeartbeatRequest) for _, m in msgs)

    def test_no_replies_skips_check_but_advances(self):
        st = ble_init(1, {1, 2, 3})
        msgs, event = ble_on_timeout(st)
        assert event is None
        assert st.round == 1
        assert len(msgs) == 2

    def test_single_process_elects_itself_once(self):
        st = ble_init(1, {1})
        events = []
        for _ in range(5):
            msgs, event = ble_on_timeout(st)
            assert msgs == []
            if event:
                events.append(event)
        assert events == [(1, ballot_make(0, 1))]


class TestCheckLeader:
    def test_adopts_top_ballot(self):
        st = ble_init(1, {1, 2, 3})
        st.own_ballot = 4
        st.max_ballot = 4
        st.ballots = {2: 5}
        event = ble_check_leader(st)
        assert event == (2, 5)
        assert st.leader == (2, 5) and st.max_ballot == 5

    def test_bumps_own_ballot_above_stale_max(self):
        st = ble_init(1, {1, 2, 3})
        st.own_ballot = ballot_make(0, 1)
        st.max_ballot = 9 * 1024 + 2
        st.ballots = {2: 5}
        event = ble_check_leader(st)
        assert event is None
        assert st.leader is None
        assert st.own_ballot > st.max_ballot
        assert st.own_ballot % 1024 == 1  # still decodes to the owner

    def test_same_top_fires_no_duplicate(self):
        st = ble_init(1, {1, 2, 3})
        st.ballots = {2: 5}
        assert ble_check_leader(st) == (2, 5)
        st.ballots = {2: 5}
        assert ble_check_leader(st) is None

    def test_reelection_with_higher_ballot_fires(self):
        st = ble_init(1, {1, 2, 3})
        st.ballots = {2: 5}
        assert ble_check_leader(st) == (2, 5)
        st.ballots = {2: 5 + 1024}
        assert ble_check_leader(st) == (2, 5 + 1024)


class TestHeartbeats:
    def test_request_adopts_higher_max(self):
        st = ble_init(1, {1, 2})
        st.max_ballot = 3
        dst, reply = ble_on_heartbeat_request(st, 2, 7, 7)
        assert st.max_ballot == 7
        assert dst == 2 and reply == HeartbeatReply(7, st.own_ballot)

    def test_request_keeps_higher_local_max(self):
        st = ble_init(1, {1, 2})
        st.max_ballot = 3
        _, reply = ble_on_heartbeat_request(st, 2, 7, 2)
        assert st.max_ballot == 3
        assert reply.ballot == st.own_ballot

    def test_on_time_reply_recorded(self):
        st = ble_init(1, {1, 2, 3})
        ble_on_heartbeat_reply(st, 2, st.round, 8)
        assert st.ballots == {2: 8}

    def test_late_reply_bumps_delay(self):
        st = ble_init(1, {1, 2, 3})
        ble_on_timeout(st)
        before = st.delay
        ble_on_heartbeat_reply(st, 2, 0, 8)  # reply for the previous round
        assert st.delay == before + st.delta
        assert st.ballots == {}

    def test_duplicate_reply_single_entry(self):
        st = ble_init(1, {1, 2, 3})
        ble_on_heartbeat_reply(st, 2, 0, 8)
        ble_on_heartbeat_reply(st, 2, 0, 8)
        assert st.ballots == {2: 8}
