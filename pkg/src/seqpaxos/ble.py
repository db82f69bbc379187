"""Gossip-based Ballot Leader Election.

Each process gossips its ballot with periodic heartbeat rounds and elects the
maximal ballot it can prove alive at a majority. Ballots fold (sequence,
pid) so they are globally unique and locally monotone; a process that finds
its own ballot below the maximum it has seen bumps itself above it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (
    BALLOT_CAP,
    HeartbeatReply,
    HeartbeatRequest,
    InvalidArgument,
    ballot_increment,
    ballot_make,
)

# Default heartbeat period (simulated time units).
DEFAULT_DELTA = 10


@dataclass
class BleState:
    self_pid: int
    processes: tuple[int, ...]
    delta: int
    cap: int = BALLOT_CAP
    round: int = 0
    ballots: dict[int, int] = field(default_factory=dict)  # pid -> ballot
    own_ballot: int = 0
    max_ballot: int = 0
    leader: Optional[tuple[int, int]] = None  # (pid, ballot)
    delay: int = 0

    def majority(self) -> int:
        return len(self.processes) // 2 + 1


def ble_init(
    self_pid: int,
    processes,
    delta: int = DEFAULT_DELTA,
    seed_ballot: int = 0,
    cap: int = BALLOT_CAP,
) -> BleState:
    """Fresh election state. `seed_ballot` carries a recovered promise ballot
    so a restarted process starts from where it left off."""
    procs = tuple(sorted(processes))
    if self_pid not in procs:
        raise InvalidArgument(f"p{self_pid} not in process set {procs}")
    own = ballot_make(0, self_pid, cap)
    return BleState(
        self_pid=self_pid,
        processes=procs,
        delta=delta,
        cap=cap,
        own_ballot=own,
        max_ballot=max(own, seed_ballot),
        delay=delta,
    )


def ble_check_leader(st: BleState) -> Optional[tuple[int, int]]:
    """Evaluate the collected ballots plus self; returns a Leader event
    (pid, ballot) when a new leader is adopted."""
    top_pid, top_ballot = st.self_pid, st.own_ballot
    for pid, ballot in st.ballots.items():
        if ballot > top_ballot:
            top_pid, top_ballot = pid, ballot
    if top_ballot < st.max_ballot:
        while st.own_ballot <= st.max_ballot:
            st.own_ballot = ballot_increment(st.own_ballot, st.cap)
        st.leader = None
        return None
    if (top_pid, top_ballot) != st.leader:
        st.max_ballot = top_ballot
        st.leader = (top_pid, top_ballot)
        return st.leader
    return None


def ble_on_timeout(st: BleState):
    """Heartbeat period elapsed: run the leader check when a majority
    (counting self) replied, then start the next round.

    Returns (messages, leader_event) where messages is a list of
    (dst_pid, HeartbeatRequest)."""
    event = None
    if len(st.ballots) + 1 >= st.majority():
        event = ble_check_leader(st)
    st.ballots = {}
    st.round += 1
    msgs = [
        (p, HeartbeatRequest(st.round, st.max_ballot))
        for p in st.processes
        if p != st.self_pid
    ]
    return msgs, event


def ble_on_heartbeat_request(st: BleState, frm: int, r: int, b_max: int):
    """Adopt a higher gossiped maximum and always reply with our ballot."""
    if b_max > st.max_ballot:
        st.max_ballot = b_max
    return (frm, HeartbeatReply(r, st.own_ballot))


def ble_on_heartbeat_reply(st: BleState, frm: int, r: int, b: int) -> None:
    """Record an on-time reply; a late one widens the heartbeat window."""
    if r == st.round:
        st.ballots[frm] = b
    else:
        st.delay += st.delta
