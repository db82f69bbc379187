"""Bounded exhaustive exploration of protocol interleavings.

A small-model oracle: up to a few processes, commands, one crash and one
session drop, every reachable ordering of message deliveries, elections,
proposals and fault points is enumerated depth-first with visited-state
pruning. Leader election is abstracted to explicit election actions with
strictly increasing ballots (an old leader keeps acting until it learns
better, which is the adversarial case). Every state is checked for the
safety properties; a violation yields the offending action schedule.

The same protocol-mutation switches the trace checker documents can be
applied here, each of which must produce a counterexample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (
    Accepted,
    Command,
    InvalidArgument,
    Log,
    LogStopped,
    Prepare,
    Promise,
    Round,
    SeqPaxosError,
    StopSign,
    ballot_make,
    entry_text,
    is_stop,
)
from .paxos import Outputs, Phase, Replica, Role, recover_replica
from .storage import VolatileStorage


@dataclass
class ExploreResult:
    ok: bool
    complete: bool
    states: int
    violation: Optional[str] = None
    schedule: list[str] = field(default_factory=list)

    def report(self) -> str:
        status = "pass" if self.ok else "FAIL"
        cov = "complete" if self.complete else "budget-exhausted"
        out = f"{status} states={self.states} coverage={cov}"
        if not self.ok:
            out += f"\n  violation: {self.violation}\n  schedule:"
            for step in self.schedule:
                out += f"\n    {step}"
        return out


class _PropertyViolation(SeqPaxosError):
    pass


def _clone_storage(storage: VolatileStorage) -> VolatileStorage:
    copy = VolatileStorage()
    if storage._state is not None:
        copy._state = storage._state.clone()
    return copy


def _clone_replica(r: Replica, storage: VolatileStorage) -> Replica:
    c = Replica.__new__(Replica)
    c.config = r.config
    c.processes = r.processes
    c.self_pid = r.self_pid
    c.rid_of = r.rid_of
    c.rself = r.rself
    c.others = r.others
    c.storage = storage
    c.sigma_len = r.sigma_len
    c.dedup = r.dedup
    c.tracer = None
    c.mutation = r.mutation
    c.role = r.role
    c.phase = r.phase
    c.n_L = r.n_L
    c.leader_pid = r.leader_pid
    c.promises = dict(r.promises)
    c.las = dict(r.las)
    c.lds = dict(r.lds)
    c.prop_buffer = list(r.prop_buffer)
    c.l_c = r.l_c
    c.n_prom = r.n_prom
    c.n_a = r.n_a
    c.v_a = Log(r.v_a.offset, list(r.v_a.entries))
    c.l_d = r.l_d
    return c


class _World:
    """One explored state: replicas, their durable storage, link queues, and
    the remaining fault/proposal/election budgets."""

    def __init__(self, params: "ExploreParams"):
        self.params = params
        pids = tuple(range(1, params.procs + 1))
        self.pids = pids
        self.storages: dict[int, VolatileStorage] = {}
        self.replicas: dict[int, Optional[Replica]] = {}
        for pid in pids:
            storage = VolatileStorage()
            storage.bootstrap(0, pids, 0)
            self.storages[pid] = storage
            self.replicas[pid] = Replica(
                0, pids, pid, storage, dedup=params.dedup, mutation=params.mutation
            )
        self.queues: dict[tuple[int, int], tuple] = {}
        self.elections: list[tuple[int, int]] = []  # (leader, ballot)
        self.notified: dict[int, int] = {}  # pid -> elections seen
        self.crashes_left = params.crashes
        self.drops_left = params.drops
        self.pool: tuple = params.pool
        self.proposed_at: dict[int, int] = {}  # pool idx -> 1 once used
        self.decided_map: dict[int, str] = {}
        self.stop_decided_at: Optional[int] = None

    def clone(self) -> "_World":
        w = _World.__new__(_World)
        w.params = self.params
        w.pids = self.pids
        w.storages = {pid: _clone_storage(s) for pid, s in self.storages.items()}
        w.replicas = {
            pid: (_clone_replica(r, w.storages[pid]) if r is not None else None)
            for pid, r in self.replicas.items()
        }
        w.queues = dict(self.queues)
        w.elections = list(self.elections)
        w.notified = dict(self.notified)
        w.crashes_left = self.crashes_left
        w.drops_left = self.drops_left
        w.pool = self.pool
        w.proposed_at = dict(self.proposed_at)
        w.decided_map = dict(self.decided_map)
        w.stop_decided_at = self.stop_decided_at
        return w

    # -- canonical digest -------------------------------------------------

    def digest(self):
        parts = []
        for pid in self.pids:
            r = self.replicas[pid]
            if r is None:
                st = self.storages[pid]._state
                parts.append(
                    ("down", st.n_prom, st.n_a, tuple(map(entry_text, st.v_a.entries)), st.l_d)
                )
            else:
                parts.append(
                    (
                        r.role.value,
                        r.phase.value,
                        r.n_L,
                        r.leader_pid,
                        tuple(sorted((k.process, v[0], tuple(map(entry_text, v[1]))) for k, v in r.promises.items())),
                        tuple(sorted((k.process, v) for k, v in r.las.items())),
                        tuple(sorted((k.process, v) for k, v in r.lds.items())),
                        tuple(map(entry_text, r.prop_buffer)),
                        r.l_c,
                        r.n_prom,
                        r.n_a,
                        tuple(map(entry_text, r.v_a.entries)),
                        r.l_d,
                        self.storages[pid]._state.n_prom,
                        tuple(map(entry_text, self.storages[pid]._state.v_a.entries)),
                    )
                )
        queues = tuple(
            (pair, tuple(self._msg_key(m) for m in msgs))
            for pair, msgs in sorted(self.queues.items())
            if msgs
        )
        return (
            tuple(parts),
            queues,
            len(self.elections),
            self.crashes_left,
            self.drops_left,
            tuple(sorted(self.proposed_at)),
            tuple(sorted(self.decided_map.items())),
        )

    @staticmethod
    def _msg_key(msg):
        return repr(msg)

    # -- helpers -----------------------------------------------------------

    def alive(self):
        return [pid for pid in self.pids if self.replicas[pid] is not None]

    def enqueue(self, src: int, out: Outputs) -> None:
        for dst, msg in out.sends:
            key = (src, dst)
            self.queues[key] = self.queues.get(key, ()) + (msg,)

    def handle_decided(self, pid: int, out: Outputs) -> None:
        for g, entry in out.decided:
            text = entry_text(entry)
            known = self.decided_map.get(g)
            if known is None:
                self.decided_map[g] = text
            elif known != text:
                raise _PropertyViolation(
                    f"per-index-agreement: index {g} decided as {known} and {text}"
                )
            if self.stop_decided_at is not None and g > self.stop_decided_at:
                raise _PropertyViolation(
                    f"stop-finality: index {g} decided past stop at {self.stop_decided_at}"
                )
            if is_stop(entry):
                self.stop_decided_at = g if self.stop_decided_at is None else min(
                    self.stop_decided_at, g
                )
            else:
                if text not in self.params.pool_texts:
                    raise _PropertyViolation(f"validity: {text} was never proposed")
                if self.params.dedup:
                    hits = [i for i, e in self.decided_map.items() if e == text]
                    if len(hits) > 1:
                        raise _PropertyViolation(
                            f"no-duplicates: {text} decided at {sorted(hits)}"
                        )

    def check_invariants(self, pid: int, out: Outputs) -> None:
        replica = self.replicas[pid]
        storage_state = self.storages[pid]._state
        for dst, msg in out.sends:
            if isinstance(msg, Promise):
                if storage_state.n_prom != msg.n:
                    raise _PropertyViolation(
                        f"persist-order: p{pid} sent Promise {msg.n.text()} with "
                        f"persisted promise {storage_state.n_prom.text()}"
                    )
            if isinstance(msg, Accepted):
                if msg.la > storage_state.v_a.glen():
                    raise _PropertyViolation(
                        f"persist-order: p{pid} acknowledged {msg.la} with "
                        f"{storage_state.v_a.glen()} persisted"
                    )
        if replica is not None:
            entries = replica.v_a.entries
            for i, entry in enumerate(entries):
                if is_stop(entry) and i != len(entries) - 1:
                    raise _PropertyViolation(
                        f"stop-finality: p{pid} holds entries past a stop-sign"
                    )
            if self.stop_decided_at is not None:
                if replica.v_a.glen() > self.stop_decided_at + 1:
                    raise _PropertyViolation(
                        f"stop-finality: p{pid} accepted beyond decided stop "
                        f"at {self.stop_decided_at}"
                    )

    # -- actions -----------------------------------------------------------

    def enabled(self):
        actions = []
        for pair in sorted(self.queues):
            if self.queues[pair] and self.replicas[pair[1]] is not None:
                actions.append(("deliver", pair))
        if len(self.elections) < self.params.elections:
            for pid in self.alive():
                actions.append(("elect", pid))
        if self.elections:
            leader, ballot = self.elections[-1]
            for pid in self.alive():
                replica = self.replicas[pid]
                if (
                    replica.phase is Phase.RECOVER
                    and self.notified.get(pid, 0) < len(self.elections)
                ):
                    actions.append(("notify", pid))
        for i in sorted(set(range(len(self.pool))) - set(self.proposed_at)):
            for pid in self.alive():
                if self.replicas[pid].role is Role.LEADER:
                    actions.append(("propose", (i, pid)))
        if self.crashes_left > 0:
            for pid in self.alive():
                actions.append(("crash", pid))
        for pid in self.pids:
            if self.replicas[pid] is None:
                actions.append(("recover", pid))
        if self.drops_left > 0:
            for a in self.pids:
                for b in self.pids:
                    if a < b and self.replicas[a] is not None and self.replicas[b] is not None:
                        actions.append(("drop", (a, b)))
        return actions

    def apply(self, action) -> str:
        kind, arg = action
        if kind == "deliver":
            src, dst = arg
            queue = self.queues[arg]
            msg, self.queues[arg] = queue[0], queue[1:]
            replica = self.replicas[dst]
            out = replica.on_message(src, msg)
            if isinstance(msg, Prepare):
                for _, sent in out.sends:
                    if isinstance(sent, Promise) and sent.suffix and sent.na < msg.na:
                        raise _PropertyViolation(
                            f"stale-suffix: p{dst} promised a non-empty suffix "
                            f"with accepted round {sent.na.text()} below {msg.na.text()}"
                        )
            self.check_invariants(dst, out)
            self.enqueue(dst, out)
            self.handle_decided(dst, out)
            return f"deliver {type(msg).__name__} p{src}->p{dst}"
        if kind == "elect":
            pid = arg
            ballot = ballot_make(len(self.elections) + 1, pid)
            self.elections.append((pid, ballot))
            self.notified[pid] = len(self.elections)
            replica = self.replicas[pid]
            out = replica.on_leader(pid, ballot)
            self.check_invariants(pid, out)
            self.enqueue(pid, out)
            self.handle_decided(pid, out)
            return f"elect p{pid} ballot={ballot}"
        if kind == "notify":
            pid = arg
            leader, ballot = self.elections[-1]
            self.notified[pid] = len(self.elections)
            out = self.replicas[pid].on_leader(leader, ballot)
            self.check_invariants(pid, out)
            self.enqueue(pid, out)
            return f"notify p{pid} of leader p{leader}"
        if kind == "propose":
            i, pid = arg
            self.proposed_at[i] = pid
            entry = self.pool[i]
            out = self.replicas[pid].on_propose(entry)
            self.check_invariants(pid, out)
            self.enqueue(pid, out)
            self.handle_decided(pid, out)
            return f"propose {entry_text(entry)} at p{pid}"
        if kind == "crash":
            pid = arg
            self.crashes_left -= 1
            self.replicas[pid] = None
            for pair in list(self.queues):
                if pid in pair:
                    self.queues[pair] = ()
            for peer in self.alive():
                out = self.replicas[peer].on_connection_lost(pid)
                self.enqueue(peer, out)
            return f"crash p{pid}"
        if kind == "recover":
            pid = arg
            replica = recover_replica(
                self.storages[pid],
                pid,
                dedup=self.params.dedup,
                mutation=self.params.mutation,
            )
            self.replicas[pid] = replica
            self.notified[pid] = 0
            return f"recover p{pid}"
        if kind == "drop":
            a, b = arg
            self.drops_left -= 1
            self.queues[(a, b)] = ()
            self.queues[(b, a)] = ()
            out_a = self.replicas[a].on_connection_lost(b)
            self.enqueue(a, out_a)
            out_b = self.replicas[b].on_connection_lost(a)
            self.enqueue(b, out_b)
            return f"drop session p{a}-p{b}"
        raise InvalidArgument(f"unknown action {kind}")


@dataclass
class ExploreParams:
    procs: int = 3
    cmds: int = 2
    crashes: int = 1
    drops: int = 1
    elections: int = 2
    include_stop: bool = False
    dedup: bool = False
    mutation: Optional[str] = None
    max_depth: int = 60
    max_states: int = 2_000_000

    def __post_init__(self):
        pool = [Command(9, i + 1, ("put", f"k{i + 1}", b"v")) for i in range(self.cmds)]
        if self.include_stop:
            pool.append(StopSign(1, tuple(range(1, self.procs + 1))))
        self.pool = tuple(pool)
        self.pool_texts = {entry_text(e) for e in self.pool}


def explore(params: ExploreParams) -> ExploreResult:
    """Depth-first enumeration of all schedules within the bounds; stops at
    the first property violation or when the state budget runs out.

    Stack entries hold (parent world, pending action); children are cloned
    lazily on expansion so memory stays proportional to the search frontier,
    not the visited set."""
    root = _World(params)
    seen = {root.digest()}
    states = 1
    complete = True
    stack: list[tuple[_World, tuple, tuple]] = [
        (root, action, ()) for action in reversed(root.enabled())
    ]
    while stack:
        parent, action, path = stack.pop()
        if states >= params.max_states:
            complete = False
            break
        world = parent.clone()
        try:
            label = world.apply(action)
        except _PropertyViolation as v:
            return ExploreResult(
                ok=False,
                complete=False,
                states=states,
                violation=str(v),
                schedule=list(path) + [f"{action[0]} {action[1]}"],
            )
        except (LogStopped, InvalidArgument, SeqPaxosError) as e:
            return ExploreResult(
                ok=False,
                complete=False,
                states=states,
                violation=f"replica contract violation: {e}",
                schedule=list(path) + [f"{action[0]} {action[1]}"],
            )
        key = world.digest()
        if key in seen:
            continue
        seen.add(key)
        states += 1
        new_path = path + (label,)
        if len(new_path) >= params.max_depth:
            complete = False
            continue
        for nxt in reversed(world.enabled()):
            stack.append((world, nxt, new_path))
    return ExploreResult(ok=True, complete=complete, states=states)
