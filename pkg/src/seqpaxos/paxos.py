"""The replica state machine for reconfigurable sequence consensus.

Pure transition functions from (state, input) to (state, outputs): one input
at a time, outputs produced atomically, persistence synchronous within a
transition and always ordered before the sends it guards. Callers provide the
event loop, the leader-election events, and the storage instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .core import (
    Accept,
    Accepted,
    AcceptSync,
    Decide,
    Entry,
    InvalidArgument,
    Log,
    LogStopped,
    Message,
    Prepare,
    PrepareReq,
    Promise,
    ReplicaId,
    Round,
    entries_text,
    is_stop,
    max_promise,
)
from .storage import PersistentState, Storage

# Protocol mutations for the checker's mutation-testing campaigns. Never used
# by an honest replica.
MUTATION_SKIP_PROM_PERSIST = "skip_prom_persist"
MUTATION_ACCEPT_STALE = "accept_stale"
MUTATION_OMIT_NA_GUARD = "omit_na_guard"
MUTATION_EXTEND_PAST_SS = "extend_past_ss"

MUTATIONS = (
    MUTATION_SKIP_PROM_PERSIST,
    MUTATION_ACCEPT_STALE,
    MUTATION_OMIT_NA_GUARD,
    MUTATION_EXTEND_PAST_SS,
)


class Role(Enum):
    LEADER = "l"
    FOLLOWER = "f"


class Phase(Enum):
    NONE = "-"
    PREPARE = "p"
    ACCEPT = "a"
    RECOVER = "r"


@dataclass
class Outputs:
    """Effects of one transition, in production order."""

    sends: list[tuple[int, Message]] = field(default_factory=list)
    decided: list[tuple[int, Entry]] = field(default_factory=list)
    stopped: bool = False

    def send(self, dst: int, msg: Message) -> None:
        self.sends.append((dst, msg))


class Replica:
    """One configuration's proposer/acceptor/learner at one process."""

    def __init__(
        self,
        config: int,
        processes,
        self_pid: int,
        storage: Storage,
        *,
        sigma_len: int = 0,
        dedup: bool = False,
        tracer: Optional[Callable[[str, str], None]] = None,
        mutation: Optional[str] = None,
        recovered: Optional[PersistentState] = None,
    ):
        self.config = config
        self.processes = tuple(sorted(processes))
        if self_pid not in self.processes:
            raise InvalidArgument(f"p{self_pid} not in configuration {self.processes}")
        self.self_pid = self_pid
        self.rid_of = {p: ReplicaId(config, p) for p in self.processes}
        self.rself = self.rid_of[self_pid]
        self.others = tuple(p for p in self.processes if p != self_pid)
        self.storage = storage
        self.sigma_len = sigma_len
        self.dedup = dedup
        self.tracer = tracer
        self.mutation = mutation

        # volatile proposer state
        self.role = Role.FOLLOWER
        self.phase = Phase.NONE
        self.n_L = Round(config, 0)
        self.leader_pid: Optional[int] = None
        self.promises: dict[ReplicaId, tuple[Round, tuple[Entry, ...]]] = {}
        self.las: dict[ReplicaId, int] = {}
        self.lds: dict[ReplicaId, Optional[int]] = {}
        self.prop_buffer: list[Entry] = []
        self.l_c = sigma_len

        # persistent state (mirrored; storage is the durability authority)
        if recovered is not None:
            self.n_prom = recovered.n_prom
            self.n_a = recovered.n_a
            self.v_a = recovered.v_a
            self.l_d = recovered.l_d
            self.phase = Phase.RECOVER
        else:
            self.n_prom = Round(config, 0)
            self.n_a = Round(config, 0)
            self.v_a = Log(offset=sigma_len)
            self.l_d = sigma_len

    def majority(self) -> int:
        return len(self.processes) // 2 + 1

    def stopped(self) -> bool:
        return self.v_a.stopped()

    def state_digest(self) -> str:
        return (
            f"{self.role.value}{self.phase.value},{self.n_prom.text()},"
            f"{self.n_a.text()},{self.v_a.glen()},{self.l_d},{self.l_c}"
        )

    def _trace(self, kind: str, detail: str) -> None:
        if self.tracer is not None:
            self.tracer(kind, detail)

    # ------------------------------------------------------------------
    # input handlers

    def on_leader(self, leader: int, ballot: int) -> Outputs:
        out = Outputs()
        n = Round(self.config, ballot)
        self.leader_pid = leader
        if leader == self.self_pid and n > self.n_L and n > self.n_prom:
            self.n_L = n
            if self.mutation != MUTATION_SKIP_PROM_PERSIST:
                self.storage.persist_promise(n)
            self.n_prom = n
            self.promises = {self.rself: (self.n_a, self.v_a.suffix_from(self.l_d))}
            self.las = {r: self.sigma_len for r in self.rid_of.values()}
            self.lds = {r: None for r in self.rid_of.values()}
            self.lds[self.rself] = self.l_d
            self.l_c = self.sigma_len
            self.role, self.phase = Role.LEADER, Phase.PREPARE
            for p in self.others:
                out.send(p, Prepare(self.n_L, self.l_d, self.n_a))
            if len(self.promises) >= self.majority():
                self._adopt(out)  # the self-promise is a majority of one
        elif self.phase is Phase.RECOVER:
            out.send(leader, PrepareReq())
        else:
            self.role = Role.FOLLOWER
        return out

    def on_prepare(self, frm: int, msg: Prepare) -> Outputs:
        out = Outputs()
        # A replica that recovered (or lost its leader session) after promising
        # the current round re-promises it, otherwise it could never be
        # re-synced while that leader stays in place. Duplicate promises are
        # idempotent at the leader.
        again = self.phase is Phase.RECOVER and msg.n == self.n_prom
        if self.n_prom < msg.n or again:
            if self.n_prom < msg.n:
                if self.mutation != MUTATION_SKIP_PROM_PERSIST:
                    self.storage.persist_promise(msg.n)
                self.n_prom = msg.n
            self.role, self.phase = Role.FOLLOWER, Phase.PREPARE
            if self.n_a >= msg.na or self.mutation == MUTATION_OMIT_NA_GUARD:
                suffix = self.v_a.suffix_from(msg.ld)
            else:
                suffix = ()
            out.send(frm, Promise(msg.n, self.n_a, suffix, self.l_d))
        return out

    def on_promise(self, frm: int, msg: Promise) -> Outputs:
        if self.role is not Role.LEADER or msg.n != self.n_L:
            return Outputs()
        if self.phase is Phase.PREPARE:
            return self._on_promise_prepare(frm, msg)
        if self.phase is Phase.ACCEPT:
            return self._on_promise_accept(frm, msg)
        return Outputs()

    def _on_promise_prepare(self, frm: int, msg: Promise) -> Outputs:
        out = Outputs()
        rid = self.rid_of.get(frm)
        if rid is None:
            return out
        self.promises[rid] = (msg.na, msg.suffix)
        self.lds[rid] = msg.ld
        if len(self.promises) >= self.majority():
            self._adopt(out)
        return out

    def _adopt(self, out: Outputs) -> None:
        """Majority of promises collected: adopt the winning suffix, flush
        buffered proposals, and sync every promised follower."""
        suffix = max_promise(
            (r, na, sfx) for r, (na, sfx) in self.promises.items()
        )
        self.v_a.cut_and_extend(self.l_d, suffix)
        if self.stopped():
            # buffered commands can never be decided behind a stop-sign
            self.prop_buffer = []
        else:
            stops = [e for e in self.prop_buffer if is_stop(e)]
            rest = [e for e in self.prop_buffer if not is_stop(e)]
            for entry in rest:
                self.v_a.append(entry, self.dedup)
            for entry in stops[:1]:  # order the stop-sign last
                self.v_a.append(entry, self.dedup)
            self.prop_buffer = []
        written = self.v_a.suffix_from(self.l_d)
        self.storage.persist_accept(self.n_L, self.l_d, written)
        self.n_a = self.n_L
        self.las[self.rself] = self.v_a.glen()
        self.phase = Phase.ACCEPT
        self._trace(
            "adopt",
            f"cut={self.l_d} n={self.n_L.text()} +[{entries_text(written)}]",
        )
        for p in self.others:
            ld_p = self.lds[self.rid_of[p]]
            if ld_p is not None:
                out.send(p, AcceptSync(self.n_L, self.v_a.suffix_from(ld_p), ld_p))
        self._maybe_decide(out)

    def _on_promise_accept(self, frm: int, msg: Promise) -> Outputs:
        out = Outputs()
        rid = self.rid_of.get(frm)
        if rid is None:
            return out
        self.lds[rid] = msg.ld
        out.send(frm, AcceptSync(self.n_L, self.v_a.suffix_from(msg.ld), msg.ld))
        if self.l_c > self.sigma_len:
            out.send(frm, Decide(self.l_c, self.n_L))
        return out

    def on_accept_sync(self, frm: int, msg: AcceptSync) -> Outputs:
        out = Outputs()
        if self.role is Role.FOLLOWER and self.phase is Phase.PREPARE:
            if msg.n == self.n_prom:
                self.v_a.cut_and_extend(msg.ld, msg.suffix)
                self.n_a = msg.n
                self.storage.persist_accept(msg.n, msg.ld, msg.suffix)
                self.phase = Phase.ACCEPT
                self._trace(
                    "adopt",
                    f"cut={msg.ld} n={msg.n.text()} +[{entries_text(msg.suffix)}]",
                )
                out.send(frm, Accepted(msg.n, self.v_a.glen()))
        return out

    def on_accept(self, frm: int, msg: Accept) -> Outputs:
        out = Outputs()
        if self.role is Role.FOLLOWER and self.phase is Phase.ACCEPT:
            if msg.n == self.n_prom or self.mutation == MUTATION_ACCEPT_STALE:
                grew = self.v_a.append(msg.entry, self.dedup)
                if grew:
                    self.storage.persist_append(msg.entry)
                    self._trace(
                        "accept",
                        f"idx={self.v_a.glen() - 1} n={msg.n.text()} {msg.entry.text()}",
                    )
                out.send(frm, Accepted(msg.n, self.v_a.glen()))
        return out

    def on_accepted(self, frm: int, msg: Accepted) -> Outputs:
        out = Outputs()
        if self.role is not Role.LEADER or self.phase is not Phase.ACCEPT:
            return out
        if msg.n != self.n_L:
            return out
        rid = self.rid_of.get(frm)
        if rid is None:
            return out
        self.las[rid] = msg.la
        self._maybe_decide(out)
        return out

    def _maybe_decide(self, out: Outputs) -> None:
        chosen = self._chosen_length()
        if chosen > self.l_c:
            self.l_c = chosen
            for p in self.others:
                if self.lds[self.rid_of[p]] is not None:
                    out.send(p, Decide(self.l_c, self.n_L))
            self._deliver_up_to(self.l_c, out)  # self-delivery, same path

    def _chosen_length(self) -> int:
        """Longest prefix accepted by a majority (recomputed, so decides are
        never postponed by out-of-order Accepted arrivals)."""
        lengths = sorted(self.las.values(), reverse=True)
        return lengths[self.majority() - 1]

    def on_decide(self, msg: Decide) -> Outputs:
        out = Outputs()
        # Deliver only when in sync for the round (accept phase): a replica
        # that re-promised after recovery can receive the round's earlier
        # Decide broadcasts before the AcceptSync that carries the entries,
        # and its log may still hold unchosen content from older rounds.
        if msg.n == self.n_prom and self.phase is Phase.ACCEPT:
            self._deliver_up_to(msg.l, out)
        return out

    def _deliver_up_to(self, l: int, out: Outputs) -> None:
        while self.l_d < l:
            entry = self.v_a.get(self.l_d)
            self.storage.persist_decide(self.l_d + 1)
            self.l_d += 1
            out.decided.append((self.l_d - 1, entry))
            self._trace("decide", f"idx={self.l_d - 1} {entry.text()}")
            if is_stop(entry):
                out.stopped = True

    def on_propose(self, entry: Entry) -> Outputs:
        out = Outputs()
        if self.role is Role.LEADER and self.phase is Phase.PREPARE:
            if entry not in self.prop_buffer:
                self.prop_buffer.append(entry)
            return out
        if self.role is Role.LEADER and self.phase is Phase.ACCEPT:
            if self.stopped():
                if self.mutation != MUTATION_EXTEND_PAST_SS:
                    return out
                self.v_a.entries.append(entry)  # mutant: write past the stop-sign
                grew = True
            else:
                grew = self.v_a.append(entry, self.dedup)
            if grew:
                self.storage.persist_append(entry)
                self._trace(
                    "accept",
                    f"idx={self.v_a.glen() - 1} n={self.n_L.text()} {entry.text()}",
                )
            self.las[self.rself] = self.v_a.glen()
            for p in self.others:
                if self.lds[self.rid_of[p]] is not None:
                    out.send(p, Accept(self.n_L, entry))
            self._maybe_decide(out)  # a single replica is its own majority
            return out
        return out  # followers and stopped replicas drop proposals

    def on_prepare_req(self, frm: int) -> Outputs:
        out = Outputs()
        if self.role is Role.LEADER:
            out.send(frm, Prepare(self.n_L, self.l_d, self.n_a))
        return out

    def on_connection_lost(self, peer: int) -> Outputs:
        if self.role is Role.FOLLOWER and peer == self.leader_pid:
            self.phase = Phase.RECOVER
        return Outputs()

    # ------------------------------------------------------------------

    def on_message(self, frm: int, msg: Message) -> Outputs:
        if isinstance(msg, Prepare):
            return self.on_prepare(frm, msg)
        if isinstance(msg, Promise):
            return self.on_promise(frm, msg)
        if isinstance(msg, AcceptSync):
            return self.on_accept_sync(frm, msg)
        if isinstance(msg, Accept):
            return self.on_accept(frm, msg)
        if isinstance(msg, Accepted):
            return self.on_accepted(frm, msg)
        if isinstance(msg, Decide):
            return self.on_decide(msg)
        if isinstance(msg, PrepareReq):
            return self.on_prepare_req(frm)
        raise InvalidArgument(f"replica cannot handle {type(msg).__name__}")


def recover_replica(
    storage: Storage,
    self_pid: int,
    *,
    dedup: bool = False,
    tracer=None,
    mutation: Optional[str] = None,
) -> Optional[Replica]:
    """Rebuild a replica from storage, or None for a fresh process."""
    persisted = storage.load()
    if persisted is None:
        return None
    replica = Replica(
        persisted.config,
        persisted.processes,
        self_pid,
        storage,
        sigma_len=persisted.base,
        dedup=dedup,
        tracer=tracer,
        mutation=mutation,
        recovered=persisted,
    )
    return replica
