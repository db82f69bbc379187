"""Deterministic discrete-event simulator.

Provides FIFO-perfect-link sessions, per-instance heartbeat timers, crashes
with amnesia of volatile state, recoveries through the storage layer, session
drops losing a seeded-random suffix of in-flight messages, partitions, and a
retrying client layer. The whole simulation is single-threaded; a (seed,
script) pair fully determines the byte-exact trace.
"""

from __future__ import annotations

import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Optional

from .core import (
    BALLOT_CAP,
    Envelope,
    HEARTBEAT_TYPES,
    SeqPaxosError,
    StopSign,
    entry_text,
    is_stop,
)
from .compaction import is_marker
from .orchestrator import HostOptions, ProcessHost, render_op
from .storage import FileProvider, StorageProvider, VolatileProvider


class ScriptError(SeqPaxosError):
    """A directive that cannot be executed (e.g. recovering a live process)."""


class SimCrash(Exception):
    """Control-flow signal: an armed crash point fired inside a transition."""


@dataclass(frozen=True)
class Directive:
    t: int
    kind: str
    args: tuple = ()


@dataclass
class SimConfig:
    processes: tuple[int, ...]
    config0: tuple[int, ...]
    directives: list[Directive] = field(default_factory=list)
    latency: int = 1
    delta: int = 10
    dedup: bool = False
    cadence: int = 0
    truncation: bool = True
    reconnect_delay: int = 5
    buffer_window: int = 100
    retry_interval: int = 25
    dup_rate: float = 0.0
    trace_level: str = "full"  # or "protocol"
    seed: int = 0
    cap: int = BALLOT_CAP
    stable_from: Optional[int] = None
    storage: str = "volatile"  # or a directory path for the file backend

    def end_time(self) -> int:
        for d in self.directives:
            if d.kind == "end":
                return d.t
        return 0


@dataclass
class SimResult:
    lines: list[str]
    decided: dict[int, list[tuple[int, int, str]]]  # pid -> [(config, index, entry)]
    kv_digests: dict[int, str]
    transfers: dict[tuple[int, int], bytes]  # (pid, config) -> handoff bytes
    persist_counts: dict[int, int]
    events: int

    def trace_text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def decided_entries(self, pid: int) -> list[tuple[int, str]]:
        return [(g, e) for _, g, e in self.decided.get(pid, [])]


@dataclass
class _Session:
    sid: int
    a: int
    b: int
    up: bool = True
    sent: dict = field(default_factory=dict)
    delivered: dict = field(default_factory=dict)
    cut: dict = field(default_factory=dict)

    def pending(self, d):
        return self.sent.get(d, 0) - self.delivered.get(d, 0)


@dataclass
class _Client:
    cid: int
    next_seq: int = 1
    queue: deque = field(default_factory=deque)
    inflight: Optional[tuple[int, object]] = None
    attempts: int = 0


class Simulator:
    MAX_EVENTS = 2_000_000

    def __init__(self, cfg: SimConfig, provider: Optional[StorageProvider] = None):
        self.cfg = cfg
        self.now = 0
        self.rng = random.Random(cfg.seed)
        self.lines: list[str] = []
        self.heap: list = []
        self._seq = itertools.count()
        self.events = 0
        if provider is not None:
            self.provider = provider
        elif cfg.storage == "volatile":
            self.provider = VolatileProvider()
        else:
            self.provider = FileProvider(cfg.storage)
        self.opts = HostOptions(
            dedup=cfg.dedup,
            cadence=cfg.cadence,
            truncation=cfg.truncation,
            delta=cfg.delta,
            cap=cfg.cap,
            buffer_window=cfg.buffer_window,
        )
        self.hosts: dict[int, Optional[ProcessHost]] = {}
        self.incarnation: dict[int, int] = {p: 0 for p in cfg.processes}
        self.sessions: dict[tuple[int, int], _Session] = {}
        self.down_until: dict[tuple[int, int], int] = {}
        self.partition: Optional[list[frozenset]] = None
        self._next_sid = 1
        self.clients: dict[int, _Client] = {}
        self.retryables: dict = {}
        self.last_leader: dict[int, tuple[int, int]] = {}  # config -> (pid, ballot)
        self.decided: dict[int, list[tuple[int, int, str]]] = {p: [] for p in cfg.processes}
        self.decided_cmds: set[tuple[int, int]] = set()
        self.stops_decided: set[int] = set()
        self.persist_counts: dict[int, int] = {p: 0 for p in cfg.processes}
        self.crash_at_persist: dict[int, tuple[int, int]] = {}
        self._ended = False

        self._emit_meta()
        for idx, d in enumerate(cfg.directives):
            self._schedule(d.t, "directive", idx)
        for pid in cfg.processes:
            self.hosts[pid] = self._new_host(pid)
            self.hosts[pid].boot_initial(cfg.config0)

    # ------------------------------------------------------------------
    # plumbing the hosts use (the "net" interface)

    def send(self, env: Envelope) -> None:
        pair = (min(env.src, env.dst), max(env.src, env.dst))
        session = self.sessions.get(pair)
        if session is None or not session.up:
            if self._can_connect(*pair):
                session = _Session(self._next_sid, *pair)
                self._next_sid += 1
                self.sessions[pair] = session
            else:
                self._trace_msg("lost", env)
                return
        d = (env.src, env.dst)
        serial = session.sent.get(d, 0)
        session.sent[d] = serial + 1
        self._schedule(self.now + self.cfg.latency, "deliver", (session, d, serial, env))
        self._trace_msg("send", env)

    def set_timer(self, pid: int, config: int, delay: int) -> None:
        self._schedule(self.now + delay, "timer", (pid, self.incarnation[pid], config))

    def set_host_timer(self, pid: int, kind: str, delay: int, data) -> None:
        self._schedule(
            self.now + delay, "hosttimer", (pid, self.incarnation[pid], kind, data)
        )

    def trace(self, kind: str, detail: str, digest: str = "-") -> None:
        if self.cfg.trace_level == "protocol" and kind in ("buffered",):
            return
        self.lines.append(f"t={self.now} {kind} {detail} | {digest}")

    def persisted(self, pid: int, config: int, kind: str, detail: str) -> None:
        self.persist_counts[pid] += 1
        self.trace("persist", f"p{pid} cfg{config} {kind} {detail}")
        armed = self.crash_at_persist.get(pid)
        if armed is not None and self.persist_counts[pid] >= armed[0]:
            del self.crash_at_persist[pid]
            raise SimCrash(armed[1])

    def note_leader(self, config: int, pid: int, ballot: int) -> None:
        self.last_leader[config] = (pid, ballot)

    def client_response(self, client: int, seq: int, resp: bytes, dup: bool, pid: int) -> None:
        self.trace(
            "resp",
            f"c{client} seq={seq} via=p{pid} dup={int(dup)} {resp.decode('utf-8', 'replace')}",
        )
        cs = self.clients.get(client)
        if cs is not None and cs.inflight is not None and cs.inflight[0] == seq:
            cs.inflight = None
            cs.attempts = 0
            if cs.queue:
                self._dispatch_client(cs)

    def notify_decided(self, pid: int, config: int, g: int, entry) -> None:
        self.decided[pid].append((config, g, entry_text(entry)))
        if is_stop(entry):
            self.stops_decided.add(config)
        else:
            self.decided_cmds.add((entry.client, entry.seq))

    def submit_retryable(self, cmd, config: int) -> None:
        key = ("cmd", cmd.client, cmd.seq)
        if key in self.retryables or (cmd.client, cmd.seq) in self.decided_cmds:
            return
        self.retryables[key] = (cmd, config)
        self._schedule(self.now, "retryable", key)

    # ------------------------------------------------------------------

    def _new_host(self, pid: int) -> ProcessHost:
        return ProcessHost(pid, self, self.provider, self.opts)

    def _emit_meta(self) -> None:
        c = self.cfg
        procs = ",".join(f"p{p}" for p in c.processes)
        members = ",".join(f"p{p}" for p in c.config0)
        self.trace(
            "meta",
            f"procs={procs} config0={members} latency={c.latency} delta={c.delta}"
            f" dedup={'on' if c.dedup else 'off'} cadence={c.cadence}"
            f" truncation={'on' if c.truncation else 'off'} cap={c.cap} seed={c.seed}"
            f" stable_from={c.stable_from if c.stable_from is not None else '-'}"
            f" level={c.trace_level}",
        )

    def _trace_msg(self, kind: str, env: Envelope) -> None:
        if self.cfg.trace_level == "protocol":
            if kind in ("recv", "lost") or isinstance(env.msg, HEARTBEAT_TYPES):
                return
        self.trace(kind, env.text())

    def _can_connect(self, a: int, b: int) -> bool:
        if self.hosts.get(a) is None or self.hosts.get(b) is None:
            return False
        if self.now < self.down_until.get((a, b), 0):
            return False
        if self.partition is not None:
            for group in self.partition:
                if a in group:
                    return b in group
        return True

    def _schedule(self, t: int, kind: str, data) -> None:
        heappush(self.heap, (t, next(self._seq), kind, data))

    # ------------------------------------------------------------------
    # faults

    def arm_crash_after_persist(self, pid: int, count: int, recover_delay: int) -> None:
        """Crash `pid` immediately after its count-th persist call; recover it
        `recover_delay` time units later."""
        self.crash_at_persist[pid] = (count, recover_delay)

    def _crash(self, pid: int) -> None:
        if self.hosts.get(pid) is None:
            raise ScriptError(f"crash of already-down p{pid}")
        self.hosts[pid] = None
        self.incarnation[pid] += 1
        if isinstance(self.provider, FileProvider):
            self.provider.crash(pid)
        self.trace("crash", f"p{pid}")
        for pair, session in sorted(self.sessions.items()):
            if pid in pair and session.up:
                self._sever(session, crash_pid=pid)
                peer = pair[0] if pair[1] == pid else pair[1]
                self._schedule(
                    self.now + self.cfg.latency,
                    "connlost",
                    (peer, self.incarnation[peer], pid),
                )

    def _recover(self, pid: int) -> None:
        if self.hosts.get(pid) is not None:
            raise ScriptError(f"recover of live p{pid}")
        self.incarnation[pid] += 1
        host = self._new_host(pid)
        self.hosts[pid] = host
        self.trace("recover", f"p{pid}")
        host.recover_boot(self.cfg.config0)

    def _sever(self, session: _Session, crash_pid: Optional[int] = None) -> None:
        """Close a session; each direction loses a seeded-random suffix of its
        in-flight messages (everything inbound to a crashed process)."""
        for d in ((session.a, session.b), (session.b, session.a)):
            pending = session.pending(d)
            if crash_pid is not None and d[1] == crash_pid:
                lost = pending
            else:
                lost = self.rng.randint(0, pending) if pending else 0
            session.cut[d] = session.sent.get(d, 0) - lost
        session.up = False

    def _drop_session(self, a: int, b: int) -> None:
        pair = (min(a, b), max(a, b))
        session = self.sessions.get(pair)
        if session is None or not session.up:
            self.trace("drop", f"p{pair[0]}-p{pair[1]} noop")
            return
        self._sever(session)
        self.down_until[pair] = self.now + self.cfg.reconnect_delay
        self.trace("drop", f"p{pair[0]}-p{pair[1]}")
        for end, peer in ((pair[0], pair[1]), (pair[1], pair[0])):
            self._schedule(self.now, "connlost", (end, self.incarnation[end], peer))

    def _partition(self, groups) -> None:
        self.partition = [frozenset(g) for g in groups]
        rendered = "|".join(
            "{" + ",".join(f"p{p}" for p in sorted(g)) + "}" for g in self.partition
        )
        self.trace("partition", rendered)
        for pair, session in sorted(self.sessions.items()):
            if session.up and not self._same_side(*pair):
                self._sever(session)
                for end, peer in ((pair[0], pair[1]), (pair[1], pair[0])):
                    self._schedule(self.now, "connlost", (end, self.incarnation[end], peer))

    def _same_side(self, a: int, b: int) -> bool:
        for group in self.partition or []:
            if a in group:
                return b in group
        return False

    def _heal(self) -> None:
        self.partition = None
        self.trace("heal", "-")

    # ------------------------------------------------------------------
    # clients and policy proposals

    def _client(self, cid: int) -> _Client:
        if cid not in self.clients:
            self.clients[cid] = _Client(cid)
        return self.clients[cid]

    def _propose(self, cid: int, op) -> None:
        cs = self._client(cid)
        cs.queue.append((cs.next_seq, op))
        cs.next_seq += 1
        if cs.inflight is None:
            self._dispatch_client(cs)

    def _dispatch_client(self, cs: _Client) -> None:
        cs.inflight = cs.queue.popleft()
        cs.attempts = 0
        self._schedule(self.now, "client", (cs.cid, cs.inflight[0]))

    def _client_submit(self, cid: int, seq: int) -> None:
        cs = self.clients.get(cid)
        if cs is None or cs.inflight is None or cs.inflight[0] != seq:
            return
        op = cs.inflight[1]
        target = self._guess_leader(cs.attempts)
        cs.attempts += 1
        host = self.hosts.get(target)
        if host is not None:
            self._dispatch_host(host, "on_client_submit", cid, seq, op)
        if self.cfg.dup_rate and self.rng.random() < self.cfg.dup_rate:
            self._schedule(self.now + 1, "clientdup", (cid, seq, op, target))
        if self.cfg.retry_interval:
            self._schedule(self.now + self.cfg.retry_interval, "clientretry", (cid, seq))

    def _guess_leader(self, attempts: int) -> int:
        if self.last_leader:
            config = max(self.last_leader)
            pid = self.last_leader[config][0]
            if self.hosts.get(pid) is not None:
                return pid
        members = [p for p in self.cfg.config0]
        return members[attempts % len(members)]

    def _burst(self, cid: int, count: int, via: int) -> None:
        host = self.hosts.get(via)
        if host is None:
            raise ScriptError(f"burst via down p{via}")
        for i in range(1, count + 1):
            self._dispatch_host(
                host, "on_client_submit", cid, i, ("put", f"bk{i}", b"bv")
            )

    def _reconfigure(self, procs: tuple[int, ...]) -> None:
        target = max(
            (h.active for h in self.hosts.values() if h is not None and h.active is not None),
            default=0,
        )
        ss = StopSign(target + 1, procs)
        key = ("ss", ss.next_config)
        if key not in self.retryables:
            self.retryables[key] = (ss, target)
            self._schedule(self.now, "retryable", key)

    def _retryable_tick(self, key) -> None:
        item = self.retryables.get(key)
        if item is None:
            return
        payload, config = item
        if key[0] == "cmd":
            if (payload.client, payload.seq) in self.decided_cmds or config in self.stops_decided:
                del self.retryables[key]
                return
            target = self._guess_leader(0)
            host = self.hosts.get(target)
            if host is not None:
                self._dispatch_host(
                    host, "on_client_submit", payload.client, payload.seq, payload.op
                )
        else:  # stop-sign proposal: retried until its configuration stops
            if config in self.stops_decided:
                del self.retryables[key]
                return
            target = self._guess_leader(0)
            host = self.hosts.get(target)
            if host is not None:
                self._dispatch_host(host, "on_policy_submit", payload)
        interval = self.cfg.retry_interval or self.cfg.delta * 2
        self._schedule(self.now + interval, "retryable", key)

    # ------------------------------------------------------------------
    # event loop

    def _dispatch_host(self, host: ProcessHost, method: str, *args) -> None:
        try:
            getattr(host, method)(*args)
        except SimCrash as crash:
            pid = host.pid
            self._crash(pid)
            self._schedule(self.now + crash.args[0], "directive_recover", pid)

    def step(self) -> bool:
        if not self.heap or self._ended:
            return False
        t, _, kind, data = heappop(self.heap)
        self.now = t
        self.events += 1
        handler = getattr(self, f"_ev_{kind}")
        handler(data)
        return not self._ended

    def run(self) -> SimResult:
        while self.step():
            if self.events >= self.MAX_EVENTS:
                raise SeqPaxosError("event budget exceeded; runaway simulation")
        return self._result()

    def _result(self) -> SimResult:
        digests = {}
        transfers = {}
        for pid, host in self.hosts.items():
            if host is None:
                continue
            if host.active is not None and host.active in host.instances:
                digests[pid] = host.instances[host.active].rsm.digest()
            for config, inst in host.instances.items():
                transfers[(pid, config)] = inst.transfer.encode()
        return SimResult(
            lines=self.lines,
            decided=self.decided,
            kv_digests=digests,
            transfers=transfers,
            persist_counts=dict(self.persist_counts),
            events=self.events,
        )

    # -- event handlers ------------------------------------------------

    def _ev_deliver(self, data) -> None:
        session, d, serial, env = data
        cut = session.cut.get(d)
        if cut is not None and serial >= cut:
            self._trace_msg("lost", env)
            return
        session.delivered[d] = session.delivered.get(d, 0) + 1
        host = self.hosts.get(env.dst)
        if host is None:
            self._trace_msg("lost", env)
            return
        self._trace_msg("recv", env)
        self._dispatch_host(host, "on_envelope", env)

    def _ev_timer(self, data) -> None:
        pid, inc, config = data
        host = self.hosts.get(pid)
        if host is None or self.incarnation[pid] != inc:
            return
        self._dispatch_host(host, "on_ble_timer", config)

    def _ev_hosttimer(self, data) -> None:
        pid, inc, kind, extra = data
        host = self.hosts.get(pid)
        if host is None or self.incarnation[pid] != inc:
            return
        self._dispatch_host(host, "on_host_timer", kind, extra)

    def _ev_connlost(self, data) -> None:
        pid, inc, peer = data
        host = self.hosts.get(pid)
        if host is None or self.incarnation[pid] != inc:
            return
        self._dispatch_host(host, "on_connection_lost", peer)

    def _ev_client(self, data) -> None:
        self._client_submit(*data)

    def _ev_clientretry(self, data) -> None:
        cid, seq = data
        cs = self.clients.get(cid)
        if cs is not None and cs.inflight is not None and cs.inflight[0] == seq:
            self._schedule(self.now, "client", (cid, seq))

    def _ev_clientdup(self, data) -> None:
        cid, seq, op, target = data
        host = self.hosts.get(target)
        if host is not None:
            self._dispatch_host(host, "on_client_submit", cid, seq, op)

    def _ev_retryable(self, key) -> None:
        self._retryable_tick(key)

    def _ev_directive_recover(self, pid) -> None:
        if self.hosts.get(pid) is None:
            self._recover(pid)

    def _ev_directive(self, idx: int) -> None:
        d = self.cfg.directives[idx]
        if d.kind == "crash":
            self._crash(d.args[0])
        elif d.kind == "recover":
            self._recover(d.args[0])
        elif d.kind == "drop":
            self._drop_session(d.args[0], d.args[1])
        elif d.kind == "partition":
            self._partition(d.args)
        elif d.kind == "heal":
            self._heal()
        elif d.kind == "propose":
            self._propose(d.args[0], d.args[1])
        elif d.kind == "burst":
            self._burst(d.args[0], d.args[1], d.args[2])
        elif d.kind == "reconfigure":
            self._reconfigure(d.args)
        elif d.kind == "cleanup":
            for pid in sorted(self.hosts):
                host = self.hosts[pid]
                if host is not None:
                    host.cleanup(d.args[0])
        elif d.kind == "crash_at_persist":
            self.arm_crash_after_persist(d.args[0], d.args[1], d.args[2])
        elif d.kind == "end":
            self.trace("end", "-")
            self._ended = True
        else:
            raise ScriptError(f"unknown directive {d.kind}")


def run_simulation(cfg: SimConfig, provider: Optional[StorageProvider] = None) -> SimResult:
    return Simulator(cfg, provider).run()
