"""Per-process configuration lifecycle.

A ProcessHost runs one (leader election, replica, state machine) instance per
configuration, routes messages by configuration id, reacts to decided
stop-signs by starting the successor configuration, and hands the final
sequence to joining processes as a snapshot-plus-suffix transfer. Old
instances stay alive for catch-up until a cleanup directive tears them down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import ble as ble_mod
from .ble import BleState, ble_init
from .compaction import SnapshotLedger, SnapshotMark, is_marker, mark_command
from .core import (
    BALLOT_CAP,
    Command,
    Entry,
    Envelope,
    HeartbeatReply,
    HeartbeatRequest,
    StateChunk,
    StateOffer,
    StateRequest,
    StateTransfer,
    StopSign,
    entry_text,
    is_stop,
)
from .paxos import Outputs, Phase, Replica, recover_replica
from .rsm import KvStateMachine, RsmSnapshot, restore
from .storage import Storage, StorageProvider


@dataclass
class HostOptions:
    dedup: bool = False
    cadence: int = 0  # state-machine snapshot every N applied entries; 0 = off
    truncation: bool = True  # set False to take snapshots without truncating
    delta: int = ble_mod.DEFAULT_DELTA
    cap: int = BALLOT_CAP
    buffer_window: int = 100  # unknown-config buffering before a fetch


@dataclass
class Instance:
    config: int
    processes: tuple[int, ...]
    replica: Replica
    ble: BleState
    rsm: KvStateMachine
    ledger: SnapshotLedger
    storage: Storage
    transfer: StateTransfer  # the handoff this instance started from
    stopped: bool = False  # final sequence decided locally


class ProcessHost:
    """One simulated process: owns its configuration instances and all
    routing between them and the network."""

    def __init__(self, pid: int, net, provider: StorageProvider, opts: HostOptions):
        self.pid = pid
        self.net = net
        self.provider = provider
        self.opts = opts
        self.instances: dict[int, Instance] = {}
        self.active: Optional[int] = None
        self.buffered: dict[int, list[Envelope]] = {}
        self.fetching: dict[int, list[int]] = {}  # config -> known holders
        self.served: set[int] = set()  # configs whose transfer we handed out
        self.pending: set[tuple[int, int]] = set()  # client cmds awaiting reply here

    # ------------------------------------------------------------------
    # construction paths

    def boot_initial(self, config0: tuple[int, ...]) -> None:
        """First boot: members of configuration 0 start it with an empty
        initial sequence; other processes idle until a state transfer."""
        if self.pid not in config0:
            return
        transfer = StateTransfer(
            config=0,
            processes=tuple(sorted(config0)),
            base=0,
            snapshot_blob=RsmSnapshot(0, 0, 0, {}, {}).encode(),
            snapshot_covered=0,
            suffix=(),
        )
        self._start_instance(transfer)

    def recover_boot(self, config0: tuple[int, ...]) -> None:
        """Post-crash boot: rebuild every persisted instance; with nothing
        persisted this is a first boot."""
        configs = self.provider.configs(self.pid)
        if not configs:
            self.boot_initial(config0)
            return
        for config in configs:
            storage = self.provider.storage(self.pid, config)
            self._attach_listener(storage, config)
            replica = recover_replica(
                storage,
                self.pid,
                dedup=self.opts.dedup,
                tracer=self._replica_tracer(config),
            )
            persisted = storage.load()
            rsm = self._rebuild_rsm(persisted)
            ledger = self._rebuild_ledger(persisted)
            ble = ble_init(
                self.pid,
                persisted.processes,
                delta=self.opts.delta,
                seed_ballot=persisted.n_prom.ballot,
                cap=self.opts.cap,
            )
            inst = Instance(
                config=config,
                processes=persisted.processes,
                replica=replica,
                ble=ble,
                rsm=rsm,
                ledger=ledger,
                storage=storage,
                transfer=StateTransfer(
                    config=config,
                    processes=persisted.processes,
                    base=persisted.base,
                    snapshot_blob=persisted.boot_blob,
                    snapshot_covered=persisted.boot_covered,
                    suffix=persisted.pre_entries,
                ),
                stopped=replica.v_a.stopped() and replica.l_d == replica.v_a.glen(),
            )
            self.instances[config] = inst
            self.active = config if self.active is None else max(self.active, config)
            self.net.set_timer(self.pid, config, ble.delay)
            self.net.trace(
                "recovered",
                f"p{self.pid} cfg{config} ld={replica.l_d} len={replica.v_a.glen()}",
                replica.state_digest(),
            )
        # a crash may have interrupted the successor startup after a decided stop
        for config in list(self.instances):
            inst = self.instances[config]
            if inst.stopped and inst.replica.v_a.stopped():
                self._ensure_successor(inst)

    def _rebuild_rsm(self, persisted) -> KvStateMachine:
        snap = RsmSnapshot.decode(persisted.snapshot_blob)
        entries: list[Entry] = []
        replay_from = persisted.snapshot_covered
        if replay_from < persisted.base:
            skip = replay_from - persisted.boot_covered
            entries.extend(persisted.pre_entries[skip:])
            entries.extend(persisted.v_a.suffix_from(persisted.base))
        else:
            entries.extend(persisted.v_a.suffix_from(replay_from))
        entries = entries[: persisted.l_d - replay_from]
        return restore(snap, entries)

    def _rebuild_ledger(self, persisted) -> SnapshotLedger:
        ledger = SnapshotLedger(persisted.processes)
        ledger.truncated = persisted.v_a.offset
        for g in range(persisted.v_a.offset, persisted.l_d):
            entry = persisted.v_a.get(g)
            if is_marker(entry):
                mark = SnapshotMark.decode(entry.op)
                ledger.on_snapshot_decided(mark.process, mark.snap_id, mark.covered)
        return ledger

    def _start_instance(self, transfer: StateTransfer) -> None:
        config = transfer.config
        if config in self.instances:
            return
        storage = self.provider.storage(self.pid, config)
        self._attach_listener(storage, config)
        if storage.load() is None:
            storage.bootstrap(
                config,
                transfer.processes,
                transfer.base,
                snapshot_blob=transfer.snapshot_blob,
                snapshot_covered=transfer.snapshot_covered,
                pre_entries=transfer.suffix,
            )
        replica = Replica(
            config,
            transfer.processes,
            self.pid,
            storage,
            sigma_len=transfer.base,
            dedup=self.opts.dedup,
            tracer=self._replica_tracer(config),
        )
        rsm = restore(RsmSnapshot.decode(transfer.snapshot_blob), transfer.suffix)
        inst = Instance(
            config=config,
            processes=transfer.processes,
            replica=replica,
            ble=ble_init(self.pid, transfer.processes, delta=self.opts.delta, cap=self.opts.cap),
            rsm=rsm,
            ledger=SnapshotLedger(transfer.processes),
            storage=storage,
            transfer=transfer,
        )
        self.instances[config] = inst
        self.active = config if self.active is None else max(self.active, config)
        self.net.set_timer(self.pid, config, inst.ble.delay)
        self.net.trace(
            "start",
            f"p{self.pid} cfg{config} base={transfer.base} sig={transfer.digest()}",
            replica.state_digest(),
        )
        self.fetching.pop(config, None)
        for env in self.buffered.pop(config, []):
            self.on_envelope(env)

    def _attach_listener(self, storage: Storage, config: int) -> None:
        pid = self.pid
        net = self.net

        def listener(kind: str, detail: str) -> None:
            net.persisted(pid, config, kind, detail)

        storage.listener = listener

    def _replica_tracer(self, config: int):
        def tracer(kind: str, detail: str) -> None:
            inst = self.instances.get(config)
            digest = inst.replica.state_digest() if inst else "-"
            self.net.trace(kind, f"p{self.pid} cfg{config} {detail}", digest)

        return tracer

    # ------------------------------------------------------------------
    # network input

    def on_envelope(self, env: Envelope) -> None:
        msg = env.msg
        if isinstance(msg, StateRequest):
            self._serve_state(env)
            return
        if isinstance(msg, StateOffer):
            self._want_state(msg.config, env.src)
            return
        if isinstance(msg, StateChunk):
            if msg.config not in self.instances:
                self._start_instance(msg.transfer)
            return
        inst = self.instances.get(env.config)
        if inst is None:
            known = max(self.instances, default=-1)
            if env.config > known:
                self.buffered.setdefault(env.config, []).append(env)
                holders = self.fetching.setdefault(env.config, [])
                if env.src not in holders:
                    holders.append(env.src)
                if len(self.buffered[env.config]) == 1:
                    self.net.set_host_timer(
                        self.pid, "fetch", self.opts.buffer_window, env.config
                    )
            # messages for cleaned-up configurations are dropped
            return
        if isinstance(msg, HeartbeatRequest):
            dst, reply = ble_mod.ble_on_heartbeat_request(
                inst.ble, env.src, msg.round, msg.max_ballot
            )
            self.net.send(Envelope(env.config, self.pid, dst, reply))
            return
        if isinstance(msg, HeartbeatReply):
            ble_mod.ble_on_heartbeat_reply(inst.ble, env.src, msg.round, msg.ballot)
            return
        out = inst.replica.on_message(env.src, msg)
        self._handle_outputs(inst, out)

    # ------------------------------------------------------------------
    # timers

    def on_ble_timer(self, config: int) -> None:
        inst = self.instances.get(config)
        if inst is None:
            return
        msgs, event = ble_mod.ble_on_timeout(inst.ble)
        for dst, msg in msgs:
            self.net.send(Envelope(config, self.pid, dst, msg))
        self.net.set_timer(self.pid, config, inst.ble.delay)
        if event is not None:
            leader, ballot = event
            self.net.note_leader(config, leader, ballot)
            self.net.trace(
                "leader",
                f"p{self.pid} cfg{config} L=p{leader} b={ballot}",
                inst.replica.state_digest(),
            )
            self._handle_outputs(inst, inst.replica.on_leader(leader, ballot))
        elif inst.replica.phase is Phase.RECOVER and inst.ble.leader is not None:
            # nudge: re-present the current leader so a recovering follower
            # keeps asking to be re-prepared until it is synced
            leader, ballot = inst.ble.leader
            self._handle_outputs(inst, inst.replica.on_leader(leader, ballot))

    def on_host_timer(self, kind: str, data) -> None:
        if kind == "fetch":
            config = data
            if config in self.instances or config not in self.buffered:
                return
            holders = self.fetching.get(config, [])
            if holders:
                target = holders[0]
                holders.append(holders.pop(0))  # rotate for the next retry
                self.net.send(Envelope(config, self.pid, target, StateRequest(config)))
            self.net.set_host_timer(self.pid, "fetch", self.opts.buffer_window, config)

    # ------------------------------------------------------------------
    # client / policy input

    def on_client_submit(self, client: int, seq: int, op: object) -> None:
        if self.active is None:
            self.net.trace("dropped", f"p{self.pid} no active configuration")
            return
        inst = self.instances[self.active]
        self.net.trace(
            "propose",
            f"p{self.pid} cfg{inst.config} {client}:{seq} {render_op(op)}",
            inst.replica.state_digest(),
        )
        stored = inst.rsm.peek_response(client, seq)
        if stored is not None:
            self.net.client_response(client, seq, stored, True, self.pid)
            return
        self.pending.add((client, seq))
        out = inst.replica.on_propose(Command(client, seq, op))
        self._handle_outputs(inst, out)

    def on_policy_submit(self, ss: StopSign) -> None:
        if self.active is None:
            return
        inst = self.instances[self.active]
        if ss.next_config != inst.config + 1:
            self.net.trace(
                "dropped", f"p{self.pid} stop-sign for cfg{ss.next_config} at cfg{inst.config}"
            )
            return
        self.net.trace(
            "propose",
            f"p{self.pid} cfg{inst.config} {ss.text()}",
            inst.replica.state_digest(),
        )
        self._handle_outputs(inst, inst.replica.on_propose(ss))

    def on_connection_lost(self, peer: int) -> None:
        self.net.trace("connlost", f"p{self.pid} peer=p{peer}")
        for config in sorted(self.instances):
            inst = self.instances[config]
            self._handle_outputs(inst, inst.replica.on_connection_lost(peer))

    def cleanup(self, config: int) -> bool:
        """Tear down a stopped instance on a policy directive."""
        if config == self.active:
            self.net.trace("cleanup", f"p{self.pid} cfg{config} rejected:active")
            return False
        inst = self.instances.get(config)
        if inst is None:
            return False
        if not inst.stopped:
            self.net.trace("cleanup", f"p{self.pid} cfg{config} rejected:unstopped")
            return False
        ss = inst.replica.v_a.last()
        joiners = set(ss.processes) - set(inst.processes) if is_stop(ss) else set()
        confirmed = (
            not joiners
            or (config + 1) in self.instances
            or (config + 1) in self.served
        )
        if not confirmed:
            self.net.trace("cleanup", f"p{self.pid} cfg{config} rejected:untransferred")
            return False
        del self.instances[config]
        self.provider.wipe(self.pid, config)
        self.net.trace("cleanup", f"p{self.pid} cfg{config} ok")
        return True

    # ------------------------------------------------------------------
    # output plumbing

    def _handle_outputs(self, inst: Instance, out: Outputs) -> None:
        for dst, msg in out.sends:
            self.net.send(Envelope(inst.config, self.pid, dst, msg))
        for g, entry in out.decided:
            self._apply_decided(inst, g, entry)
        if out.stopped and not inst.stopped:
            self._on_stop_decided(inst)

    def _apply_decided(self, inst: Instance, g: int, entry: Entry) -> None:
        resp, dup = inst.rsm.apply(entry, g)
        self.net.notify_decided(self.pid, inst.config, g, entry)
        if resp is not None and (entry.client, entry.seq) in self.pending:
            self.net.client_response(entry.client, entry.seq, resp, dup, self.pid)
        if is_marker(entry):
            mark = SnapshotMark.decode(entry.op)
            point = inst.ledger.on_snapshot_decided(
                mark.process, mark.snap_id, mark.covered
            )
            if point is not None and self.opts.truncation:
                if point > inst.replica.v_a.offset:
                    inst.storage.persist_truncate(point)
                    inst.replica.v_a.truncate_to(point)
        # snapshots fire on client-command counts, a pure function of the
        # decided sequence, so markers can neither shift nor cascade triggers
        if (
            self.opts.cadence
            and not is_stop(entry)
            and not is_marker(entry)
            and inst.rsm.commands % self.opts.cadence == 0
        ):
            snap = inst.rsm.take_snapshot(inst.rsm.applied)
            blob = snap.encode()
            inst.storage.persist_snapshot(blob, snap.covered)
            if not inst.stopped and not inst.replica.stopped():
                self.net.submit_retryable(
                    mark_command(self.pid, snap.snap_id, snap.covered), inst.config
                )

    def _on_stop_decided(self, inst: Instance) -> None:
        inst.stopped = True
        ss = inst.replica.v_a.last()
        assert is_stop(ss)
        self.net.trace(
            "stop",
            f"p{self.pid} cfg{inst.config} idx={inst.replica.l_d - 1} next=cfg{ss.next_config}",
            inst.replica.state_digest(),
        )
        self._ensure_successor(inst)

    def _ensure_successor(self, inst: Instance) -> None:
        ss = inst.replica.v_a.last()
        if not is_stop(ss):
            return
        if self.pid in ss.processes and ss.next_config not in self.instances:
            self._start_instance(self._build_transfer(inst, ss))
        for joiner in sorted(set(ss.processes) - set(inst.processes)):
            self.net.send(
                Envelope(
                    ss.next_config,
                    self.pid,
                    joiner,
                    StateOffer(ss.next_config, inst.replica.l_d),
                )
            )

    def _build_transfer(self, inst: Instance, ss: StopSign) -> StateTransfer:
        """Canonical handoff: the latest deterministic snapshot plus the final
        sequence entries it does not cover. Identical at every holder."""
        persisted = inst.storage.load()
        covered = persisted.snapshot_covered
        blob = persisted.snapshot_blob
        base = inst.replica.l_d
        if covered <= persisted.boot_covered:
            blob, covered = persisted.boot_blob, persisted.boot_covered
            suffix = persisted.pre_entries + inst.replica.v_a.suffix_from(persisted.base)
            suffix = suffix[: base - covered]
        else:
            suffix = inst.replica.v_a.suffix_from(covered)[: base - covered]
        return StateTransfer(
            config=ss.next_config,
            processes=ss.processes,
            base=base,
            snapshot_blob=blob,
            snapshot_covered=covered,
            suffix=tuple(suffix),
        )

    def _serve_state(self, env: Envelope) -> None:
        config = env.msg.config
        transfer: Optional[StateTransfer] = None
        if config in self.instances:
            transfer = self.instances[config].transfer
        else:
            prev = self.instances.get(config - 1)
            if prev is not None and prev.stopped:
                ss = prev.replica.v_a.last()
                if is_stop(ss):
                    transfer = self._build_transfer(prev, ss)
        if transfer is None:
            self.net.trace("dropped", f"p{self.pid} cannot serve cfg{config} state")
            return
        self.served.add(config)
        self.net.send(Envelope(config, self.pid, env.src, StateChunk(config, transfer)))

    def _want_state(self, config: int, holder: int) -> None:
        if config in self.instances:
            return
        holders = self.fetching.setdefault(config, [])
        if holder not in holders:
            holders.append(holder)
        self.buffered.setdefault(config, [])
        self.net.send(Envelope(config, self.pid, holder, StateRequest(config)))
        self.net.set_host_timer(self.pid, "fetch", self.opts.buffer_window, config)


def render_op(op: object) -> str:
    if isinstance(op, tuple) and op:
        parts = []
        for item in op:
            if isinstance(item, bytes):
                parts.append(item.decode("utf-8", "replace"))
            else:
                parts.append(str(item))
        return " ".join(parts)
    return str(op)
