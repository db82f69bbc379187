"""Post-hoc verification of simulator traces.

Checks, over the total event order of one run:
  - per-index agreement and pairwise prefix relation of decided sequences
  - validity (only proposed entries decided; no duplicates under dedup)
  - monotone, gap-free local delivery (modulo crash-truncated redelivery)
  - stop-sign finality and configuration continuity across reconfigurations
  - persistence ordering (promise before Promise, accept before Accepted)
  - the stale-suffix rule for promises answering a higher accepted round
  - chosen-prefix stability against later adoptions
  - monotone unique leader ballots per process

The checker is read-only over the trace text and independent of the replica
implementation: it reconstructs shadow logs purely from trace records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import SeqPaxosError


class TraceParseError(SeqPaxosError):
    pass


@dataclass
class Violation:
    prop: str
    message: str
    lines: tuple[int, ...] = ()

    def render(self) -> str:
        where = ",".join(str(l) for l in self.lines)
        return f"[{self.prop}] {self.message} (trace lines {where})"


@dataclass
class Verdict:
    ok: bool
    violations: list[Violation] = field(default_factory=list)
    applicable: bool = True
    stats: dict = field(default_factory=dict)

    def report(self) -> str:
        if not self.applicable:
            return "not-applicable: " + "; ".join(v.message for v in self.violations)
        if self.ok:
            extras = " ".join(f"{k}={v}" for k, v in sorted(self.stats.items()))
            return f"pass {extras}".strip()
        return "FAIL\n" + "\n".join(v.render() for v in self.violations)


@dataclass
class Rec:
    lineno: int
    t: int
    kind: str
    tokens: list[str]


def parse_trace(text) -> list[Rec]:
    if isinstance(text, str):
        lines = text.splitlines()
    else:
        lines = list(text)
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        body = line.rsplit(" | ", 1)[0]
        tokens = body.split(" ")
        if not tokens[0].startswith("t=") or len(tokens) < 2:
            raise TraceParseError(f"line {lineno}: malformed record {line!r}")
        try:
            t = int(tokens[0][2:])
        except ValueError:
            raise TraceParseError(f"line {lineno}: bad time in {line!r}")
        records.append(Rec(lineno, t, tokens[1], tokens[2:]))
    if not records or records[0].kind != "meta":
        raise TraceParseError("trace does not start with a meta record")
    return records


def _kv(tokens: list[str]) -> dict:
    out = {}
    for token in tokens:
        if "=" in token:
            key, value = token.split("=", 1)
            out[key] = value
    return out


def _pid(token: str) -> int:
    return int(token[1:])


def _round_key(text: str) -> tuple[int, int]:
    config, ballot = text.split(".")
    return (int(config), int(ballot))


def _split_entries(body: str) -> list[str]:
    """Split an entry-list rendering on commas outside braces."""
    if not body:
        return []
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(body):
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(body[start:i])
            start = i + 1
    parts.append(body[start:])
    return parts


def _parse_msg(text: str) -> tuple[str, dict]:
    name, _, rest = text.partition("{")
    fields: dict = {}
    body = rest[:-1] if rest.endswith("}") else rest
    pos = 0
    while pos < len(body):
        eq = body.find("=", pos)
        if eq < 0:
            break
        key = body[pos:eq]
        value_start = eq + 1
        if body[value_start : value_start + 1] == "[":
            depth, i = 0, value_start
            while i < len(body):
                if body[i] == "[":
                    depth += 1
                elif body[i] == "]":
                    depth -= 1
                    if depth == 0:
                        break
                i += 1
            fields[key] = body[value_start + 1 : i]
            pos = i + 2  # skip "],"
        else:
            depth, i = 0, value_start
            while i < len(body):
                ch = body[i]
                if ch == "{":
                    depth += 1
                elif ch == "}":
                    depth -= 1
                elif ch == "," and depth == 0:
                    break
                i += 1
            fields[key] = body[value_start:i]
            pos = i + 1
    return name, fields


class _Safety:
    def __init__(self, meta: dict):
        self.meta = meta
        self.cap = int(meta.get("cap", 1024))
        self.dedup = meta.get("dedup") == "on"
        self.membership: dict[int, tuple[int, ...]] = {
            0: tuple(_pid(p) for p in meta["config0"].split(","))
        }
        self.violations: list[Violation] = []
        self.per_index: dict[int, tuple[str, int]] = {}
        self.entry_index: dict[str, int] = {}
        self.proposed: set[str] = set()
        self.decided_by: dict[int, dict[int, str]] = {}  # pid -> idx -> entry
        self.last_idx: dict[int, int] = {}
        self.next_idx: dict[tuple[int, int], int] = {}
        self.start_base: dict[tuple[int, int], int] = {}
        self.bases: dict[int, int] = {}  # pid -> highest instance base
        self.sigs: dict[int, dict[str, int]] = {}
        self.stops: dict[int, tuple[int, int]] = {}  # cfg -> (idx, lineno)
        self.prom_persist: dict[tuple[int, int], str] = {}
        self.durable_len: dict[tuple[int, int], int] = {}
        self.shadow: dict[tuple[int, int], dict[int, str]] = {}
        self.shadow_len: dict[tuple[int, int], int] = {}
        self.prepare_na: dict[tuple[int, str, int], list] = {}
        self.las: dict[tuple[int, str], dict[int, int]] = {}
        self.frozen: dict[int, tuple[str, int]] = {}
        self.frozen_hi: dict[int, int] = {}  # cfg -> chosen watermark
        self.leader_ballots: dict[tuple[int, int], int] = {}
        self.ballot_owner: dict[tuple[int, int], tuple[int, int]] = {}

    def bad(self, prop: str, message: str, *lines: int) -> None:
        self.violations.append(Violation(prop, message, tuple(lines)))

    # -- record handlers -------------------------------------------------

    def on_propose(self, rec: Rec) -> None:
        self.proposed.add(rec.tokens[2])

    def on_decide(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        kv = _kv(rec.tokens[2:3])
        idx = int(kv["idx"])
        entry = rec.tokens[3]
        known = self.per_index.get(idx)
        if known is None:
            self.per_index[idx] = (entry, rec.lineno)
        elif known[0] != entry:
            self.bad(
                "per-index-agreement",
                f"index {idx} decided as {known[0]} and as {entry}",
                known[1],
                rec.lineno,
            )
        dup_at = self.entry_index.get(entry)
        if dup_at is None:
            self.entry_index[entry] = idx
        elif dup_at != idx and self.dedup and not entry.startswith("SS"):
            self.bad(
                "no-duplicates",
                f"{entry} decided at both {dup_at} and {idx}",
                rec.lineno,
            )
        if entry not in self.proposed:
            self.bad("validity", f"{entry} decided but never proposed", rec.lineno)
        last = self.last_idx.get(pid)
        if last is not None and idx <= last:
            self.bad(
                "SC3",
                f"p{pid} delivered index {idx} after {last}",
                rec.lineno,
            )
        self.last_idx[pid] = idx
        expect = self.next_idx.get((pid, cfg))
        if expect is None:
            base = self.start_base.get((pid, cfg))
            if base is not None and idx != base:
                self.bad(
                    "SC3",
                    f"p{pid} cfg{cfg} first delivery at {idx}, instance base {base}",
                    rec.lineno,
                )
        elif idx != expect:
            self.bad(
                "SC3",
                f"p{pid} cfg{cfg} delivered {idx}, expected {expect}",
                rec.lineno,
            )
        self.next_idx[(pid, cfg)] = idx + 1
        self.decided_by.setdefault(pid, {})[idx] = entry
        stop = self.stops.get(cfg)
        if stop is not None and idx > stop[0]:
            self.bad(
                "stop-finality",
                f"p{pid} cfg{cfg} delivered index {idx} past stop at {stop[0]}",
                stop[1],
                rec.lineno,
            )
        if entry.startswith("SS{"):
            if stop is None or idx < stop[0]:
                self.stops[cfg] = (idx, rec.lineno)
            inner = entry[3:-1]
            cfg_part, procs = inner.split(";")
            self.membership[int(cfg_part[3:])] = tuple(
                _pid(p) for p in procs.split(",")
            )
        frozen = self.frozen.get(idx)
        if frozen is not None and frozen[0] != entry:
            self.bad(
                "chosen-stability",
                f"index {idx} decided as {entry} but chosen as {frozen[0]}",
                frozen[1],
                rec.lineno,
            )

    def _write(self, pid: int, cfg: int, idx: int, entry: str, lineno: int) -> None:
        shadow = self.shadow.setdefault((pid, cfg), {})
        shadow[idx] = entry
        self.shadow_len[(pid, cfg)] = idx + 1
        stop = self.stops.get(cfg)
        if stop is not None and idx > stop[0]:
            self.bad(
                "stop-finality",
                f"p{pid} cfg{cfg} accepted index {idx} past decided stop at {stop[0]}",
                stop[1],
                lineno,
            )
        frozen = self.frozen.get(idx)
        if frozen is not None and frozen[0] != entry:
            self.bad(
                "chosen-stability",
                f"p{pid} cfg{cfg} overwrote chosen index {idx} ({frozen[0]}) with {entry}",
                frozen[1],
                lineno,
            )

    def on_accept(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        kv = _kv(rec.tokens[2:4])
        self._write(pid, cfg, int(kv["idx"]), rec.tokens[4], rec.lineno)

    def on_adopt(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        kv = _kv(rec.tokens[2:4])
        cut = int(kv["cut"])
        body = rec.tokens[4]
        entries = _split_entries(body[2:-1]) if body.startswith("+[") else []
        shadow = self.shadow.setdefault((pid, cfg), {})
        for idx in [i for i in shadow if i >= cut]:
            del shadow[idx]
        self.shadow_len[(pid, cfg)] = cut
        for offset, entry in enumerate(entries):
            self._write(pid, cfg, cut + offset, entry, rec.lineno)

    def on_send(self, rec: Rec) -> None:
        route = rec.tokens[0]
        cfg = int(rec.tokens[1][3:])
        src, dst = route.split("->")
        src_pid, dst_pid = _pid(src), _pid(dst)
        name, fields = _parse_msg(rec.tokens[2])
        if name == "Prepare":
            self.prepare_na.setdefault((cfg, fields["n"], dst_pid), []).append(
                fields["na"]
            )
        elif name == "Promise":
            persisted = self.prom_persist.get((src_pid, cfg))
            if persisted != fields["n"]:
                self.bad(
                    "persist-order",
                    f"p{src_pid} cfg{cfg} sent Promise for {fields['n']} with persisted promise {persisted}",
                    rec.lineno,
                )
            nas = self.prepare_na.get((cfg, fields["n"], src_pid))
            if nas and int(fields["sfxb"]) > 0:
                if all(_round_key(fields["na"]) < _round_key(na) for na in nas):
                    self.bad(
                        "stale-suffix",
                        f"p{src_pid} cfg{cfg} sent a non-empty suffix with accepted round "
                        f"{fields['na']} below the leader's {nas[-1]}",
                        rec.lineno,
                    )
        elif name == "Accepted":
            la = int(fields["la"])
            durable = self.durable_len.get((src_pid, cfg), -1)
            if la > durable:
                self.bad(
                    "persist-order",
                    f"p{src_pid} cfg{cfg} acknowledged length {la} with only {durable} persisted",
                    rec.lineno,
                )
            self._note_accepted(cfg, fields["n"], src_pid, la, rec.lineno)

    def _note_accepted(self, cfg: int, n: str, pid: int, la: int, lineno: int) -> None:
        las = self.las.setdefault((cfg, n), {})
        las[pid] = max(la, las.get(pid, 0))
        members = self.membership.get(cfg)
        if members is None:
            return
        leader = _round_key(n)[1] % self.cap
        values = dict(las)
        values.setdefault(leader, self.shadow_len.get((leader, cfg), 0))
        lengths = sorted((values.get(p, 0) for p in members), reverse=True)
        majority = len(members) // 2 + 1
        chosen = lengths[majority - 1] if len(lengths) >= majority else 0
        hi = self.frozen_hi.get(cfg, self.bases_of(cfg))
        if chosen > hi:
            leader_shadow = self.shadow.get((leader, cfg), {})
            for idx in range(hi, chosen):
                entry = leader_shadow.get(idx)
                if entry is not None and idx not in self.frozen:
                    self.frozen[idx] = (entry, lineno)
            self.frozen_hi[cfg] = chosen

    def bases_of(self, cfg: int) -> int:
        if cfg == 0:
            return 0
        stop = self.stops.get(cfg - 1)
        return stop[0] + 1 if stop else 0

    def on_persist(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        what = rec.tokens[2]
        kv = _kv(rec.tokens[3:])
        if what == "prom":
            self.prom_persist[(pid, cfg)] = kv["n"]
        elif what in ("acc", "app"):
            self.durable_len[(pid, cfg)] = int(kv["len"])
        elif what == "boot":
            base = int(kv["base"])
            self.durable_len[(pid, cfg)] = base
            self.prom_persist.setdefault((pid, cfg), f"{cfg}.0")

    def on_leader(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        kv = _kv(rec.tokens[2:])
        leader = _pid(kv["L"])
        ballot = int(kv["b"])
        prev = self.leader_ballots.get((pid, cfg))
        if prev is not None and ballot <= prev:
            self.bad(
                "ble3",
                f"p{pid} cfg{cfg} elected ballot {ballot} after {prev}",
                rec.lineno,
            )
        self.leader_ballots[(pid, cfg)] = ballot
        owner = self.ballot_owner.get((cfg, ballot))
        if owner is None:
            self.ballot_owner[(cfg, ballot)] = (leader, rec.lineno)
        elif owner[0] != leader:
            self.bad(
                "ble3",
                f"cfg{cfg} ballot {ballot} elected for p{leader} and p{owner[0]}",
                owner[1],
                rec.lineno,
            )

    def on_start(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        kv = _kv(rec.tokens[2:])
        base = int(kv["base"])
        self.start_base[(pid, cfg)] = base
        self.bases[pid] = max(self.bases.get(pid, 0), base)
        sigs = self.sigs.setdefault(cfg, {})
        if kv["sig"] not in sigs:
            sigs[kv["sig"]] = rec.lineno
        if len(sigs) > 1:
            self.bad(
                "config-continuity",
                f"cfg{cfg} started from differing initial sequences {sorted(sigs)}",
                rec.lineno,
            )
        self.durable_len.setdefault((pid, cfg), base)

    def on_recovered(self, rec: Rec) -> None:
        pid = _pid(rec.tokens[0])
        cfg = int(rec.tokens[1][3:])
        kv = _kv(rec.tokens[2:])
        ld, length = int(kv["ld"]), int(kv["len"])
        # delivery resumes at the persisted decided length; entries below it
        # were durably delivered before the crash
        self.next_idx.pop((pid, cfg), None)
        self.start_base[(pid, cfg)] = ld
        if ld > 0:
            self.last_idx[pid] = max(self.last_idx.get(pid, -1), ld - 1)
        # unpersisted accepted entries did not survive the crash
        shadow = self.shadow.setdefault((pid, cfg), {})
        for idx in [i for i in shadow if i >= length]:
            del shadow[idx]
        self.shadow_len[(pid, cfg)] = length
        self.durable_len[(pid, cfg)] = length

    def finish(self) -> None:
        for cfg, sigs in self.sigs.items():
            if cfg == 0:
                continue
            stop = self.stops.get(cfg - 1)
            bases = {
                base for (pid, c), base in self.start_base.items() if c == cfg
            }
            if stop is not None:
                for base in bases:
                    if base != stop[0] + 1:
                        self.bad(
                            "config-continuity",
                            f"cfg{cfg} started at base {base}, stop decided at {stop[0]}",
                            stop[1],
                        )


    def on_recover_fault(self, rec: Rec) -> None:
        # amnesia restarts a process's election history: the recovered BLE may
        # re-announce the incumbent (same pair), which uniqueness permits
        pid = _pid(rec.tokens[0])
        for key in [k for k in self.leader_ballots if k[0] == pid]:
            del self.leader_ballots[key]


_SAFETY_DISPATCH = {
    "propose": _Safety.on_propose,
    "decide": _Safety.on_decide,
    "accept": _Safety.on_accept,
    "adopt": _Safety.on_adopt,
    "send": _Safety.on_send,
    "persist": _Safety.on_persist,
    "leader": _Safety.on_leader,
    "start": _Safety.on_start,
    "recovered": _Safety.on_recovered,
    "recover": _Safety.on_recover_fault,
}


def check_safety(trace) -> Verdict:
    records = parse_trace(trace)
    meta = _kv(records[0].tokens)
    state = _Safety(meta)
    for rec in records[1:]:
        handler = _SAFETY_DISPATCH.get(rec.kind)
        if handler is not None:
            handler(state, rec)
    state.finish()
    stats = {
        "records": len(records),
        "decided": len(state.per_index),
        "processes": len(state.decided_by),
    }
    return Verdict(not state.violations, state.violations, stats=stats)


def check_liveness(trace, stable_from: Optional[int] = None) -> Verdict:
    records = parse_trace(trace)
    meta = _kv(records[0].tokens)
    if stable_from is None:
        if meta.get("stable_from", "-") == "-":
            return Verdict(
                True,
                [Violation("liveness", "no stable_from configured")],
                applicable=False,
            )
        stable_from = int(meta["stable_from"])

    down: set[int] = set()
    partitioned_at_tail = False
    faults_in_tail: list[Rec] = []
    proposed_in_tail: dict[str, int] = {}
    decided_at: dict[int, set[int]] = {}
    decided_idx: dict[str, int] = {}
    bases: dict[int, int] = {}
    membership = {0: tuple(_pid(p) for p in meta["config0"].split(","))}
    highest_cfg = 0
    partition_open = False

    for rec in records[1:]:
        if rec.kind == "crash":
            down.add(_pid(rec.tokens[0]))
            if rec.t >= stable_from:
                faults_in_tail.append(rec)
        elif rec.kind == "recover":
            down.discard(_pid(rec.tokens[0]))
        elif rec.kind in ("drop", "partition"):
            if rec.t >= stable_from:
                faults_in_tail.append(rec)
            if rec.kind == "partition":
                partition_open = True
        elif rec.kind == "heal":
            partition_open = False
        elif rec.kind == "propose":
            if rec.t >= stable_from:
                proposed_in_tail.setdefault(rec.tokens[2], rec.lineno)
        elif rec.kind == "decide":
            pid = _pid(rec.tokens[0])
            idx = int(_kv(rec.tokens[2:3])["idx"])
            entry = rec.tokens[3]
            decided_at.setdefault(pid, set()).add(idx)
            decided_idx[entry] = idx
            if entry.startswith("SS{"):
                inner = entry[3:-1]
                cfg_part, procs = inner.split(";")
                membership[int(cfg_part[3:])] = tuple(_pid(p) for p in procs.split(","))
        elif rec.kind == "start":
            pid = _pid(rec.tokens[0])
            cfg = int(rec.tokens[1][3:])
            base = int(_kv(rec.tokens[2:])["base"])
            bases[pid] = max(bases.get(pid, 0), base)
            highest_cfg = max(highest_cfg, cfg)

    if partition_open:
        faults_in_tail.append(records[-1])
    if faults_in_tail:
        return Verdict(
            True,
            [
                Violation(
                    "liveness",
                    f"faults at or after t={stable_from}; stable-tail precondition unmet",
                    tuple(r.lineno for r in faults_in_tail[:3]),
                )
            ],
            applicable=False,
        )
    members = membership.get(highest_cfg, membership[0])
    live = [p for p in members if p not in down]
    if len(live) < len(members) // 2 + 1:
        return Verdict(
            True,
            [Violation("liveness", "no live majority in the stable tail")],
            applicable=False,
        )

    violations = []
    for entry, lineno in sorted(proposed_in_tail.items()):
        idx = decided_idx.get(entry)
        if idx is None:
            violations.append(
                Violation("SC4", f"{entry} retried in the stable tail, never decided", (lineno,))
            )
            continue
        for pid in live:
            if idx in decided_at.get(pid, ()) or idx < bases.get(pid, 0):
                continue
            violations.append(
                Violation(
                    "SC4",
                    f"{entry} (index {idx}) not delivered at live p{pid}",
                    (lineno,),
                )
            )
    stats = {"tail_commands": len(proposed_in_tail), "live": len(live)}
    return Verdict(not violations, violations, stats=stats)
