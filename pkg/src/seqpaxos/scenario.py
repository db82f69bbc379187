"""Line-oriented scenario scripts.

A scenario is `key = value` headers followed by timestamped directives, one
per line. Example:

    processes = 3
    config0 = p1 p2 p3
    seed = 42
    stable_from = 300

    @20 propose c1 put color blue
    @50 crash p2
    @90 recover p2
    @120 drop p1 p3
    @150 partition p1 p2 | p3
    @180 heal
    @200 reconfigure p1 p2 p4
    @400 cleanup cfg0
    @500 end

Directive times must be nondecreasing and an `end` directive is required.
"""

from __future__ import annotations

from dataclasses import replace

from .core import SeqPaxosError
from .simnet import Directive, SimConfig


class ScenarioError(SeqPaxosError):
    def __init__(self, message: str, line_no: int = 0):
        super().__init__(f"line {line_no}: {message}" if line_no else message)
        self.line_no = line_no


_HEADERS = {
    "processes": int,
    "latency": int,
    "delta": int,
    "cadence": int,
    "seed": int,
    "stable_from": int,
    "retry": int,
    "reconnect": int,
    "buffer_window": int,
    "dup_rate": float,
    "dedup": None,
    "truncation": None,
    "storage": None,
    "level": None,
    "config0": None,
}


def _pid(token: str, line_no: int) -> int:
    if not token.startswith("p") or not token[1:].isdigit():
        raise ScenarioError(f"expected a process like p2, got {token!r}", line_no)
    return int(token[1:])


def _cid(token: str, line_no: int) -> int:
    if not token.startswith("c") or not token[1:].isdigit():
        raise ScenarioError(f"expected a client like c1, got {token!r}", line_no)
    return int(token[1:])


def _flag(value: str, line_no: int) -> bool:
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise ScenarioError(f"expected on/off, got {value!r}", line_no)


def _parse_op(tokens: list[str], line_no: int):
    if not tokens:
        raise ScenarioError("missing operation", line_no)
    if tokens[0] == "put":
        if len(tokens) != 3:
            raise ScenarioError("put needs a key and a value", line_no)
        return ("put", tokens[1], tokens[2].encode("utf-8"))
    if tokens[0] == "get":
        if len(tokens) != 2:
            raise ScenarioError("get needs a key", line_no)
        return ("get", tokens[1])
    raise ScenarioError(f"unknown operation {tokens[0]!r}", line_no)


def parse_scenario(text: str) -> SimConfig:
    headers: dict = {}
    directives: list[Directive] = []
    last_t = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("@"):
            tokens = line.split()
            if not tokens[0][1:].isdigit():
                raise ScenarioError(f"bad directive time {tokens[0]!r}", line_no)
            t = int(tokens[0][1:])
            if t < last_t:
                raise ScenarioError(
                    f"directive at t={t} after one at t={last_t}; times must be ordered",
                    line_no,
                )
            last_t = t
            directives.append(_parse_directive(t, tokens[1:], line_no))
        elif "=" in line:
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _HEADERS:
                raise ScenarioError(f"unknown header {key!r}", line_no)
            headers[key] = (value, line_no)
        else:
            raise ScenarioError(f"cannot parse {line!r}", line_no)
    return _build(headers, directives)


def _parse_directive(t: int, tokens: list[str], line_no: int) -> Directive:
    if not tokens:
        raise ScenarioError("empty directive", line_no)
    kind, args = tokens[0], tokens[1:]
    if kind == "crash" and len(args) == 1:
        return Directive(t, "crash", (_pid(args[0], line_no),))
    if kind == "recover" and len(args) == 1:
        return Directive(t, "recover", (_pid(args[0], line_no),))
    if kind == "drop" and len(args) == 2:
        return Directive(t, "drop", (_pid(args[0], line_no), _pid(args[1], line_no)))
    if kind == "partition":
        groups, current = [], []
        for token in args:
            if token == "|":
                groups.append(tuple(current))
                current = []
            else:
                current.append(_pid(token, line_no))
        groups.append(tuple(current))
        if len(groups) < 2 or any(not g for g in groups):
            raise ScenarioError("partition needs at least two nonempty groups", line_no)
        return Directive(t, "partition", tuple(groups))
    if kind == "heal" and not args:
        return Directive(t, "heal")
    if kind == "propose" and len(args) >= 2:
        return Directive(t, "propose", (_cid(args[0], line_no), _parse_op(args[1:], line_no)))
    if kind == "burst" and len(args) == 4 and args[2] == "via":
        return Directive(
            t, "burst", (_cid(args[0], line_no), int(args[1]), _pid(args[3], line_no))
        )
    if kind == "reconfigure" and args:
        return Directive(t, "reconfigure", tuple(_pid(a, line_no) for a in args))
    if kind == "cleanup" and len(args) == 1:
        if not args[0].startswith("cfg") or not args[0][3:].isdigit():
            raise ScenarioError(f"expected cfgN, got {args[0]!r}", line_no)
        return Directive(t, "cleanup", (int(args[0][3:]),))
    if kind == "crash_at_persist" and len(args) == 3:
        return Directive(
            t,
            "crash_at_persist",
            (_pid(args[0], line_no), int(args[1]), int(args[2])),
        )
    if kind == "end" and not args:
        return Directive(t, "end")
    raise ScenarioError(f"cannot parse directive {kind!r} {args}", line_no)


def _build(headers: dict, directives: list[Directive]) -> SimConfig:
    def take(key, conv, default):
        if key not in headers:
            return default
        value, line_no = headers[key]
        try:
            return conv(value) if conv is not None else value
        except ScenarioError:
            raise
        except Exception:
            raise ScenarioError(f"bad value for {key}: {value!r}", line_no)

    nprocs = take("processes", int, 0)
    if nprocs <= 0:
        line_no = headers.get("processes", ("", 0))[1]
        raise ScenarioError("processes must be a positive count", line_no)
    processes = tuple(range(1, nprocs + 1))
    if "config0" in headers:
        value, line_no = headers["config0"]
        config0 = tuple(sorted(_pid(tok, line_no) for tok in value.split()))
        if not config0:
            raise ScenarioError("config0 must not be empty", line_no)
        unknown = set(config0) - set(processes)
        if unknown:
            raise ScenarioError(f"config0 members outside process set: {unknown}", line_no)
    else:
        config0 = processes
    if not any(d.kind == "end" for d in directives):
        raise ScenarioError("scenario needs an end directive")
    for d in directives:
        for arg in d.args if d.kind in ("crash", "recover", "drop") else ():
            if arg not in processes:
                raise ScenarioError(f"unknown process p{arg} in {d.kind}")

    def flag(key, default):
        if key not in headers:
            return default
        value, line_no = headers[key]
        return _flag(value, line_no)

    return SimConfig(
        processes=processes,
        config0=config0,
        directives=directives,
        latency=take("latency", int, 1),
        delta=take("delta", int, 10),
        dedup=flag("dedup", False),
        cadence=take("cadence", int, 0),
        truncation=flag("truncation", True),
        reconnect_delay=take("reconnect", int, 5),
        buffer_window=take("buffer_window", int, 100),
        retry_interval=take("retry", int, 25),
        dup_rate=take("dup_rate", float, 0.0),
        trace_level=take("level", None, "full"),
        seed=take("seed", int, 0),
        stable_from=take("stable_from", int, None),
        storage=take("storage", None, "volatile"),
    )


def load_scenario(path: str) -> SimConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def with_seed(cfg: SimConfig, seed: int) -> SimConfig:
    return replace(cfg, seed=seed)
