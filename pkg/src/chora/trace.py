"""Append-only event trace and its line format.

One event per line: ``time_ns kind node k1=v1 k2=v2 ...``. Values are either
integers or whitespace-free tokens; lists are comma-joined by the producer.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Iterator, NamedTuple

KINDS = frozenset({
    "meta", "send", "deliver", "drop", "append", "truncate", "ack-advance",
    "commit", "execute", "reply", "crash", "recover-node", "view-adopt",
    "elect", "mode-switch", "round-begin", "round-end", "request", "violation",
    "fault",
})


class TraceEvent(NamedTuple):
    time: int
    kind: str
    node: int
    data: dict

    def to_line(self) -> str:
        parts = [str(self.time), self.kind, str(self.node)]
        for k, v in self.data.items():
            parts.append(f"{k}={_fmt(v)}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "TraceEvent":
        fields = line.split()
        if len(fields) < 3:
            raise ValueError(f"malformed trace line: {line!r}")
        time, kind, node = int(fields[0]), fields[1], int(fields[2])
        if kind not in KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        data = {}
        for tok in fields[3:]:
            k, sep, v = tok.partition("=")
            if not sep:
                raise ValueError(f"malformed field {tok!r} in {line!r}")
            data[k] = _parse(v)
        return cls(time, kind, node, data)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v) if v else "-"
    s = str(v)
    if not s or any(ch.isspace() for ch in s):
        raise ValueError(f"trace value {v!r} is not a single token")
    return s


def _parse(v: str):
    if v.lstrip("-").isdigit():
        return int(v)
    return v


def split_list(v) -> list[str]:
    """Inverse of the list encoding used in ``_fmt``."""
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    if v in ("-", "", None):
        return []
    return str(v).split(",")


class Trace:
    """In-memory trace; events are appended in non-decreasing time order."""

    def __init__(self, enabled: bool = True):
        self.events: list[TraceEvent] = []
        self.enabled = enabled

    def emit(self, time: int, kind: str, node: int, **data):
        if self.enabled:
            self.events.append(TraceEvent(time, kind, node, data))

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def lines(self) -> Iterator[str]:
        for ev in self.events:
            yield ev.to_line()

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def write(self, path):
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line)
                fh.write("\n")

    @classmethod
    def read(cls, path) -> "Trace":
        tr = cls()
        with open(path) as fh:
            tr.events = list(parse_lines(fh))
        return tr

    @classmethod
    def from_events(cls, events: Iterable[TraceEvent]) -> "Trace":
        tr = cls()
        tr.events = list(events)
        return tr


def parse_lines(lines: Iterable[str]) -> Iterator[TraceEvent]:
    for line in lines:
        line = line.strip()
        if line and not line.startswith("#"):
            yield TraceEvent.from_line(line)
