"""Protocol-agnostic replication primitives: commands, logs, slot ownership, quorums."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

OP = "op"
NOOP = "noop"
VIEW_INIT = "view-init"


class ChoraError(Exception):
    pass


class OutOfRange(ChoraError, ValueError):
    pass


class InvariantViolation(ChoraError):
    """A local data-structure invariant broke; always a protocol bug."""


class SafetyViolation(InvariantViolation):
    """Two different commands met at one (slot, view)."""


@dataclass(frozen=True)
class AssignmentScheme:
    proposers: tuple
    base: int

    def __post_init__(self):
        if not self.proposers:
            raise ValueError("assignment scheme needs at least one proposer")
        if len(set(self.proposers)) != len(self.proposers):
            raise ValueError("duplicate proposer in assignment scheme")
        if self.base < 0:
            raise ValueError("scheme base must be >= 0")

    def owner(self, slot: int) -> int:
        return slot_owner(slot, self)

    def first_owned(self, replica: int, at_least: int) -> int | None:
        """Smallest slot >= at_least owned by ``replica``, or None if it owns none."""
        try:
            idx = self.proposers.index(replica)
        except ValueError:
            return None
        n = len(self.proposers)
        start = max(at_least, self.base)
        off = (idx - (start - self.base)) % n
        return start + off

    def owned_between(self, replica: int, lo: int, hi: int) -> list[int]:
        first = self.first_owned(replica, lo)
        if first is None:
            return []
        return list(range(first, hi + 1, len(self.proposers)))

    def token(self) -> str:
        return ".".join(str(p) for p in self.proposers) + "@" + str(self.base)


@dataclass(frozen=True)
class Command:
    """One log entry.

    ``batch`` holds ``(client, seq, payload)`` triples for client ops; a proposal
    may carry several of them (adaptive batching), they commit together.
    """

    kind: str
    proposer: int
    view: int
    batch: tuple = ()
    scheme: AssignmentScheme | None = None
    excluded: tuple = ()

    def __post_init__(self):
        if self.view < 0:
            raise ValueError("attached view must be >= 0")
        if self.kind == OP:
            if not self.batch:
                raise ValueError("client command needs at least one request")
        elif self.kind == NOOP:
            if self.batch:
                raise ValueError("no-op carries no payload")
        elif self.kind == VIEW_INIT:
            if self.scheme is None:
                raise ValueError("view-init needs an assignment scheme")
        else:
            raise ValueError(f"unknown command kind {self.kind!r}")

    @property
    def req_ids(self) -> tuple:
        return tuple((c, s) for c, s, _ in self.batch)

    @property
    def cid(self) -> str:
        if self.kind == OP:
            reqs = "+".join(f"{c}.{s}" for c, s, _ in self.batch)
            return f"op:{self.proposer}:{self.view}:{reqs}"
        if self.kind == NOOP:
            return f"noop:{self.proposer}:{self.view}"
        return f"vi:{self.proposer}:{self.view}:{self.scheme.token()}"


def noop(proposer: int, view: int) -> Command:
    return Command(NOOP, proposer, view)


class Log:
    """Sparse replicated log; slot 0 is an implicit null entry of view 0."""

    def __init__(self):
        self.slots: dict[int, Command] = {}
        self.last_append = 0

    def __len__(self):
        return len(self.slots)

    def __contains__(self, slot):
        return slot in self.slots

    def get(self, slot: int) -> Command | None:
        return self.slots.get(slot)

    def view_at(self, slot: int) -> int:
        if slot == 0:
            return 0
        return self.slots[slot].view

    def max_slot(self) -> int:
        return max(self.slots, default=0)

    def append(self, slot: int, cmd: Command) -> bool:
        """Store ``cmd`` at ``slot``; returns False for an idempotent redelivery.

        A different command of the same view at an occupied slot raises
        SafetyViolation. Replacing an older-view entry is the caller's job
        (``remove`` first).
        """
        if slot < 1:
            raise OutOfRange(f"slot {slot} < 1")
        cur = self.slots.get(slot)
        if cur is not None:
            if cur == cmd:
                return False
            if cur.view == cmd.view:
                raise SafetyViolation(
                    f"slot {slot}: {cur.cid} already present, refusing {cmd.cid}")
            raise InvariantViolation(
                f"slot {slot} holds {cur.cid} from view {cur.view}; remove it first")
        self.slots[slot] = cmd
        if slot == self.last_append + 1:
            s = slot
            slots = self.slots
            while s + 1 in slots:
                s += 1
            self.last_append = s
        return True

    def remove(self, slot: int) -> Command | None:
        cmd = self.slots.pop(slot, None)
        if cmd is not None and slot <= self.last_append:
            self.last_append = slot - 1
        return cmd

    def truncate_above(self, slot: int) -> list[tuple[int, Command]]:
        gone = sorted((s, c) for s, c in self.slots.items() if s > slot)
        for s, _ in gone:
            del self.slots[s]
        if self.last_append > slot:
            self.last_append = slot
        return gone

    def items(self):
        return sorted(self.slots.items())


def slot_owner(slot: int, scheme: AssignmentScheme) -> int:
    if slot < scheme.base:
        raise OutOfRange(f"slot {slot} precedes scheme base {scheme.base}")
    return scheme.proposers[(slot - scheme.base) % len(scheme.proposers)]


def append(log: Log, slot: int, cmd: Command) -> Log:
    log.append(slot, cmd)
    return log


def compute_commit(acks: Mapping[int, int] | Iterable[int], quorum: int) -> int:
    """Largest slot that at least ``quorum`` replicas have acknowledged."""
    values = list(acks.values()) if isinstance(acks, Mapping) else list(acks)
    if quorum < 1 or quorum > len(values):
        raise ValueError(f"quorum {quorum} outside 1..{len(values)}")
    values.sort(reverse=True)
    return values[quorum - 1]


def log_up_to_date(a: tuple[int, int], b: tuple[int, int]) -> bool:
    """True iff a (last-append view, last-append slot) is at least as up-to-date as b."""
    av, asl = a
    bv, bsl = b
    if min(av, asl, bv, bsl) < 0:
        raise ValueError("views and slots are non-negative")
    return av > bv or (av == bv and asl >= bsl)


def quorum_size(n: int) -> int:
    return n // 2 + 1


@dataclass
class AckVector:
    acked: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, members) -> "AckVector":
        return cls({m: 0 for m in members})

    def reset(self):
        for k in self.acked:
            self.acked[k] = 0

    def commit_point(self, quorum: int) -> int:
        return compute_commit(self.acked, quorum)
