"""Mencius-style multi-leader replication over a static round-robin log.

Each replica proposes only in its own slots. Every slot is acknowledged
independently by a unicast to its owner, which decides at a quorum and
announces decided slots on its next outgoing message. A replica that sees a
peer's proposal beyond its own next slot skips the gap with no-ops at once.
Execution waits for the gap-free decided prefix.
"""

from __future__ import annotations

from ..core import OP, AssignmentScheme, Command
from .common import BaselineReplica


class MenciusReplica(BaselineReplica):
    def __init__(self, rid, members, **kw):
        super().__init__(rid, members, **kw)
        self.scheme = AssignmentScheme(self.members, 1)
        self.next_slot = self.scheme.first_owned(rid, 1)
        self.acks = {}
        self.sent_at = {}
        self.to_announce = []
        self.highest_seen = 0

    def on_client_request(self, rid, op, now, flush=False):
        if self._admit(rid, op, now):
            self.cmds.append((rid[0], rid[1], op))
        return []

    def mencius_step(self, msg, now):
        self.receive(msg, now)
        return self.flush(now)

    def receive(self, msg, now):
        k = msg.kind
        if msg.slots and k != "nack":
            self._decide_many(msg.sender, msg.slots, now)
        if k == "prop":
            self._store(msg.slot, msg.cmd, now, "deliver")
            self.highest_seen = max(self.highest_seen, msg.slot)
            self._send(kind="ack", slot=msg.slot, dest=msg.sender)
        elif k == "skip":
            lo, hi = msg.span
            for s in self.scheme.owned_between(msg.sender, lo, hi):
                self._store(s, self._noop(msg.sender), now, "skip")
                self.decided.add(s)
            self.highest_seen = max(self.highest_seen, hi)
        elif k == "ack":
            if self.scheme.owner(msg.slot) == self.id and msg.slot not in self.decided:
                got = self.acks.setdefault(msg.slot, {self.id})
                got.add(msg.sender)
                if len(got) >= self.q:
                    del self.acks[msg.slot]
                    self.sent_at.pop(msg.slot, None)
                    self.decided.add(msg.slot)
                    self.to_announce.append(msg.slot)
        elif k == "nack":
            for s in msg.slots:
                if s in self.log and self.scheme.owner(s) == self.id:
                    self._send(kind="prop", slot=s, cmd=self.log[s], dest=msg.sender,
                               slots=(s,) if s in self.decided else ())
        self._advance(now)

    def _decide_many(self, owner, slots, now):
        for s in slots:
            self.decided.add(s)

    def _maybe_skip(self, now):
        if self.next_slot < self.highest_seen:
            hi = self.highest_seen
            lo = self.next_slot
            for s in self.scheme.owned_between(self.id, lo, hi):
                self._store(s, self._noop(self.id), now, "skip")
                self.decided.add(s)
            self.next_slot = self.scheme.first_owned(self.id, hi + 1)
            self._send(kind="skip", span=(lo, hi))

    def flush(self, now, force=False):
        while self.cmds:
            batch = self._take_batch()
            slot = self.next_slot
            self.next_slot += self.n
            cmd = Command(OP, self.id, 0, batch)
            self._store(slot, cmd, now, "propose")
            self.highest_seen = max(self.highest_seen, slot)
            self.sent_at[slot] = now
            self._send(kind="prop", slot=slot, cmd=cmd)
        self._maybe_skip(now)
        if self.to_announce:
            carrier = next((m for m in self.out if m.dest is None), None)
            if carrier is None:
                self._send(kind="decided")
                carrier = self.out[-1]
            carrier.slots = tuple(self.to_announce)
            self.to_announce = []
        self._advance(now)
        return super().flush(now, force)

    def tick(self, now):
        for s, t in list(self.sent_at.items()):
            if now - t >= self.retry:
                self.sent_at[s] = now
                self._send(kind="prop", slot=s, cmd=self.log[s])
        if not self._blocked(now):
            return
        s = self.last_commit + 1
        missing = []
        top = max(self.decided, default=0)
        while s <= top and len(missing) < 64:
            if s not in self.log:
                missing.append(s)
            s += 1
        by_owner = {}
        for s in missing:
            by_owner.setdefault(self.scheme.owner(s), []).append(s)
        for owner, slots in sorted(by_owner.items()):
            if owner != self.id:
                self._send(kind="nack", slots=tuple(slots), dest=owner)


def mencius_step(state: MenciusReplica, msg, now):
    return state, state.mencius_step(msg, now)
