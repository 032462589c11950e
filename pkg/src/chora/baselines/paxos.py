"""Multi-Paxos normal case with a fixed leader.

The leader batches buffered requests into one accept per slot and multicasts
it; followers ack each slot to the leader; the leader decides at a quorum and
piggybacks its commit index on later accepts (or sends a bare commit notice
when idle). Followers forward client requests to the leader one by one.
"""

from __future__ import annotations

from ..core import OP, Command
from .common import BaselineReplica


class PaxosReplica(BaselineReplica):
    def __init__(self, rid, members, **kw):
        super().__init__(rid, members, **kw)
        self.leader = self.members[0]
        self.next_slot = 1
        self.acks = {}
        self.sent_at = {}
        self.announced = 0
        self.commit_hint = 0

    @property
    def is_leader(self):
        return self.id == self.leader

    def on_client_request(self, rid, op, now, flush=False):
        if not self._admit(rid, op, now):
            return []
        item = (rid[0], rid[1], op)
        if self.is_leader:
            self.cmds.append(item)
        else:
            self._send(kind="fwd", reqs=(item,), dest=self.leader)
        return []

    def paxos_step(self, msg, now):
        """Handle one message; returns the messages owed afterwards."""
        self.receive(msg, now)
        return self.flush(now)

    def receive(self, msg, now):
        k = msg.kind
        if k == "fwd":
            if self.is_leader:
                for item in msg.reqs:
                    if (item[0], item[1]) not in self.dedup:
                        self.cmds.append(item)
        elif k == "accept":
            self._store(msg.slot, msg.cmd, now, "deliver")
            self._send(kind="ack", slot=msg.slot, dest=self.leader)
            self._learn(msg.commit, now)
        elif k == "commit":
            self._learn(msg.commit, now)
        elif k == "ack":
            if self.is_leader and msg.slot not in self.decided:
                got = self.acks.setdefault(msg.slot, {self.id})
                got.add(msg.sender)
                if len(got) >= self.q:
                    self.decided.add(msg.slot)
                    del self.acks[msg.slot]
                    self.sent_at.pop(msg.slot, None)
                    self._advance(now)
        elif k == "nack":
            if self.is_leader:
                for s in msg.slots:
                    if s in self.log:
                        self._send(kind="accept", slot=s, cmd=self.log[s], commit=self.last_commit,
                                   dest=msg.sender)

    def _learn(self, commit, now):
        if commit > self.commit_hint:
            self.commit_hint = commit
        for s in range(self.last_commit + 1, self.commit_hint + 1):
            if s not in self.log:
                break
            self.decided.add(s)
        self._advance(now)

    def flush(self, now, force=False):
        if self.is_leader:
            sent = False
            while self.cmds:
                batch = self._take_batch()
                slot = self.next_slot
                self.next_slot += 1
                cmd = Command(OP, self.id, 0, batch)
                self._store(slot, cmd, now, "propose")
                self.sent_at[slot] = now
                self._send(kind="accept", slot=slot, cmd=cmd, commit=self.last_commit)
                sent = True
            if self.last_commit > self.announced and not sent:
                self._send(kind="commit", commit=self.last_commit)
            if self.out:
                self.announced = self.last_commit
        return super().flush(now, force)

    def tick(self, now):
        if self.is_leader:
            for s, t in list(self.sent_at.items()):
                if now - t >= self.retry:
                    self.sent_at[s] = now
                    self._send(kind="accept", slot=s, cmd=self.log[s], commit=self.last_commit)
        elif self.commit_hint > self.last_commit and self._blocked(now):
            missing = [s for s in range(self.last_commit + 1, self.commit_hint + 1)
                       if s not in self.log][:64]
            if missing:
                self._send(kind="nack", slots=tuple(missing), dest=self.leader)


def paxos_step(state: PaxosReplica, msg, now):
    return state, state.paxos_step(msg, now)
