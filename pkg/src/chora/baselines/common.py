"""Plumbing shared by the comparison protocols."""

from __future__ import annotations

from dataclasses import dataclass

from ..core import OP, Command, noop
from ..replica import RESPONSIVE, ClientEvent
from ..trace import Trace


@dataclass(slots=True)
class BaselineMessage:
    sender: int
    kind: str
    slot: int = 0
    cmd: Command | None = None
    commit: int = 0
    slots: tuple = ()
    reqs: tuple = ()
    span: tuple | None = None
    dest: int | None = None
    view: int = 0
    mid: int = -1
    round: int = -1
    protocol: bool = True

    def tag(self) -> str:
        return self.kind


class BaselineReplica:
    """Responsive-only replica skeleton: client buffering, in-order execution, replies."""

    mode = RESPONSIVE
    round_scale = 1.0

    def __init__(self, rid, members, trace: Trace | None = None, batch_cap=64, interval=10_000,
                 retry_rounds=64):
        self.id = rid
        self.members = tuple(members)
        self.n = len(self.members)
        self.q = self.n // 2 + 1
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.batch_cap = batch_cap
        self.tick_interval = interval
        self.retry = retry_rounds * interval
        self.log = {}
        self.decided = set()
        self.last_commit = 0
        self.cmds = []
        self.dedup = {}
        self.origin = set()
        self.executed = 0
        self.replies = []
        self.out = []
        self.gap_wait = 8 * interval
        self._stuck = (0, 0)

    def expected_peers(self):
        return set(self.members) - {self.id}

    def take_replies(self):
        out, self.replies = self.replies, []
        return out

    def switch_mode(self, target, now):
        if target != RESPONSIVE:
            raise ValueError("baselines run in responsive mode only")

    def _emit(self, now, kind, **data):
        if self.trace.enabled:
            self.trace.emit(now, kind, self.id, **data)

    def _admit(self, rid, op, now) -> bool:
        rid = tuple(rid)
        if rid in self.dedup:
            self.replies.append(ClientEvent("reply", rid, self.dedup[rid]))
            return False
        if rid in self.origin:
            return False
        self.origin.add(rid)
        self._emit(now, "request", rid=f"{rid[0]}.{rid[1]}")
        return True

    def _take_batch(self):
        batch, self.cmds = tuple(self.cmds[: self.batch_cap]), self.cmds[self.batch_cap:]
        return batch

    def _store(self, slot, cmd, now, src):
        cur = self.log.get(slot)
        if cur is not None:
            if cur != cmd:
                self._emit(now, "violation", what="conflict", slot=slot, cur=cur.cid, new=cmd.cid)
            return False
        self.log[slot] = cmd
        self._emit(now, "append", slot=slot, cid=cmd.cid, view=cmd.view, src=src)
        return True

    def _noop(self, owner):
        return noop(owner, 0)

    def _advance(self, now):
        """Commit and execute decided slots in order."""
        s = self.last_commit + 1
        while s in self.decided and s in self.log:
            cmd = self.log[s]
            self._emit(now, "commit", slot=s, cid=cmd.cid, view=cmd.view, rv=0)
            if cmd.kind == OP:
                done = []
                for c, q, _ in cmd.batch:
                    rid = (c, q)
                    if rid in self.dedup:
                        continue
                    self.executed += 1
                    self.dedup[rid] = self.executed
                    done.append(f"{c}.{q}")
                    if rid in self.origin:
                        self.origin.discard(rid)
                        self.replies.append(ClientEvent("reply", rid, self.executed))
                self._emit(now, "execute", slot=s, reqs=done)
            self.last_commit = s
            s += 1

    def _blocked(self, now) -> bool:
        """True once the commit point has not moved for ``gap_wait``."""
        at, since = self._stuck
        if at != self.last_commit:
            self._stuck = (self.last_commit, now)
            return False
        if now - since >= self.gap_wait:
            self._stuck = (self.last_commit, now)
            return True
        return False

    def _send(self, **kw):
        self.out.append(BaselineMessage(self.id, **kw))

    def flush(self, now, force=False):
        out, self.out = self.out, []
        return out
