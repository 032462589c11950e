"""The Chora replica: pulsing and responsive operation, recovery, view change.

A ``Replica`` is driven by injected events (``pulse``, ``receive``, ``tick``,
``on_client_request``) with the current simulated time passed in; it owns no
timers or threads. State is mutated in place for speed; handlers return the
messages to send.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from .core import (
    NOOP, OP, VIEW_INIT, AssignmentScheme, ChoraError, Command, Log, SafetyViolation,
    compute_commit, log_up_to_date, noop, quorum_size,
)
from .metrics import UndefinedCoefficient, s_chora
from .trace import Trace

PULSING = "pulsing"
RESPONSIVE = "responsive"

INITIATOR = "initiator"
CANDIDATE = "candidate"
FOLLOWER = "follower"

MUTATIONS = frozenset({"skip_quorum", "ack_gaps", "commit_q_minus_1", "vote_twice", "stale_recover"})


class RoundBudgetError(ChoraError):
    pass


@dataclass(frozen=True)
class ViewChangeRequest:
    new_view: int
    last_append_slot: int
    last_append_view: int


@dataclass(frozen=True)
class ViewChangeVote:
    new_view: int
    voted_for: int


@dataclass(slots=True)
class RoundMessage:
    sender: int
    view: int
    ack_slot: int
    latest_propose_slot: int
    proposal: tuple | None = None
    nacks: tuple = ()
    recovers: tuple = ()
    noop_slot: int | None = None
    skip: tuple | None = None
    vc: object = None
    dest: int | None = None
    mid: int = -1
    round: int = -1
    protocol: bool = True

    def tag(self) -> str:
        parts = []
        if self.proposal is not None:
            parts.append("V" if self.proposal[1].kind == VIEW_INIT else "P")
        if self.recovers:
            parts.append("R")
        if self.noop_slot is not None:
            parts.append("O")
        if self.skip is not None:
            parts.append("S")
        if self.nacks:
            parts.append("N")
        if self.vc is not None:
            parts.append("Q" if isinstance(self.vc, ViewChangeRequest) else "W")
        return "".join(parts) or "A"


@dataclass(frozen=True)
class ClientEvent:
    kind: str
    req_id: tuple
    value: object = None


@dataclass
class ReplicaConfig:
    replicas: tuple
    interval: int = 10_000            # round length (pulsing) or tick interval (responsive)
    batch_cap: int = 64
    noop_on_empty: bool = True
    proposer_accountable: bool = True
    skip: bool = True
    skip_slack_rounds: int = 1
    coord_rounds: int = 8
    gap_rounds: int = 3
    suspect_rounds: int = 10
    backoff: tuple = (5, 15)
    candidacy_jitter: int = 5
    stall_rounds: int = 40
    max_nacks: int = 64
    max_recovers: int = 64
    proposer_count: int | None = None
    auto_mode: bool = False
    theta_down: float = 0.5
    theta_up: float = 0.2
    mode_window: int = 64
    mutations: frozenset = frozenset()
    strict: bool = False

    def __post_init__(self):
        self.replicas = tuple(self.replicas)
        if not self.replicas:
            raise ValueError("need at least one replica")
        bad = set(self.mutations) - MUTATIONS
        if bad:
            raise ValueError(f"unknown mutations {sorted(bad)}")
        if self.proposer_count is not None and not 1 <= self.proposer_count <= len(self.replicas):
            raise ValueError("proposer count outside 1..N")


class ModePolicy:
    """Automatic pulsing/responsive switching.

    Pulsing drops to responsive when more than ``theta_down`` of the last
    ``window`` rounds missed at least one expected peer. Responsive goes back
    to pulsing once the chora synchrony coefficient over the last ``window``
    deliveries exceeds ``theta_up``.
    """

    def __init__(self, theta_down=0.5, theta_up=0.2, window=64):
        self.theta_down = theta_down
        self.theta_up = theta_up
        self.window = window
        self.rounds = deque(maxlen=window)
        self.prop = deque(maxlen=window)
        self.proc = deque(maxlen=window)

    def observe_round(self, missed: bool):
        self.rounds.append(missed)

    def observe_delay(self, prop: int, proc: int):
        self.prop.append(prop)
        self.proc.append(proc)

    def decide(self, mode: str) -> str:
        if mode == PULSING:
            if len(self.rounds) == self.window and sum(self.rounds) / self.window > self.theta_down:
                return RESPONSIVE
        elif len(self.prop) == self.window:
            try:
                s = s_chora(list(self.prop), list(self.proc), 90)
            except UndefinedCoefficient:
                return mode
            if s > self.theta_up:
                return PULSING
        return mode

    def reset(self):
        self.rounds.clear()
        self.prop.clear()
        self.proc.clear()


class Replica:
    def __init__(self, rid: int, cfg: ReplicaConfig, rng: random.Random | None = None,
                 trace: Trace | None = None, mode: str = PULSING):
        self.id = rid
        self.cfg = cfg
        self.members = cfg.replicas
        if rid not in self.members:
            raise ValueError(f"replica {rid} not in membership")
        self.n = len(self.members)
        self.q = quorum_size(self.n)
        self.rng = rng if rng is not None else random.Random(rid)
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.mut = frozenset(cfg.mutations)

        self.log = Log()
        self.cmds = deque()
        self.view = 0
        k = cfg.proposer_count or self.n
        self.scheme = AssignmentScheme(tuple(self.members[:k]), 1)
        self.excluded = ()
        self.pending_scheme = None
        self.role = INITIATOR if rid == self.members[0] else FOLLOWER
        self.voted_for = self.members[0]
        self.voted_by = set()
        self.view_base = 0
        self.vi_committed = True
        self.next_propose = self.scheme.first_owned(rid, 1)
        self.last_ack = 0
        self.last_commit = 0
        self.acked = {m: 0 for m in self.members}
        self.mode = mode
        self.latest_propose_slot = 0
        self.dedup = {}
        self.origin = set()
        self.own_slots = deque()
        self.executed = 0
        self.suspect_lo, self.suspect_hi = 1, 0
        self.held_vi = None
        self.early = {}

        # deferred output
        self.pending_nacks = set()
        self.pending_recovers = {}
        self.pending_props = deque()
        self.pending_vc = deque()
        self.ack_dirty = False
        self.replies = []
        self.pulsed_round = None

        # timers, all absolute times or None
        self.coord_deadline = self._coord_timeout()
        self.last_heard = {m: 0 for m in self.members if m != rid}
        self.suspects = set()
        self.candidacy_at = None
        self.cand_deadline = None
        self.stall_deadline = None
        self.max_seen_view = 0
        self.nacked_until = 0
        self._stuck = (0, 0)

        self.policy = ModePolicy(cfg.theta_down, cfg.theta_up, cfg.mode_window) if cfg.auto_mode else None
        self.violations = []

    # -- small helpers ------------------------------------------------------

    @property
    def tick_interval(self) -> int:
        return self.cfg.interval

    @property
    def round_scale(self) -> float:
        if self.n <= 1:
            return 1.0
        live = self.n - len(self.excluded)
        return max(live - 1, 1) / (self.n - 1)

    def _coord_timeout(self) -> int:
        return self.cfg.coord_rounds * self.cfg.interval

    def expected_peers(self) -> set:
        return {m for m in self.members
                if m != self.id and m not in self.excluded and m not in self.suspects}

    def take_replies(self) -> list:
        out, self.replies = self.replies, []
        return out

    def _emit(self, now, kind, **data):
        if self.trace.enabled:
            self.trace.emit(now, kind, self.id, **data)

    def _violation(self, now, what, slot, cur, new):
        msg = f"{what} at slot {slot}: {cur.cid if cur else None} vs {new.cid}"
        self.violations.append(msg)
        self._emit(now, "violation", what=what, slot=slot,
                   cur=cur.cid if cur else "-", new=new.cid)
        if self.cfg.strict:
            raise SafetyViolation(msg)

    def _is_suspect(self, slot) -> bool:
        return self.suspect_lo <= slot <= self.suspect_hi

    def _msg(self, **kw) -> RoundMessage:
        return RoundMessage(self.id, self.view, self.last_ack, self.latest_propose_slot, **kw)

    def _see_slot(self, slot):
        if slot > self.latest_propose_slot:
            self.latest_propose_slot = slot

    # -- log manipulation ---------------------------------------------------

    def _drop_slot(self, slot, now):
        cmd = self.log.remove(slot)
        if cmd is not None:
            self._emit(now, "truncate", slot=slot, cid=cmd.cid)
            self._requeue(cmd)
        return cmd

    def _requeue(self, cmd):
        if cmd.kind == OP and cmd.proposer == self.id:
            for c, s, op in reversed(cmd.batch):
                if (c, s) in self.origin and (c, s) not in self.dedup:
                    self.cmds.appendleft((c, s, op))

    def _place(self, slot, cmd, now, src) -> bool:
        """Store a command, replacing an older-view entry; True if the log changed."""
        if slot <= self.last_commit:
            cur = self.log.get(slot)
            if cur is not None and cur != cmd and cur.view <= cmd.view:
                self._violation(now, "overwrite-committed", slot, cur, cmd)
            return False
        cur = self.log.get(slot)
        if cur is not None:
            if cur == cmd:
                return False
            if cur.view == cmd.view:
                self._violation(now, "conflict", slot, cur, cmd)
                return False
            if cur.view > cmd.view:
                return False
            self._drop_slot(slot, now)
        if cmd.view == self.view and cmd.kind != VIEW_INIT and not self._vi_in_log():
            # a view's commands follow its view-init in every log
            self.early[slot] = (cmd, src)
            self._see_slot(slot)
            return False
        self.log.append(slot, cmd)
        self._emit(now, "append", slot=slot, cid=cmd.cid, view=cmd.view, src=src)
        self._see_slot(slot)
        if cmd.kind == VIEW_INIT and self.early and self._vi_in_log():
            early, self.early = self.early, {}
            for s, (c, how) in sorted(early.items()):
                if c.view == self.view and s > slot:
                    self._place(s, c, now, how)
        return True

    def _vi_in_log(self) -> bool:
        if self.view == 0:
            return True
        cur = self.log.get(self.view_base) if self.view_base is not None else None
        return cur is not None and cur.kind == VIEW_INIT and cur.view == self.view

    # -- proposing ----------------------------------------------------------

    def _advance_next(self):
        self.next_propose = self.scheme.first_owned(self.id, self.next_propose + 1)

    def _propose_own(self, cmd, now, src="propose"):
        slot = self.next_propose
        self._place(slot, cmd, now, src)
        self.own_slots.append(slot)
        self._advance_next()
        return slot, cmd

    def _take_batch(self):
        batch = []
        cap = self.cfg.batch_cap
        cmds = self.cmds
        while cmds and len(batch) < cap:
            c, s, op = cmds.popleft()
            if (c, s) in self.dedup:
                continue
            batch.append((c, s, op))
        return tuple(batch)

    def _propose_next(self, now, allow_noop=True):
        if self.next_propose is None:
            return None
        batch = self._take_batch()
        if batch:
            return self._propose_own(Command(OP, self.id, self.view, batch), now)
        if allow_noop and self.cfg.noop_on_empty:
            return self._propose_own(noop(self.id, self.view), now, "noop")
        return None

    def maybe_skip(self, now=0):
        """Fill own slots up to latest-propose-slot with no-ops when lagging."""
        if not self.cfg.skip or self.next_propose is None or not self.vi_committed:
            return None
        slack = max(1, len(self.scheme.proposers) * self.cfg.skip_slack_rounds)
        if self.latest_propose_slot - self.next_propose < slack:
            return None
        start, until = self.next_propose, self.latest_propose_slot
        for s in self.scheme.owned_between(self.id, start, until):
            self._place(s, noop(self.id, self.view), now, "skip")
            self.own_slots.append(s)
        self.next_propose = self.scheme.first_owned(self.id, until + 1)
        return (start, until)

    def _take_nacks(self):
        if not self.pending_nacks:
            return ()
        out = tuple(sorted(self.pending_nacks)[: self.cfg.max_nacks])
        self.pending_nacks.difference_update(out)
        return out

    def _take_recovers(self):
        if not self.pending_recovers:
            return ()
        keys = sorted(self.pending_recovers)[: self.cfg.max_recovers]
        return tuple((s, self.pending_recovers.pop(s)) for s in keys)

    def _vc_for_send(self):
        while self.pending_vc:
            vc = self.pending_vc.popleft()
            if vc.new_view == self.view:
                return vc
        return None

    # -- emission -----------------------------------------------------------

    def pulse(self, round_no: int, now: int = 0) -> RoundMessage:
        """Build the single multicast of this pulsing round."""
        if self.pulsed_round == round_no:
            raise RoundBudgetError(f"replica {self.id} already pulsed in round {round_no}")
        self.pulsed_round = round_no
        skip = self.maybe_skip(now)
        proposal = noop_slot = None
        recovers = ()
        if self.pending_recovers:
            recovers = self._take_recovers()
            if self.next_propose is not None:
                noop_slot, _ = self._propose_own(noop(self.id, self.view), now, "noop")
        elif self.pending_props:
            proposal = self.pending_props.popleft()
        else:
            proposal = self._propose_next(now)
        self._refresh(now)
        msg = self._msg(proposal=proposal, nacks=self._take_nacks(), recovers=recovers,
                        noop_slot=noop_slot, skip=skip, vc=self._vc_for_send())
        self.ack_dirty = False
        return msg

    def flush(self, now: int = 0, force: bool = False) -> list:
        """Responsive mode: everything owed right now, one proposal per message."""
        skip = self.maybe_skip(now)
        if self.next_propose is not None:
            while self.cmds:
                if self._propose_next(now, allow_noop=False) is None:
                    break
                self.pending_props.append((self.own_slots[-1], self.log.get(self.own_slots[-1])))
        self._refresh(now)
        out = [self._msg(proposal=p) for p in self.pending_props]
        self.pending_props.clear()
        while self.pending_recovers:
            out.append(self._msg(recovers=self._take_recovers()))
        nacks = self._take_nacks()
        vc = self._vc_for_send()
        if out:
            first = out[0]
            first.nacks, first.skip, first.vc = nacks, skip, vc
        elif nacks or skip or vc is not None or self.ack_dirty or force:
            out.append(self._msg(nacks=nacks, skip=skip, vc=vc))
        vc = self._vc_for_send()
        while vc is not None:
            out.append(self._msg(vc=vc))
            vc = self._vc_for_send()
        self.ack_dirty = False
        return out

    def _out(self, now):
        return self.flush(now) if self.mode == RESPONSIVE else []

    # -- clients ------------------------------------------------------------

    def on_client_request(self, req_id, op, now: int = 0, flush: bool = False) -> list:
        req_id = tuple(req_id)
        if req_id in self.dedup:
            self.replies.append(ClientEvent("reply", req_id, self.dedup[req_id]))
            return []
        if req_id in self.origin:
            return []
        self.origin.add(req_id)
        self.cmds.append((req_id[0], req_id[1], op))
        self._emit(now, "request", rid=f"{req_id[0]}.{req_id[1]}")
        return self._out(now) if flush else []

    # -- receiving ----------------------------------------------------------

    def receive(self, msg, now: int):
        self.on_message(msg, now, flush=False)

    def on_message(self, msg: RoundMessage, now: int = 0, flush: bool = True) -> list:
        sender = msg.sender
        if sender in self.last_heard:
            self.last_heard[sender] = now
            self.suspects.discard(sender)
        if msg.vc is not None:
            if isinstance(msg.vc, ViewChangeRequest):
                self._on_vc_request(msg.vc, sender, now)
            else:
                self._on_vc_vote(msg.vc, sender, now)
        if msg.view > self.max_seen_view:
            self.max_seen_view = msg.view
        carries = msg.proposal is not None or msg.noop_slot is not None or msg.skip is not None
        if msg.view < self.view:
            return self._out(now) if flush else []
        if msg.view > self.view:
            if not carries:
                return self._out(now) if flush else []
            self._adopt(msg.view, sender, now)
        elif self.role == CANDIDATE and carries and sender != self.id:
            self._adopt(msg.view, sender, now)

        if msg.latest_propose_slot > self.latest_propose_slot:
            self.latest_propose_slot = msg.latest_propose_slot
        if msg.ack_slot > self.acked.get(sender, 0):
            self.acked[sender] = msg.ack_slot
        if msg.proposal is not None:
            slot, cmd = msg.proposal
            if cmd.kind == VIEW_INIT:
                self._install_view_init(slot, cmd, now)
            else:
                self._deliver(slot, cmd, now, "deliver")
        if msg.noop_slot is not None:
            self._deliver(msg.noop_slot, noop(sender, msg.view), now, "noop")
        if msg.skip is not None:
            self._on_skip(sender, msg.view, msg.skip, now)
        for slot, cmd in msg.recovers:
            self._on_recover(slot, cmd, now)
        if msg.nacks:
            self._on_nacks(msg.nacks, now)
        self._refresh(now)
        return self._out(now) if flush else []

    def _deliver(self, slot, cmd, now, src):
        if self._is_suspect(slot):
            cur = self.log.get(slot)
            if cur is not None and cur.view < cmd.view:
                self._clear_suspects_from(slot, now)
        self._place(slot, cmd, now, src)

    def _on_skip(self, sender, view, skip, now):
        scheme = self.scheme if self.vi_committed else self.pending_scheme
        if scheme is None:
            return
        start, until = skip
        for s in scheme.owned_between(sender, max(start, scheme.base), until):
            self._deliver(s, noop(sender, view), now, "skip")
        self._see_slot(until)

    def _clear_suspects_from(self, slot, now):
        for s in range(slot, self.suspect_hi + 1):
            self._drop_slot(s, now)
        self.suspect_hi = slot - 1

    def _on_recover(self, slot, cmd, now):
        if slot <= self.last_ack:
            return
        if self._is_suspect(slot):
            cur = self.log.get(slot)
            if cur is not None and cur.view == cmd.view:
                if cur != cmd:
                    self._violation(now, "conflict", slot, cur, cmd)
                    return
                self.suspect_lo = slot + 1
                return
            self._clear_suspects_from(slot, now)
        if cmd.kind == VIEW_INIT and cmd.view == self.view:
            self._install_view_init(slot, cmd, now)
        else:
            self._place(slot, cmd, now, "recover")

    def _on_nacks(self, slots, now):
        all_resp = not self.cfg.proposer_accountable or not self.vi_committed
        for s in slots:
            cmd = self.log.get(s)
            if cmd is None:
                if (self.mode == RESPONSIVE and self.next_propose is not None
                        and s >= self.next_propose and self.scheme.owner(s) == self.id
                        and self.vi_committed):
                    while self.next_propose is not None and self.next_propose <= s:
                        self.pending_props.append(
                            self._propose_own(noop(self.id, self.view), now, "noop"))
                continue
            if cmd.view == self.view:
                if cmd.proposer == self.id or all_resp:
                    self.pending_recovers[s] = cmd
            else:
                limit = self.log.max_slot() if "stale_recover" in self.mut else self.last_ack
                if s <= limit:
                    self.pending_recovers[s] = cmd

    # -- ack / commit -------------------------------------------------------

    def _refresh(self, now):
        if self.held_vi is not None and self.suspect_lo > self.suspect_hi:
            cmd, self.held_vi = self.held_vi, None
            self._place(self.view_base, cmd, now, "viewinit")
        frontier = self.log.last_append
        if self.suspect_lo <= self.suspect_hi:
            frontier = min(frontier, self.suspect_lo - 1)
        if "ack_gaps" in self.mut:
            frontier = max(frontier, self.log.max_slot())
        if frontier > self.last_ack:
            self.last_ack = frontier
            self.ack_dirty = True
            self._emit(now, "ack-advance", slot=frontier)
        self.acked[self.id] = self.last_ack
        if self.role == CANDIDATE or self.view_base is None:
            return
        if "skip_quorum" in self.mut:
            c = self.last_ack
        else:
            q = self.q - 1 if "commit_q_minus_1" in self.mut and self.q > 1 else self.q
            c = min(compute_commit(self.acked, q), self.last_ack)
        if not self.vi_committed and c < self.view_base:
            return
        if c > self.last_commit:
            self._commit_to(c, now)
        if not self.vi_committed and self.last_ack < self.view_base:
            self._catchup_nacks()

    def _commit_to(self, c, now):
        activate = None
        own = False
        for s in range(self.last_commit + 1, c + 1):
            cmd = self.log.get(s)
            if cmd is None:
                continue
            self._emit(now, "commit", slot=s, cid=cmd.cid, view=cmd.view, rv=self.view)
            if cmd.kind == OP:
                self._execute(s, cmd, now)
            elif cmd.kind == VIEW_INIT and cmd.view == self.view and s == self.view_base:
                activate = cmd
            if cmd.proposer == self.id and cmd.view == self.view:
                own = True
        self.last_commit = c
        if self.suspect_lo <= c:
            self.suspect_lo = c + 1
        while self.own_slots and self.own_slots[0] <= c:
            self.own_slots.popleft()
        if activate is not None:
            self._activate(activate, now)
        elif own or not self.own_slots:
            if self.coord_deadline is not None:
                self.coord_deadline = now + self._coord_timeout()

    def _execute(self, slot, cmd, now):
        done = []
        for c, s, _ in cmd.batch:
            rid = (c, s)
            if rid in self.dedup:
                continue
            self.executed += 1
            self.dedup[rid] = self.executed
            done.append(f"{c}.{s}")
            if rid in self.origin:
                self.origin.discard(rid)
                self.replies.append(ClientEvent("reply", rid, self.executed))
        self._emit(now, "execute", slot=slot, reqs=done)

    def _activate(self, vi, now):
        self.vi_committed = True
        self.scheme = vi.scheme
        self.excluded = tuple(vi.excluded)
        self.pending_scheme = None
        self.next_propose = self.scheme.first_owned(self.id, self.scheme.base)
        self.coord_deadline = now + self._coord_timeout()
        self.stall_deadline = None
        self._see_slot(self.view_base)
        self._emit(now, "view-adopt", view=self.view, role=self.role, phase="active",
                   base=self.view_base, scheme=self.scheme.token())

    # -- view change --------------------------------------------------------

    def _reset_for_view(self, new_view, now):
        self.view = new_view
        if new_view > self.max_seen_view:
            self.max_seen_view = new_view
        for s, cmd in self.log.truncate_above(self.log.last_append):
            self._emit(now, "truncate", slot=s, cid=cmd.cid)
            self._requeue(cmd)
        for _, cmd in self.pending_props:
            self._requeue(cmd)
        self.next_propose = None
        self.pending_props.clear()
        self.pending_recovers.clear()
        self.pending_nacks.clear()
        self.pending_vc.clear()
        self.own_slots.clear()
        for m in self.acked:
            self.acked[m] = 0
        self.last_ack = self.last_commit
        self.acked[self.id] = self.last_ack
        self.suspect_lo, self.suspect_hi = self.last_commit + 1, self.log.last_append
        self.vi_committed = False
        self.view_base = None
        self.held_vi = None
        self.early = {}
        self.pending_scheme = None
        self.voted_by = set()
        self.coord_deadline = None
        self.candidacy_at = None
        self.cand_deadline = None
        self.latest_propose_slot = self.log.last_append
        self.nacked_until = 0
        self.stall_deadline = now + self.cfg.stall_rounds * self.cfg.interval

    def _adopt(self, view, leader, now):
        self._reset_for_view(view, now)
        self.role = FOLLOWER
        self.voted_for = leader
        self._emit(now, "view-adopt", view=view, role=FOLLOWER, leader=leader, phase="adopt")

    def start_view_change(self, suspected=None, now: int = 0) -> list:
        self._start_view_change(suspected, now)
        return self._out(now)

    def _start_view_change(self, suspected, now):
        new_view = max(self.view, self.max_seen_view) + 1
        self._reset_for_view(new_view, now)
        self.role = CANDIDATE
        self.voted_for = self.id
        self.voted_by = {self.id}
        la = self.log.last_append
        self.pending_vc.append(ViewChangeRequest(new_view, la, self.log.view_at(la)))
        lo, hi = self.cfg.backoff
        self.cand_deadline = now + int(self.rng.uniform(lo, hi) * self.cfg.interval)
        self._emit(now, "view-adopt", view=new_view, role=CANDIDATE, leader=self.id,
                   phase="candidate", suspected=-1 if suspected is None else suspected)
        self._check_votes(now)

    def on_view_change_request(self, req: ViewChangeRequest, sender: int, now: int = 0) -> list:
        self._on_vc_request(req, sender, now)
        return self._out(now)

    def _on_vc_request(self, req, sender, now):
        if req.new_view > self.max_seen_view:
            self.max_seen_view = req.new_view
        if req.new_view < self.view:
            return
        if req.new_view == self.view:
            if not ("vote_twice" in self.mut and self.role == FOLLOWER and self.voted_for != sender):
                return
        la = self.log.last_append
        mine = (self.log.view_at(la), la)
        if not log_up_to_date((req.last_append_view, req.last_append_slot), mine):
            self._start_view_change(None, now)
            return
        if req.new_view > self.view:
            self._reset_for_view(req.new_view, now)
        self.role = FOLLOWER
        self.voted_for = sender
        self.pending_vc.append(ViewChangeVote(req.new_view, sender))
        self._emit(now, "view-adopt", view=req.new_view, role=FOLLOWER, leader=sender, phase="vote")

    def on_view_change_vote(self, vote: ViewChangeVote, sender: int, now: int = 0) -> list:
        self._on_vc_vote(vote, sender, now)
        return self._out(now)

    def _on_vc_vote(self, vote, sender, now):
        if self.role != CANDIDATE or vote.new_view != self.view or vote.voted_for != self.id:
            return
        self.voted_by.add(sender)
        self._check_votes(now)

    def _check_votes(self, now):
        if self.role == CANDIDATE and len(self.voted_by) >= self.q:
            self._become_initiator(now)

    def _become_initiator(self, now):
        self.role = INITIATOR
        self.cand_deadline = None
        base = self.log.last_append + 1
        self.view_base = base
        horizon = self.cfg.suspect_rounds * self.cfg.interval
        live = [m for m in self.members
                if m == self.id or m in self.voted_by
                or (m not in self.suspects and now - self.last_heard[m] <= horizon)]
        k = self.cfg.proposer_count or len(live)
        scheme = AssignmentScheme(tuple(live[:k]), base + 1)
        excluded = tuple(m for m in self.members if m not in live)
        vi = Command(VIEW_INIT, self.id, self.view, scheme=scheme, excluded=excluded)
        self.suspect_lo, self.suspect_hi = 1, 0
        self._place(base, vi, now, "viewinit")
        self.pending_scheme = scheme
        self.own_slots.append(base)
        self.pending_props.append((base, vi))
        self.coord_deadline = now + self._coord_timeout()
        la = self.log.last_append
        self._emit(now, "elect", view=self.view, base=base, scheme=scheme.token(), la=la)
        self._emit(now, "view-adopt", view=self.view, role=INITIATOR, leader=self.id, phase="elected")
        self._refresh(now)

    def _install_view_init(self, slot, cmd, now):
        if self.role == INITIATOR:
            if self.log.get(slot) != cmd:
                self._violation(now, "conflict", slot, self.log.get(slot), cmd)
            return
        if self.view_base == slot and cmd in (self.log.get(slot), self.held_vi):
            return
        if self.view_base is not None and self.view_base != slot:
            cur = self.log.get(self.view_base) or self.held_vi
            if cur is not None:
                self._violation(now, "conflict", slot, cur, cmd)
            return
        self.view_base = slot
        for s in sorted(k for k, c in self.log.slots.items() if k >= slot and c.view < self.view):
            self._drop_slot(s, now)
        if self.suspect_hi >= slot:
            self.suspect_hi = slot - 1
        self.pending_scheme = cmd.scheme
        if self.suspect_lo <= self.suspect_hi:
            # append only once everything below is verified against the initiator's log
            self.held_vi = cmd
        else:
            self._place(slot, cmd, now, "viewinit")
        self.nacked_until = self.last_ack
        self._catchup_nacks()

    def _catchup_nacks(self):
        """Ask for every unverified slot below the view-init, a bounded chunk at a time."""
        if self.view_base is None:
            return
        lo = max(self.last_ack, self.nacked_until) + 1
        hi = min(self.view_base - 1, self.last_ack + self.cfg.max_nacks)
        for s in range(lo, hi + 1):
            if self.log.get(s) is None or self._is_suspect(s):
                self.pending_nacks.add(s)
        if hi >= lo:
            self.nacked_until = hi

    # -- timers -------------------------------------------------------------

    def tick(self, now: int) -> list:
        """Run expired timers; called at each round start or heartbeat tick."""
        if self.coord_deadline is not None and now >= self.coord_deadline:
            self._coordination(now)
        self._gap_check(now)
        self._detect(now)
        if self.role == CANDIDATE:
            if self.cand_deadline is not None and now >= self.cand_deadline:
                self._start_view_change(None, now)
        elif self.candidacy_at is not None and now >= self.candidacy_at:
            self.candidacy_at = None
            if self.suspects & (set(self.members) - set(self.excluded)):
                self._start_view_change(min(self.suspects), now)
        elif (not self.vi_committed and self.stall_deadline is not None
              and now >= self.stall_deadline):
            self._start_view_change(None, now)
        if self.policy is not None:
            target = self.policy.decide(self.mode)
            if target != self.mode:
                self._set_mode(target, now)
                self.policy.reset()
        return []

    def observe_round(self, missed: bool):
        if self.policy is not None:
            self.policy.observe_round(missed)

    def observe_delay(self, prop: int, proc: int):
        if self.policy is not None:
            self.policy.observe_delay(prop, proc)

    def on_coordination_timeout(self, now: int = 0) -> list:
        self._coordination(now)
        return self._out(now)

    def _coordination(self, now):
        self.coord_deadline = now + self._coord_timeout()
        while self.own_slots and self.own_slots[0] <= self.last_commit:
            self.own_slots.popleft()
        if self.own_slots:
            s = self.own_slots[0]
        else:
            s = max(self.latest_propose_slot, self.log.max_slot())
            if s <= self.last_ack:
                return
        if self.last_ack < s:
            for slot in range(self.last_ack + 1, min(s, self.last_ack + self.cfg.max_nacks) + 1):
                if self.log.get(slot) is None or self._is_suspect(slot):
                    self.pending_nacks.add(slot)
            if not self.vi_committed:
                self.nacked_until = self.last_ack
                self._catchup_nacks()
        else:
            cmd = self.log.get(s)
            if cmd is not None and all(p[0] != s for p in self.pending_props):
                self.pending_props.append((s, cmd))

    def _gap_check(self, now):
        """Nack holes that have blocked last-ack for a few intervals."""
        if self.log.max_slot() <= self.last_ack:
            self._stuck = (self.last_ack, now)
            return
        ack, since = self._stuck
        if ack != self.last_ack:
            self._stuck = (self.last_ack, now)
            return
        if now - since >= self.cfg.gap_rounds * self.cfg.interval:
            top = min(self.log.max_slot(), self.last_ack + self.cfg.max_nacks)
            for slot in range(self.last_ack + 1, top + 1):
                if self.log.get(slot) is None:
                    self.pending_nacks.add(slot)
            self._stuck = (self.last_ack, now)

    def _detect(self, now):
        horizon = self.cfg.suspect_rounds * self.cfg.interval
        active = set(self.members) - set(self.excluded)
        fresh = False
        for p, t in self.last_heard.items():
            if p in active and p not in self.suspects and now - t > horizon:
                self.suspects.add(p)
                fresh = True
        if fresh and self.role != CANDIDATE and self.candidacy_at is None:
            jitter = self.rng.uniform(0, self.cfg.candidacy_jitter) * self.cfg.interval
            self.candidacy_at = now + int(jitter)

    # -- modes --------------------------------------------------------------

    def switch_mode(self, target: str, now: int = 0) -> list:
        if target not in (PULSING, RESPONSIVE):
            raise ValueError(f"unknown mode {target!r}")
        if target == self.mode:
            return []
        self._set_mode(target, now)
        return self.flush(now) if target == RESPONSIVE else []

    def _set_mode(self, target, now):
        self.mode = target
        self._emit(now, "mode-switch", mode=target)

    # -- inspection ---------------------------------------------------------

    def check_invariants(self):
        if not self.last_commit <= self.last_ack:
            raise AssertionError(f"r{self.id}: last_commit {self.last_commit} > last_ack {self.last_ack}")
        if "ack_gaps" not in self.mut and not self.last_ack <= self.log.last_append:
            raise AssertionError(f"r{self.id}: last_ack {self.last_ack} > last_append {self.log.last_append}")
        if self.next_propose is not None:
            if self.scheme.owner(self.next_propose) != self.id:
                raise AssertionError(f"r{self.id}: next_propose {self.next_propose} not owned")

    def snapshot(self) -> dict:
        """Gap-free prefix of the log as slot -> (cid, view)."""
        la = self.log.last_append
        return {s: (c.cid, c.view) for s, c in self.log.items() if s <= la}
