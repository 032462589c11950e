"""Deterministic discrete-event network with lock-step round scheduling.

Time is integer nanoseconds. Every source of randomness is a separate
``random.Random`` stream keyed by (seed, purpose...), so adding a consumer
never perturbs the draws of another.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .core import ChoraError
from .trace import Trace

PULSING = "pulsing"
RESPONSIVE = "responsive"


class DeterminismError(ChoraError):
    pass


class RegistrationError(ChoraError):
    pass


# -- distributions ---------------------------------------------------------

class Distribution:
    kind = "?"

    def sample(self, rng: random.Random) -> int:
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(Distribution):
    value: int
    kind = "constant"

    def sample(self, rng):
        return self.value

    @property
    def mean(self):
        return float(self.value)

    def __str__(self):
        return f"constant {self.value}"


@dataclass(frozen=True)
class Uniform(Distribution):
    lo: int
    hi: int
    kind = "uniform"

    def __post_init__(self):
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"bad uniform range [{self.lo}, {self.hi}]")

    def sample(self, rng):
        return int(round(self.lo + (self.hi - self.lo) * rng.random()))

    @property
    def mean(self):
        return (self.lo + self.hi) / 2.0

    def __str__(self):
        return f"uniform {self.lo} {self.hi}"


@dataclass(frozen=True)
class LogNormal(Distribution):
    mu: float
    sigma: float
    shift: int = 0
    kind = "lognormal"

    def sample(self, rng):
        return self.shift + int(round(rng.lognormvariate(self.mu, self.sigma)))

    @property
    def mean(self):
        return self.shift + math.exp(self.mu + self.sigma ** 2 / 2)

    def __str__(self):
        return f"lognormal {self.mu} {self.sigma} {self.shift}"


@dataclass(frozen=True)
class Empirical(Distribution):
    samples: tuple
    kind = "empirical"

    def __post_init__(self):
        if not self.samples or min(self.samples) < 0:
            raise ValueError("empirical distribution needs non-negative samples")

    def sample(self, rng):
        return self.samples[rng.randrange(len(self.samples))]

    @property
    def mean(self):
        return math.fsum(self.samples) / len(self.samples)

    def __str__(self):
        return "empirical " + " ".join(str(s) for s in self.samples)


def parse_distribution(text: str) -> Distribution:
    """Parse ``constant 5``, ``uniform 2000 6000``, ``lognormal mu sigma [shift]``,
    ``empirical a b c ...``."""
    parts = text.split()
    if not parts:
        raise ValueError("empty distribution")
    name, args = parts[0], parts[1:]
    try:
        if name == "constant" and len(args) == 1:
            return Constant(int(args[0]))
        if name == "uniform" and len(args) == 2:
            return Uniform(int(args[0]), int(args[1]))
        if name == "lognormal" and len(args) in (2, 3):
            shift = int(args[2]) if len(args) == 3 else 0
            return LogNormal(float(args[0]), float(args[1]), shift)
        if name == "empirical" and args:
            return Empirical(tuple(int(a) for a in args))
    except ValueError as exc:
        raise ValueError(f"bad distribution {text!r}: {exc}") from None
    raise ValueError(f"bad distribution {text!r}")


@dataclass
class Partition:
    side_a: frozenset
    side_b: frozenset
    until: int

    def cuts(self, a, b, now) -> bool:
        if now >= self.until:
            return False
        return (a in self.side_a and b in self.side_b) or (a in self.side_b and b in self.side_a)


@dataclass
class DelayModel:
    prop: Distribution = field(default_factory=lambda: Constant(1000))
    proc: Distribution = field(default_factory=lambda: Constant(200))
    drop_rate: float = 0.0
    partitions: list = field(default_factory=list)
    links: dict = field(default_factory=dict)  # (src, dst) -> Distribution for d_prop

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop rate {self.drop_rate} outside [0, 1]")

    def prop_for(self, src, dst) -> Distribution:
        return self.links.get((src, dst), self.prop)


@dataclass
class RoundConfig:
    length: int
    early_exit: bool = False
    offset: int = 0

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("round length must be positive")


def round_end(start: int, length: int, all_peers_done_at: int | None = None,
              early_exit: bool = False) -> int:
    """End of a round: the timeout, or earlier once every peer's message is processed."""
    deadline = start + length
    if early_exit and all_peers_done_at is not None:
        return min(deadline, max(start, all_peers_done_at))
    return deadline


# -- randomness ------------------------------------------------------------

class Streams:
    """Independent named PRNG streams derived from one seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._cache = {}

    def get(self, *key) -> random.Random:
        rng = self._cache.get(key)
        if rng is None:
            h = hashlib.sha256(repr((self.seed,) + key).encode()).digest()
            rng = random.Random(int.from_bytes(h[:8], "big"))
            self._cache[key] = rng
        return rng


# -- event loop ------------------------------------------------------------

class EventQueue:
    """(time, sequence) ordered queue; ties pop in insertion order."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, time: int, fn: Callable, *args):
        heapq.heappush(self._heap, (time, self._seq, fn, args))
        self._seq += 1

    def pop(self):
        return heapq.heappop(self._heap)

    def peek_time(self):
        return self._heap[0][0] if self._heap else None

    def __len__(self):
        return len(self._heap)


class Simulator:
    def __init__(self):
        self.now = 0
        self.queue = EventQueue()
        self._stopped = False

    def schedule(self, time: int, fn: Callable, *args):
        if time < self.now:
            raise DeterminismError(f"event at {time} scheduled in the past (now={self.now})")
        self.queue.push(time, fn, *args)

    def after(self, delay: int, fn: Callable, *args):
        self.schedule(self.now + delay, fn, *args)

    def stop(self):
        self._stopped = True

    def run(self, until: int):
        q = self.queue
        while q._heap and q._heap[0][0] <= until and not self._stopped:
            t, _, fn, args = heapq.heappop(q._heap)
            if t < self.now:
                raise DeterminismError("time went backwards")
            self.now = t
            fn(*args)
        if not self._stopped:
            self.now = max(self.now, until)


def run(queue_or_sim, until: int, trace: Trace | None = None) -> Trace:
    """Drive a simulator to ``until`` and hand back its trace."""
    sim = queue_or_sim
    if isinstance(sim, EventQueue):
        s = Simulator()
        s.queue = sim
        sim = s
    sim.run(until)
    return trace if trace is not None else Trace()


# -- group network ---------------------------------------------------------

class Endpoint:
    """A registered node's handle on the network."""

    def __init__(self, group, node_id):
        self.group = group
        self.id = node_id
        self.inbox = deque()
        self.crashed = False
        self.round = 0
        self.sent_in_round = False
        self.on_arrival = None

    def begin_round(self, k: int):
        self.round = k
        self.sent_in_round = False


class Network:
    def __init__(self, sim: Simulator, delay: DelayModel, streams: Streams,
                 trace: Trace | None = None, rx_capacity: int | None = None):
        self.sim = sim
        self.delay = delay
        self.streams = streams
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.rx_capacity = rx_capacity
        self.groups: dict = {}
        self.endpoints: dict = {}
        self._mid = 0

    def register(self, group_addr, node_id) -> Endpoint:
        if node_id in self.endpoints:
            raise RegistrationError(f"node {node_id} already registered")
        ep = Endpoint(group_addr, node_id)
        self.endpoints[node_id] = ep
        self.groups.setdefault(group_addr, []).append(node_id)
        return ep

    def group_size(self, group_addr) -> int:
        return len(self.groups.get(group_addr, ()))

    def multicast(self, ep: Endpoint, msg, now: int, pulsing: bool = False) -> bool:
        """Send to every other group member; in a pulsing round only the first call succeeds."""
        if ep.id not in self.endpoints:
            raise RegistrationError(f"node {ep.id} not registered")
        if ep.crashed:
            return False
        if pulsing:
            if ep.sent_in_round:
                return False
            ep.sent_in_round = True
        dests = [d for d in self.groups[ep.group] if d != ep.id]
        self._emit(ep, msg, dests, now)
        return True

    def send(self, ep: Endpoint, dest, msg, now: int, pulsing: bool = False) -> bool:
        if ep.crashed:
            return False
        if pulsing:
            if ep.sent_in_round:
                return False
            ep.sent_in_round = True
        self._emit(ep, msg, [dest], now)
        return True

    def _emit(self, ep, msg, dests, now):
        self._mid += 1
        msg.mid = self._mid
        msg.round = ep.round
        tr = self.trace
        if tr.enabled:
            tr.emit(now, "send", ep.id, mid=msg.mid, round=ep.round, tag=msg.tag(),
                    copies=len(dests), proto=int(getattr(msg, "protocol", True)))
        delay = self.delay
        for d in dests:
            why = None
            dst = self.endpoints[d]
            for p in delay.partitions:
                if p.cuts(ep.id, d, now):
                    why = "partition"
                    break
            if why is None and delay.drop_rate > 0.0:
                if self.streams.get("drop", ep.id, d).random() < delay.drop_rate:
                    why = "loss"
            if why is not None:
                if tr.enabled:
                    tr.emit(now, "drop", d, src=ep.id, mid=msg.mid, why=why)
                continue
            prop = delay.prop_for(ep.id, d).sample(self.streams.get("prop", ep.id, d))
            self.sim.schedule(now + prop, self._arrive, dst, msg, prop)

    def _arrive(self, dst: Endpoint, msg, prop):
        now = self.sim.now
        if dst.crashed:
            if self.trace.enabled:
                self.trace.emit(now, "drop", dst.id, src=msg.sender, mid=msg.mid, why="crash")
            return
        if self.rx_capacity is not None and len(dst.inbox) >= self.rx_capacity:
            if self.trace.enabled:
                self.trace.emit(now, "drop", dst.id, src=msg.sender, mid=msg.mid, why="ring")
            return
        dst.inbox.append((now, msg, prop))
        if dst.on_arrival is not None:
            dst.on_arrival(now)

    def recv(self, ep: Endpoint, now: int) -> list:
        """All messages that have arrived by ``now``, in arrival order."""
        out = []
        inbox = ep.inbox
        while inbox and inbox[0][0] <= now:
            out.append(inbox.popleft()[1])
        return out

    def crash(self, node_id, now):
        ep = self.endpoints[node_id]
        ep.crashed = True
        ep.inbox.clear()


# -- per-node driver -------------------------------------------------------

class NodeDriver:
    """Runs one protocol instance on the network.

    The app is duck-typed: ``mode``, ``pulse(round, now)``, ``receive(msg, now)``,
    ``flush(now, force)``, ``tick(now)``, ``on_client_request(rid, op, now)``,
    ``take_replies()``, ``expected_peers()``, ``round_scale``, ``tick_interval``.

    Pulsing: a round starts with one multicast, then the node processes arrived
    messages one at a time, each costing a d_proc draw of busy time. The
    timeout is checked after each message and when idle; with early exit the
    round also ends once a message from every expected peer was processed.
    Responsive: messages are processed as they arrive and the app's pending
    output is flushed whenever the inbox drains.
    """

    def __init__(self, sim: Simulator, net: Network, app, node_id, group, rounds: RoundConfig,
                 streams: Streams, trace: Trace | None = None, on_reply=None):
        self.sim = sim
        self.net = net
        self.app = app
        self.id = node_id
        self.ep = net.register(group, node_id)
        self.ep.on_arrival = self._arrival
        self.rounds = rounds
        self.proc_rng = streams.get("proc", node_id)
        self.trace = trace if trace is not None else Trace(enabled=False)
        self.on_reply = on_reply
        self.busy = False
        self.crashed = False
        self.round = 0
        self.round_start = 0
        self.deadline = 0
        self.processed = set()
        self.busy_in_round = 0
        self.epoch = 0
        self._wake_for = None
        self.last_send = 0
        self.round_log = []  # (start, length, busy)
        self.busy_total = 0
        self.batch_left = 0

    # lifecycle
    def start(self, now: int):
        if self.app.mode == PULSING:
            self.sim.schedule(now + self.rounds.offset, self._begin_round_evt, self.epoch)
        else:
            self.sim.schedule(now, self._tick_evt, self.epoch)

    def crash(self, now: int):
        if self.crashed:
            return
        self.crashed = True
        self.net.crash(self.id, now)
        self.trace.emit(now, "crash", self.id)

    def switch_mode(self, target: str, now: int):
        if self.crashed or self.app.mode == target:
            return
        self.epoch += 1
        self._close_round(now)
        for msg in self.app.switch_mode(target, now) or ():
            self._send(msg, now)
        if target == RESPONSIVE:
            self.sim.schedule(now, self._tick_evt, self.epoch)
        else:
            self.sim.schedule(now + self._round_length(), self._begin_round_evt, self.epoch)

    def _round_length(self) -> int:
        return max(1, int(round(self.rounds.length * self.app.round_scale)))

    # pulsing rounds
    def _begin_round_evt(self, epoch):
        if epoch != self.epoch or self.crashed:
            return
        self._begin_round(self.sim.now)

    def _begin_round(self, now):
        self.round += 1
        self.round_start = now
        self.deadline = now + self._round_length()
        self.processed = set()
        self.busy_in_round = 0
        self.ep.begin_round(self.round)
        self.trace.emit(now, "round-begin", self.id, round=self.round)
        self.app.tick(now)
        if self.app.mode != PULSING:
            self._mode_changed_by_app(now)
            return
        msg = self.app.pulse(self.round, now)
        if msg is not None:
            if not self.net.multicast(self.ep, msg, now, pulsing=True):
                raise DeterminismError("second multicast in one pulsing round")
            self.last_send = now
        self._replies(now)
        self._work(now)

    def advance_round(self, now: int):
        """Close the current round now and open the next; returns (round, start)."""
        self._close_round(now)
        self._begin_round(now)
        return self.round, self.round_start

    def _close_round(self, now):
        if self.round and self.round_start is not None and self.app.mode == PULSING:
            length = now - self.round_start
            self.round_log.append((self.round_start, length, self.busy_in_round))
            self.trace.emit(now, "round-end", self.id, round=self.round, len=length,
                            busy=self.busy_in_round)
            observe = getattr(self.app, "observe_round", None)
            if observe is not None:
                observe(not self.app.expected_peers() <= self.processed)
            self.round_start = None

    def _round_over(self, now) -> bool:
        if now >= self.deadline:
            return True
        if self.rounds.early_exit:
            expected = self.app.expected_peers()
            return bool(expected) and expected <= self.processed
        return False

    def _work(self, now):
        if self.crashed or self.busy:
            return
        if self.app.mode == PULSING:
            if self._round_over(now):
                self._close_round(now)
                self._begin_round(now)
                return
            if self.ep.inbox:
                self._process_next(now)
                return
            if self._wake_for != self.deadline:
                self._wake_for = self.deadline
                self.sim.schedule(self.deadline, self._wake_evt, self.epoch)
        else:
            # one recv() batch: whatever had arrived when the batch began,
            # followed by a single flush of everything owed
            if self.batch_left == 0 or not self.ep.inbox:
                self.batch_left = 0
                self._flush(now)
                if not self.ep.inbox:
                    return
                self.batch_left = len(self.ep.inbox)
            self.batch_left -= 1
            self._process_next(now)

    def _wake_evt(self, epoch):
        if epoch != self.epoch or self.crashed or self.busy:
            return
        self._work(self.sim.now)

    def _arrival(self, now):
        if not self.busy and not self.crashed:
            self._work(now)

    def _process_next(self, now):
        arrived, msg, prop = self.ep.inbox.popleft()
        d = self.app_proc_delay()
        self.busy = True
        self.sim.schedule(now + d, self._done, msg, arrived, prop, d)

    def app_proc_delay(self) -> int:
        return self.net.delay.proc.sample(self.proc_rng)

    def _done(self, msg, arrived, prop, d):
        now = self.sim.now
        self.busy = False
        if self.crashed:
            return
        self.busy_in_round += d
        self.busy_total += d
        self.processed.add(msg.sender)
        self.trace.emit(now, "deliver", self.id, src=msg.sender, mid=msg.mid, prop=prop, proc=d,
                        wait=now - d - arrived)
        mode = self.app.mode
        observe = getattr(self.app, "observe_delay", None)
        if observe is not None:
            observe(prop, d)
        self.app.receive(msg, now)
        self._replies(now)
        if self.app.mode != mode:
            self._mode_changed_by_app(now)
            return
        self._work(now)

    # responsive
    def _tick_evt(self, epoch):
        if epoch != self.epoch or self.crashed:
            return
        now = self.sim.now
        self.app.tick(now)
        if self.app.mode != RESPONSIVE:
            self._mode_changed_by_app(now)
            return
        if not self.busy:
            self._flush(now, force=now - self.last_send >= self.app.tick_interval)
        self._replies(now)
        self.sim.schedule(now + self.app.tick_interval, self._tick_evt, self.epoch)

    def _mode_changed_by_app(self, now):
        self.epoch += 1
        if self.app.mode == RESPONSIVE:
            self._close_round(now)
            self.sim.schedule(now, self._tick_evt, self.epoch)
            if not self.busy:
                self._flush(now)
        else:
            self.sim.schedule(now + self._round_length(), self._begin_round_evt, self.epoch)

    def _flush(self, now, force=False):
        for msg in self.app.flush(now, force):
            self._send(msg, now)
        self._replies(now)

    def _send(self, msg, now):
        dest = getattr(msg, "dest", None)
        if dest is None:
            ok = self.net.multicast(self.ep, msg, now)
        else:
            ok = self.net.send(self.ep, dest, msg, now)
        if ok:
            self.last_send = now

    # clients
    def client_request(self, rid, op):
        if self.crashed:
            return
        now = self.sim.now
        self.app.on_client_request(rid, op, now)
        self._replies(now)
        if self.app.mode == RESPONSIVE and not self.busy:
            self._flush(now)

    def _replies(self, now):
        reps = self.app.take_replies()
        if reps and self.on_reply is not None:
            for ev in reps:
                self.on_reply(self.id, ev, now)
