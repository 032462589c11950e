"""Scenario runner: clients, replicas, network, faults, metrics and checks.

Every number in a ``RunResult`` is computed from the run's trace by
``analyze``, so re-analysing a saved trace reproduces the result exactly.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

from . import checker, metrics
from .baselines import MenciusReplica, PaxosReplica
from .core import ChoraError
from .netsim import (
    Constant, DelayModel, Network, NodeDriver, Partition, RoundConfig, Simulator, Streams, Uniform,
    parse_distribution,
)
from .replica import PULSING, RESPONSIVE, Replica, ReplicaConfig
from .trace import Trace, split_list

PROTOCOLS = ("chora-pulsing", "chora-responsive", "chora-auto", "multipaxos", "mencius")
FAULT_ACTIONS = ("crash", "partition", "set-drop-rate", "set-delay-model", "switch-mode")
AXES = ("round-length", "delay-spread", "replicas", "proposer-count")
GROUP = "g"


class ConfigError(ChoraError, ValueError):
    pass


@dataclass(frozen=True)
class Fault:
    time: int
    action: str
    args: tuple = ()


def default_delay() -> DelayModel:
    return DelayModel(prop=Uniform(2000, 4000), proc=Uniform(160, 240))


@dataclass
class Scenario:
    protocol: str = "chora-pulsing"
    replicas: int = 3
    clients: int = 24
    think_time: int = 0
    client_delay: int = 1000
    client_timeout: int | None = None
    delay: DelayModel = field(default_factory=default_delay)
    round_length: int | None = None
    early_exit: bool = False
    duration: int = 400_000
    warmup: int | None = None
    faults: list = field(default_factory=list)
    proposer_count: int | None = None
    batch_cap: int = 8
    rx_capacity: int | None = 256
    coord_rounds: int = 8
    suspect_rounds: int = 10
    candidacy_jitter: int = 5
    mutations: tuple = ()
    ideal: bool = True
    check: bool = True
    progress_bound: int | None = None

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.clients < 0 or self.think_time < 0 or self.client_delay < 0:
            raise ConfigError("client parameters must be non-negative")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.round_length is not None and self.round_length <= 0:
            raise ConfigError("round length must be positive")
        if self.warmup is not None and not 0 <= self.warmup < self.duration:
            raise ConfigError("warmup must lie in [0, duration)")
        if self.batch_cap < 1:
            raise ConfigError("batch cap must be >= 1")
        if self.proposer_count is not None and not 1 <= self.proposer_count <= self.replicas:
            raise ConfigError("proposer count outside 1..replicas")
        if self.faults and self.replicas % 2 == 0:
            raise ConfigError("fault scenarios need an odd replica count (N = 2f+1)")
        for f in self.faults:
            if f.action not in FAULT_ACTIONS:
                raise ConfigError(f"unknown fault action {f.action!r}")
            if not 0 <= f.time <= self.duration:
                raise ConfigError(f"fault at {f.time} outside the run")
            if f.action == "crash" and not 0 <= int(f.args[0]) < self.replicas:
                raise ConfigError(f"crash of unknown node {f.args[0]}")
        if self.mutations and not self.protocol.startswith("chora"):
            raise ConfigError("mutations apply to chora protocols only")
        return self

    @property
    def mode(self) -> str:
        return {"chora-pulsing": PULSING, "chora-responsive": RESPONSIVE, "chora-auto": "auto"
                }.get(self.protocol, RESPONSIVE)

    @property
    def T(self) -> int:
        return self.round_length or adequate_round_length(self.delay.prop, self.delay.proc, self.replicas)

    @property
    def window_start(self) -> int:
        return self.duration // 5 if self.warmup is None else self.warmup

    @property
    def crashes(self) -> list:
        return [f for f in self.faults if f.action == "crash"]


@lru_cache(maxsize=256)
def _quantiles(dist, n=20_000):
    import random
    rng = random.Random(12345)
    xs = [dist.sample(rng) for _ in range(n)]
    return metrics.percentile(xs, 90), metrics.mean(xs)


def adequate_round_length(prop, proc, replicas: int, x: float = 90) -> int:
    """Round length that fits one round's processing at the x-th percentile.

    A node processes one message from each of its N-1 peers per round, plus
    the propagation tail beyond the mean, which a pipelined round absorbs.
    """
    p_prop, m_prop = _quantiles(prop)
    p_proc, _ = _quantiles(proc)
    return int(math.ceil((p_prop - m_prop) + max(replicas - 1, 1) * p_proc))


# -- clients ---------------------------------------------------------------

class ClientPool:
    """Closed-loop clients, one outstanding request each, attached round-robin.

    A client that times out tries the next replica and stays with whichever
    one answers.
    """

    def __init__(self, sim, sc: Scenario, drivers, trace: Trace, timeout: int):
        self.sim = sim
        self.sc = sc
        self.drivers = drivers
        self.trace = trace
        self.timeout = timeout
        self.home = [c % sc.replicas for c in range(sc.clients)]
        self.seq = [0] * sc.clients
        self.attempt = [0] * sc.clients
        self.waiting = [False] * sc.clients

    def start(self):
        for c in range(self.sc.clients):
            self.sim.schedule(c, self._issue, c)

    def _issue(self, c):
        self.seq[c] += 1
        self.attempt[c] = 0
        self.waiting[c] = True
        self._send(c)

    def _send(self, c):
        seq, att = self.seq[c], self.attempt[c]
        node = (self.home[c] + att) % len(self.drivers)
        self.sim.after(self.sc.client_delay, self.drivers[node].client_request, (c, seq), seq)
        self.sim.after(self.timeout, self._expire, c, seq, att)

    def _expire(self, c, seq, att):
        if self.waiting[c] and self.seq[c] == seq and self.attempt[c] == att:
            self.attempt[c] += 1
            self._send(c)

    def on_reply(self, node, ev, now):
        c, seq = ev.req_id
        self.trace.emit(now, "reply", node, rid=f"{c}.{seq}")
        if self.waiting[c] and self.seq[c] == seq:
            self.waiting[c] = False
            self.home[c] = node      # stick with a replica that answers
            self.sim.after(self.sc.client_delay + self.sc.think_time, self._issue, c)


# -- running ---------------------------------------------------------------

def _make_app(sc: Scenario, rid: int, streams: Streams, trace: Trace, T: int):
    members = tuple(range(sc.replicas))
    if sc.protocol == "multipaxos":
        return PaxosReplica(rid, members, trace=trace, batch_cap=sc.batch_cap, interval=T)
    if sc.protocol == "mencius":
        return MenciusReplica(rid, members, trace=trace, batch_cap=sc.batch_cap, interval=T)
    cfg = ReplicaConfig(
        replicas=members, interval=T, batch_cap=sc.batch_cap, coord_rounds=sc.coord_rounds,
        suspect_rounds=sc.suspect_rounds, candidacy_jitter=sc.candidacy_jitter,
        proposer_count=sc.proposer_count,
        auto_mode=sc.protocol == "chora-auto", mutations=frozenset(sc.mutations))
    mode = RESPONSIVE if sc.protocol == "chora-responsive" else PULSING
    return Replica(rid, cfg, rng=streams.get("replica", rid), trace=trace, mode=mode)


def fault_args_token(args) -> str:
    """Fault arguments as one trace token: groups split by ``|``, spaces as ``_``."""
    parts = []
    for a in args:
        if isinstance(a, (tuple, list, frozenset, set)):
            parts.append(",".join(str(x) for x in sorted(a)) or "-")
        else:
            parts.append(str(a).replace(" ", "_"))
    return "|".join(parts) or "-"


def _fault_fn(sc, f: Fault, sim, drivers, delay, trace):
    def fire():
        now = sim.now
        trace.emit(now, "fault", -1, action=f.action, args=fault_args_token(f.args))
        if f.action == "crash":
            drivers[int(f.args[0])].crash(now)
        elif f.action == "partition":
            a, b, until = f.args
            delay.partitions.append(Partition(frozenset(a), frozenset(b), int(until)))
        elif f.action == "set-drop-rate":
            p = float(f.args[0])
            if not 0 <= p <= 1:
                raise ConfigError(f"drop rate {p} outside [0, 1]")
            delay.drop_rate = p
        elif f.action == "set-delay-model":
            delay.prop = parse_distribution(f.args[0])
            delay.proc = parse_distribution(f.args[1])
        elif f.action == "switch-mode":
            for d in drivers:
                d.switch_mode(f.args[0], now)
    return fire


def simulate(sc: Scenario, seed: int) -> Trace:
    """Run the scenario once and return its raw trace (no analysis, no checks)."""
    sc.validate()
    T = sc.T
    trace = Trace()
    streams = Streams(seed)
    sim = Simulator()
    delay = copy.deepcopy(sc.delay)
    net = Network(sim, delay, streams, trace, rx_capacity=sc.rx_capacity)
    trace.emit(0, "meta", -1, seed=seed, protocol=sc.protocol, mode=sc.mode, replicas=sc.replicas,
               round_length=T, drop_rate=float(sc.delay.drop_rate), duration=sc.duration,
               warmup=sc.window_start, clients=sc.clients, prop=str(sc.delay.prop).replace(" ", "_"),
               proc=str(sc.delay.proc).replace(" ", "_"))
    rounds = RoundConfig(T, early_exit=sc.early_exit)
    drivers = []
    timeout = sc.client_timeout or 100 * T + 20 * int(sc.delay.prop.mean)
    pool = ClientPool(sim, sc, drivers, trace, timeout)
    for rid in range(sc.replicas):
        app = _make_app(sc, rid, streams, trace, T)
        drivers.append(NodeDriver(sim, net, app, rid, GROUP, rounds, streams, trace,
                                  on_reply=pool.on_reply))
    for d in drivers:
        d.start(0)
    pool.start()
    for f in sorted(sc.faults, key=lambda f: f.time):
        sim.schedule(f.time, _fault_fn(sc, f, sim, drivers, delay, trace))
    sim.run(sc.duration)
    return trace


def _ideal_scenario(sc: Scenario, prop_mean: float, proc_mean: float) -> Scenario:
    """Zero-variance twin: constant delays at the measured means and the tight
    round length that such a network allows."""
    prop, proc = Constant(int(round(prop_mean))), Constant(int(round(proc_mean)))
    return replace(sc, delay=DelayModel(prop=prop, proc=proc), early_exit=True, faults=[],
                   ideal=False, check=False, mutations=(),
                   round_length=max(1, adequate_round_length(prop, proc, sc.replicas)))


@lru_cache(maxsize=512)
def _ideal_point(sc_key, seed):
    sc = sc_key.scenario
    tr = simulate(sc, seed)
    lens = [ev.data["len"] for ev in tr if ev.kind == "round-end" and ev.time >= sc.window_start]
    ops = _committed_ops(tr, sc.window_start, sc.duration)
    if not lens or ops == 0:
        return None
    rounds_per_node = len(lens) / sc.replicas
    return metrics.mean(lens), ops / rounds_per_node


class _Key:
    """Hashable wrapper keyed on the scenario's repr (scenarios are mutable dataclasses)."""

    def __init__(self, scenario):
        self.scenario = scenario
        self._r = repr(scenario)

    def __hash__(self):
        return hash(self._r)

    def __eq__(self, other):
        return self._r == other._r


def progress_spec(sc: Scenario, trace: Trace) -> checker.ProgressSpec | None:
    """Declared synchronous windows: lossless, fault-free stretches of chora runs."""
    if not sc.protocol.startswith("chora") or sc.delay.drop_rate > 0 or sc.mutations:
        return None
    if len(sc.crashes) > (sc.replicas - 1) // 2:
        return None
    end = min([f.time for f in sc.faults], default=sc.duration)
    props = [ev.data["prop"] for ev in trace if ev.kind == "deliver"]
    procs = [ev.data["proc"] for ev in trace if ev.kind == "deliver"]
    if not props:
        return None
    if sc.progress_bound is not None:
        bound = sc.progress_bound
    elif sc.protocol == "chora-responsive":
        rtt = 2 * (metrics.mean(props) + metrics.mean(procs))
        bound = int(4 * rtt + 2 * sc.replicas * max(procs))
    else:
        bound = 3 * sc.T + 2 * max(props) + 2 * sc.replicas * max(procs)
    return checker.ProgressSpec([(0, end)], bound)


def run_scenario(sc: Scenario, seed: int, check: bool | None = None):
    """Run, optionally check, and analyse; returns (RunResult, Trace)."""
    trace = simulate(sc, seed)
    if sc.ideal and sc.protocol == "chora-pulsing":
        props = [ev.data["prop"] for ev in trace if ev.kind == "deliver"]
        procs = [ev.data["proc"] for ev in trace if ev.kind == "deliver"]
        if props:
            point = _ideal_point(_Key(_ideal_scenario(sc, metrics.mean(props), metrics.mean(procs))), seed)
            if point is not None:
                trace.emit(sc.duration, "meta", -1, ideal_t=float(point[0]), ideal_opr=float(point[1]))
    do_check = sc.check if check is None else check
    verdicts = None
    if do_check:
        spec = progress_spec(sc, trace)
        if spec is None:
            trace.emit(sc.duration, "meta", -1, checked=1)
        else:
            trace.emit(sc.duration, "meta", -1, checked=1, progress_bound=spec.bound,
                       progress_end=spec.windows[0][1])
        verdicts = checker.run_checks(trace, spec)
    return analyze(trace, verdicts), trace


# -- analysis --------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    protocol: str
    mode: str
    replicas: int
    round_length_ns: int
    drop_rate: float
    committed_ops: int
    total_rounds: int | None
    sim_time_ns: int
    throughput_ops_per_s: float
    mean_latency_ns: float | None
    p50_latency_ns: float | None
    p90_latency_ns: float | None
    p99_latency_ns: float | None
    broadcasts: int
    msgs_per_commit: float | None
    s_tilde_90: float | None
    s_chora_90: float | None
    alpha: float | None
    beta: float | None
    kappa: float | None
    safety_pass: bool | None
    time_to_recover_ns: int | None
    verdicts: list | None = None
    synchrony: metrics.SynchronyReport | None = None
    utilization: float | None = None
    copies_per_commit: float | None = None


def _committed_ops(trace, lo, hi) -> int:
    first = {}
    for ev in trace:
        if ev.kind == "execute":
            for rid in split_list(ev.data.get("reqs")):
                first.setdefault(rid, ev.time)
    return sum(1 for t in first.values() if lo <= t <= hi)


@dataclass
class RecoveryReport:
    crash_time: int
    time_to_recover_ns: int | None
    pre_ops_per_s: float
    post_ops_per_s: float | None

    @property
    def ratio(self) -> float | None:
        if self.post_ops_per_s is None or self.pre_ops_per_s == 0:
            return None
        return self.post_ops_per_s / self.pre_ops_per_s


def recovery_report(trace, settle: float = 1 / 3) -> RecoveryReport | None:
    """Throughput before the first crash against steady state after recovery.

    The pre-crash window runs from warmup to the crash; the post window skips
    the first ``settle`` fraction of the time left after recovery.
    """
    res = analyze(trace)
    m = _meta(trace)
    crash_t = next((ev.time for ev in trace if ev.kind == "crash"), None)
    if crash_t is None:
        return None
    lo, end = m["warmup"], m["duration"]
    pre = _committed_ops(trace, lo, crash_t - 1) / max(crash_t - lo, 1) * 1e9
    ttr = res.time_to_recover_ns
    post = None
    if ttr is not None:
        start = crash_t + ttr
        start += int((end - start) * settle)
        if end > start:
            post = _committed_ops(trace, start, end) / (end - start) * 1e9
    return RecoveryReport(crash_t, ttr, pre, post)


def _meta(trace) -> dict:
    out = {}
    for ev in trace:
        if ev.kind == "meta":
            out.update(ev.data)
    return out


def analyze(trace: Trace, verdicts=None) -> RunResult:
    m = _meta(trace)
    lo, hi = m["warmup"], m["duration"]
    window_s = (hi - lo) / 1e9
    ops = _committed_ops(trace, lo, hi)

    requested = {}
    latencies = []
    props, procs = [], []
    round_lens, busy = [], []
    rounds_by_node = {}
    rounds_in_window = {}
    crash_t = None
    view_at_crash = 0
    post_crash = None
    for ev in trace:
        k = ev.kind
        if k == "request":
            requested.setdefault((ev.node, ev.data["rid"]), ev.time)
        elif k == "reply":
            t0 = requested.get((ev.node, ev.data["rid"]))
            if t0 is not None and lo <= ev.time <= hi:
                latencies.append(ev.time - t0)
        elif k == "deliver":
            if lo <= ev.time <= hi:
                props.append(ev.data["prop"])
                procs.append(ev.data["proc"])
        elif k == "round-end":
            rounds_by_node[ev.node] = ev.data["round"]
            if lo <= ev.time <= hi:
                round_lens.append(ev.data["len"])
                busy.append(ev.data["busy"])
                rounds_in_window[ev.node] = rounds_in_window.get(ev.node, 0) + 1
        elif k == "crash" and crash_t is None:
            crash_t = ev.time
        elif k == "commit":
            if crash_t is None:
                view_at_crash = max(view_at_crash, ev.data.get("rv", 0))
            elif post_crash is None and str(ev.data["cid"]).startswith("op:"):
                if ev.data.get("rv", 0) > view_at_crash or m["protocol"] in ("multipaxos", "mencius"):
                    post_crash = ev.time

    try:
        mc = metrics.msgs_per_commit(trace, since=lo, until=hi)
        broadcasts, mpc, cpc = mc.broadcasts, mc.per_commit, mc.copies_per_commit
    except ValueError:
        broadcasts = sum(1 for ev in trace if ev.kind == "send" and lo <= ev.time <= hi)
        mpc = cpc = None

    samples = metrics.DelaySamples(props, procs)
    rep = metrics.synchrony_report(samples, 90)
    alpha = beta = kappa = None
    if "ideal_t" in m and round_lens and ops > 0:
        r = metrics.mean(list(rounds_in_window.values()))
        t = metrics.mean(round_lens)
        r_hat = ops / float(m["ideal_opr"])
        alpha, beta = metrics.efficiency_effectiveness((float(m["ideal_t"]), r_hat), (t, r))
        kappa = alpha * beta
        rep.alpha, rep.beta, rep.kappa = alpha, beta, kappa
    utilization = sum(busy) / sum(round_lens) if round_lens and sum(round_lens) else None

    lat = sorted(latencies)
    safety = None
    if verdicts is not None:
        safety = checker.safety_pass(verdicts)
    return RunResult(
        seed=m["seed"], protocol=m["protocol"], mode=m["mode"], replicas=m["replicas"],
        round_length_ns=m["round_length"], drop_rate=float(m["drop_rate"]),
        committed_ops=ops,
        total_rounds=max(rounds_by_node.values()) if rounds_by_node else None,
        sim_time_ns=hi,
        throughput_ops_per_s=ops / window_s,
        mean_latency_ns=metrics.mean(lat) if lat else None,
        p50_latency_ns=metrics.percentile(lat, 50) if lat else None,
        p90_latency_ns=metrics.percentile(lat, 90) if lat else None,
        p99_latency_ns=metrics.percentile(lat, 99) if lat else None,
        broadcasts=broadcasts, msgs_per_commit=mpc,
        s_tilde_90=rep.S_tilde, s_chora_90=rep.S,
        alpha=alpha, beta=beta, kappa=kappa,
        safety_pass=safety,
        time_to_recover_ns=(post_crash - crash_t) if crash_t is not None and post_crash is not None else None,
        verdicts=verdicts, synchrony=rep, utilization=utilization, copies_per_commit=cpc,
    )


def reanalyze(trace: Trace) -> RunResult:
    """Recompute a run's result from its saved trace, re-running the checks if they ran."""
    m = _meta(trace)
    verdicts = None
    if m.get("checked"):
        spec = None
        if "progress_bound" in m:
            spec = checker.ProgressSpec([(0, m["progress_end"])], m["progress_bound"])
        verdicts = checker.run_checks(trace, spec)
    return analyze(trace, verdicts)


# -- batches ---------------------------------------------------------------

def _run_one(args):
    sc, seed = args
    res, trace = run_scenario(sc, seed)
    return res, trace.digest()


def run_many(jobs, workers: int = 1):
    """Run (scenario, seed) jobs; results come back in job order whatever the pool size."""
    jobs = list(jobs)
    if workers <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_run_one, jobs))


def with_axis(sc: Scenario, axis: str, value) -> Scenario:
    if axis == "round-length":
        return replace(sc, round_length=int(value))
    if axis == "delay-spread":
        mean = sc.delay.prop.mean
        half = float(value) / 2
        d = copy.deepcopy(sc.delay)
        d.prop = Uniform(int(round(mean - half)), int(round(mean + half)))
        return replace(sc, delay=d)
    if axis == "replicas":
        return replace(sc, replicas=int(value))
    if axis == "proposer-count":
        return replace(sc, proposer_count=int(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def sweep(sc: Scenario, axis: str, values, seeds=(0,), workers: int = 1) -> list[RunResult]:
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    jobs = [(with_axis(sc, axis, v), s) for v in values for s in seeds]
    return [r for r, _ in run_many(jobs, workers)]
