import hashlib
from dataclasses import dataclass

import pytest

from chora.netsim import (
    PULSING, Constant, DelayModel, DeterminismError, EventQueue, Network, NodeDriver,
    Partition, RegistrationError, RoundConfig, Simulator, Streams, Uniform, parse_distribution,
    round_end, run,
)
from chora.core import quorum_size
from chora.metrics import percentile
from chora.trace import Trace


@dataclass
class Msg:
    sender: int
    mid: int = -1
    round: int = -1

    def tag(self):
        return "P"


class Echo:
    """Minimal pulsing app: one message per round, expects every peer."""

    mode = PULSING
    round_scale = 1.0
    tick_interval = 1000

    def __init__(self, rid, peers):
        self.rid = rid
        self.peers = set(peers) - {rid}
        self.got = []

    def pulse(self, k, now):
        return Msg(self.rid)

    def receive(self, msg, now):
        self.got.append((now, msg.sender))

    def tick(self, now):
        return []

    def flush(self, now, force=False):
        return []

    def take_replies(self):
        return []

    def expected_peers(self):
        return self.peers


def _net(delay=None, seed=1):
    sim = Simulator()
    tr = Trace()
    net = Network(sim, delay or DelayModel(Constant(5000), Constant(0)), Streams(seed), tr)
    return sim, net, tr


def test_register_examples():
    _, net, _ = _net()
    net.register("g", 0)
    with pytest.raises(RegistrationError):
        net.register("g", 0)
    for i in range(1, 5):
        net.register("g", i)
    assert net.group_size("g") == 5
    assert quorum_size(net.group_size("g")) == 3


def test_multicast_constant_delay_reaches_every_peer():
    sim, net, _ = _net()
    eps = [net.register("g", i) for i in range(3)]
    sim.now = 700
    assert net.multicast(eps[0], Msg(0), 700, pulsing=True)
    sim.run(10_000)
    for ep in eps[1:]:
        assert [t for t, _, _ in ep.inbox] == [5700]
    assert not eps[0].inbox


def test_second_multicast_in_round_rejected():
    sim, net, _ = _net()
    a = net.register("g", 0)
    net.register("g", 1)
    assert net.multicast(a, Msg(0), 0, pulsing=True)
    assert not net.multicast(a, Msg(0), 10, pulsing=True)
    assert not net.send(a, 1, Msg(0), 10, pulsing=True)
    a.begin_round(2)
    assert net.multicast(a, Msg(0), 20, pulsing=True)


def test_drop_rate_one_delivers_nothing():
    sim, net, tr = _net(DelayModel(Constant(5), Constant(0), drop_rate=1.0))
    eps = [net.register("g", i) for i in range(4)]
    assert net.multicast(eps[0], Msg(0), 0, pulsing=True)
    sim.run(1000)
    assert all(not ep.inbox for ep in eps)
    assert sum(1 for e in tr if e.kind == "drop") == 3


def test_partition_cuts_both_directions_until_heal():
    p = Partition(frozenset({0}), frozenset({1, 2}), until=100)
    assert p.cuts(0, 1, 50) and p.cuts(2, 0, 50)
    assert not p.cuts(1, 2, 50)
    assert not p.cuts(0, 1, 100)


def test_delay_model_rejects_bad_drop_rate():
    with pytest.raises(ValueError):
        DelayModel(drop_rate=1.5)


def test_recv_batches_in_time_order():
    sim, net, _ = _net()
    ep = net.register("g", 0)
    ep.inbox.extend([(10, "a", 0), (20, "b", 0), (30, "c", 0)])
    assert net.recv(ep, 25) == ["a", "b"]
    assert net.recv(ep, 25) == []
    assert net.recv(ep, 30) == ["c"]


def test_recv_ties_follow_send_sequence():
    sim, net, _ = _net(DelayModel(Constant(100), Constant(0)))
    eps = [net.register("g", i) for i in range(3)]
    m1, m2 = Msg(0), Msg(1)
    net.send(eps[0], 2, m1, 0)
    net.send(eps[1], 2, m2, 0)
    sim.run(1000)
    assert net.recv(eps[2], 100) == [m1, m2]


def test_round_end_min_rule():
    assert round_end(0, 2000, 1500, early_exit=True) == 1500
    assert round_end(0, 2000, 1500, early_exit=False) == 2000
    assert round_end(0, 2000, None, early_exit=True) == 2000
    assert round_end(0, 2000, 2600, early_exit=True) == 2000


def _rounds(early_exit, crash=None, until=4100):
    # 3 nodes, d_prop 1000, d_proc 250: both peer messages are processed by +1500
    sim = Simulator()
    tr = Trace()
    streams = Streams(0)
    net = Network(sim, DelayModel(Constant(1000), Constant(250)), streams, tr)
    drivers = [NodeDriver(sim, net, Echo(i, range(3)), i, "g", RoundConfig(2000, early_exit),
                          streams, tr) for i in range(3)]
    for d in drivers:
        d.start(0)
    if crash is not None:
        drivers[crash].crash(0)
    sim.run(until)
    return drivers[0].round_log


def test_round_length_early_exit_on():
    assert _rounds(True)[0][:2] == (0, 1500)


def test_round_length_early_exit_off():
    assert [length for _, length, _ in _rounds(False)] == [2000, 2000]


def test_round_length_crashed_peer_forces_timeout():
    assert [length for _, length, _ in _rounds(True, crash=2)] == [2000, 2000]


def test_run_empty_queue_gives_empty_trace():
    assert len(run(EventQueue(), 1000)) == 0


def test_same_timestamp_dispatch_in_insertion_order():
    sim = Simulator()
    seen = []
    for tag in "abc":
        sim.schedule(5, seen.append, tag)
    sim.run(10)
    assert seen == ["a", "b", "c"]


def test_scheduling_in_the_past_is_fatal():
    sim = Simulator()
    sim.schedule(10, lambda: sim.schedule(5, print))
    with pytest.raises(DeterminismError):
        sim.run(20)


def _digest(seed):
    sim, net, tr = _net(DelayModel(Uniform(100, 900), Uniform(0, 50), drop_rate=0.2), seed)
    streams = Streams(seed)
    net.streams = streams
    drivers = [NodeDriver(sim, net, Echo(i, range(4)), i, "g", RoundConfig(1000), streams, tr)
               for i in range(4)]
    for d in drivers:
        d.start(0)
    sim.run(50_000)
    return hashlib.sha256("\n".join(tr.lines()).encode()).hexdigest()


def test_same_seed_same_trace_hash():
    assert _digest(7) == _digest(7)
    assert _digest(7) != _digest(8)


def test_pulsing_driver_never_exceeds_round_budget():
    sim, net, tr = _net(DelayModel(Uniform(100, 3000), Constant(40)))
    streams = Streams(3)
    drivers = [NodeDriver(sim, net, Echo(i, range(3)), i, "g", RoundConfig(1000, True), streams, tr)
               for i in range(3)]
    for d in drivers:
        d.start(0)
    sim.run(100_000)
    sends = {}
    for e in tr:
        if e.kind == "send":
            key = (e.node, e.data["round"])
            sends[key] = sends.get(key, 0) + 1
    assert sends and max(sends.values()) == 1


def test_uniform_sampling_matches_mean_and_p90():
    dist = parse_distribution("uniform 2000 6000")
    rng = Streams(11).get("prop", 0, 1)
    xs = [dist.sample(rng) for _ in range(100_000)]
    assert sum(xs) / len(xs) == pytest.approx(4000, rel=0.02)
    assert percentile(xs, 90) == pytest.approx(5600, rel=0.05)
    assert min(xs) >= 0


def test_parse_distribution_forms():
    assert parse_distribution("constant 5").sample(None) == 5
    assert parse_distribution("lognormal 7 0.5 100").mean > 100
    assert parse_distribution("empirical 1 2 3").mean == 2
    for bad in ("", "uniform 5", "uniform 9 3", "empirical -1", "gamma 1"):
        with pytest.raises(ValueError):
            parse_distribution(bad)
