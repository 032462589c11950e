"""Invariants as hypothesis properties."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chora.core import AssignmentScheme, Log, compute_commit, log_up_to_date, noop, quorum_size
from chora.harness import simulate
from chora.metrics import percentile, round_bounds, s_chora, s_tilde
from chora.netsim import Streams
from chora.soak import FAMILIES, family_scenario
from chora.trace import Trace, TraceEvent

from oracles import (
    bounds_oracle, commit_brute, gap_free_end, nearest_rank, owner_by_enumeration,
    s_chora_oracle, s_tilde_oracle, up_to_date_oracle,
)

acks_st = st.lists(st.integers(0, 200), min_size=1, max_size=9)
delays = st.lists(st.integers(1, 10_000), min_size=1, max_size=40)
pos_delays = st.lists(st.integers(0, 10_000), min_size=1, max_size=40)


@given(acks_st, st.data())
def test_commit_is_brute_force_max(acks, data):
    q = data.draw(st.integers(1, len(acks)))
    assert compute_commit(acks, q) == commit_brute(acks, q)


@given(acks_st, st.data())
def test_commit_monotone_in_acks(acks, data):
    q = data.draw(st.integers(1, len(acks)))
    i = data.draw(st.integers(0, len(acks) - 1))
    bumped = list(acks)
    bumped[i] += data.draw(st.integers(0, 50))
    assert compute_commit(bumped, q) >= compute_commit(acks, q)


@given(st.lists(st.integers(0, 9), min_size=1, max_size=6, unique=True),
       st.integers(0, 50), st.integers(0, 80))
def test_slot_owner_partitions_slots(proposers, base, offset):
    scheme = AssignmentScheme(tuple(proposers), base)
    slot = base + offset
    who = scheme.owner(slot)
    assert who == owner_by_enumeration(slot, scheme.proposers, base)
    # every owned slot is reachable from first_owned and no one else owns it
    assert scheme.first_owned(who, slot) == slot
    for other in proposers:
        if other != who:
            assert scheme.first_owned(other, slot) != slot


@given(st.tuples(st.integers(0, 5), st.integers(0, 30)),
       st.tuples(st.integers(0, 5), st.integers(0, 30)),
       st.tuples(st.integers(0, 5), st.integers(0, 30)))
def test_up_to_date_is_total_preorder(a, b, c):
    assert log_up_to_date(a, a)
    assert log_up_to_date(a, b) or log_up_to_date(b, a)
    if log_up_to_date(a, b) and log_up_to_date(b, c):
        assert log_up_to_date(a, c)
    assert log_up_to_date(a, b) == up_to_date_oracle(a, b)


@given(st.lists(st.integers(1, 40), max_size=40))
def test_log_last_append_is_gap_free_prefix(slots):
    log = Log()
    for s in slots:
        log.append(s, noop(0, 0))
    assert log.last_append == gap_free_end(set(slots))


@given(st.lists(st.integers(1, 30), max_size=30), st.integers(0, 30))
def test_truncate_keeps_prefix(slots, cut):
    log = Log()
    for s in slots:
        log.append(s, noop(0, 0))
    log.truncate_above(cut)
    kept = {s for s in slots if s <= cut}
    assert set(log.slots) == kept
    assert log.last_append == gap_free_end(kept)


@given(delays, st.integers(1, 100))
def test_percentile_nearest_rank_oracle(samples, x):
    assert percentile(samples, x) == nearest_rank(samples, x)


@given(delays, st.integers(1, 100))
def test_s_tilde_matches_oracle(samples, x):
    assert s_tilde(samples, x) == pytest.approx(s_tilde_oracle(samples, x), rel=1e-12)


@given(delays, st.integers(1, 100))
def test_s_tilde_in_unit_interval_for_tail_above_mean(samples, x):
    if nearest_rank(samples, x) >= sum(samples) / len(samples):
        assert 0 < s_tilde(samples, x) <= 1 + 1e-12


@given(delays, pos_delays, st.integers(1, 100))
def test_s_chora_and_bounds_match_oracle(prop, proc, x):
    conv, chora = bounds_oracle(prop, proc, x)
    got = round_bounds(prop, proc, x)
    assert got[0] == pytest.approx(conv, rel=1e-12)
    assert got[1] == pytest.approx(chora, rel=1e-12, abs=1e-9)
    if chora > 0:
        assert s_chora(prop, proc, x) == pytest.approx(s_chora_oracle(prop, proc, x), rel=1e-12)


@given(st.integers(1, 10_000), st.integers(0, 10_000), st.integers(1, 20))
def test_constant_delays_are_perfectly_synchronous(prop, proc, n):
    if proc > 0:
        assert s_chora([prop] * n, [proc] * n, 90) == 1.0
    assert s_tilde([prop + proc] * n, 90) == 1.0


@given(st.integers(0, 2**63), st.text(min_size=1, max_size=8))
@settings(max_examples=50)
def test_streams_are_reproducible_and_separate(seed, key):
    a, b = Streams(seed), Streams(seed)
    assert a.get(key, 1).random() == b.get(key, 1).random()
    assert Streams(seed).get(key, 1).random() != Streams(seed).get(key, 2).random()


event_st = st.builds(
    TraceEvent, st.integers(0, 10**9), st.sampled_from(["send", "commit", "append"]),
    st.integers(-1, 8),
    st.dictionaries(st.sampled_from(["slot", "cid", "view", "mid"]),
                    st.one_of(st.integers(-5, 10**6),
                              st.from_regex(r"[a-z][a-z0-9:.+@]{0,12}", fullmatch=True))))


@given(st.lists(event_st, max_size=20))
def test_trace_lines_round_trip(events):
    tr = Trace.from_events(sorted(events, key=lambda e: e.time))
    back = [TraceEvent.from_line(line) for line in tr.lines()]
    assert back == list(tr)


# -- trace-level invariants over randomized runs ----------------------------

run_st = st.tuples(st.sampled_from(FAMILIES), st.sampled_from([3, 5]), st.integers(0, 10_000))


def _short(fam, n, seed):
    return simulate(family_scenario(fam, n, seed, duration=60_000), seed)


@given(run_st)
@settings(max_examples=25, deadline=None)
def test_commit_backed_by_quorum_of_acks(run):
    fam, n, seed = run
    q = quorum_size(n)
    best = {}       # node -> highest slot it has ever acknowledged
    for ev in _short(fam, n, seed):
        if ev.kind == "ack-advance":
            best[ev.node] = max(best.get(ev.node, 0), ev.data["slot"])
        elif ev.kind == "commit":
            s = ev.data["slot"]
            assert sum(1 for a in best.values() if a >= s) >= q, (ev, best)
            assert best.get(ev.node, 0) >= s


@given(run_st)
@settings(max_examples=25, deadline=None)
def test_delivery_follows_send_by_its_propagation_delay(run):
    sent = {}
    for ev in _short(*run):
        if ev.kind == "send":
            sent[ev.data["mid"]] = ev.time
        elif ev.kind == "deliver":
            d = ev.data
            assert ev.time - d["proc"] - d["wait"] - d["prop"] == sent[d["mid"]]
            assert d["prop"] >= 0 and d["proc"] >= 0 and d["wait"] >= 0


@given(st.sampled_from(["lossless-pulsing", "drops", "crash-view-change"]),
       st.sampled_from([3, 5, 7]), st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_pulsing_round_budget(fam, n, seed):
    sc = family_scenario(fam, n, seed, duration=60_000)
    if sc.protocol != "chora-pulsing":
        return
    seen = set()
    for ev in simulate(sc, seed):
        if ev.kind == "send":
            key = (ev.node, ev.data["round"])
            assert key not in seen
            seen.add(key)


@given(run_st)
@settings(max_examples=25, deadline=None)
def test_crashed_nodes_go_silent(run):
    down = set()
    for ev in _short(*run):
        if ev.kind == "crash":
            down.add(ev.node)
        elif ev.kind in ("send", "deliver", "append", "commit"):
            assert ev.node not in down
