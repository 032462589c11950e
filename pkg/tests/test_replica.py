import pytest

from chora.core import NOOP, OP, VIEW_INIT, Command, noop
from chora.replica import (
    CANDIDATE, FOLLOWER, INITIATOR, PULSING, RESPONSIVE, ReplicaConfig, Replica, RoundBudgetError,
    RoundMessage, ViewChangeRequest, ViewChangeVote,
)

INTERVAL = 1000


def rep(rid, n=3, mode=PULSING, **kw):
    return Replica(rid, ReplicaConfig(tuple(range(n)), interval=INTERVAL, **kw), mode=mode)


def op(p, v, *reqs):
    return Command(OP, p, v, tuple((c, s, "x") for c, s in reqs))


def fill(r, slots, view=0):
    for s in slots:
        r.log.append(s, noop(r.scheme.owner(s), view))
    r._refresh(0)


def msg(sender, view=0, ack=0, latest=0, **kw):
    return RoundMessage(sender, view, ack, latest, **kw)


def test_pulsing_request_is_buffered():
    r = rep(0)
    assert r.on_client_request((7, 1), "put", 0) == []
    assert len(r.cmds) == 1
    assert r.take_replies() == []


def test_duplicate_request_gets_cached_reply():
    r = rep(0)
    r.dedup[(7, 1)] = 42
    r.on_client_request((7, 1), "put", 0)
    assert len(r.cmds) == 0
    (ev,) = r.take_replies()
    assert (ev.kind, ev.req_id, ev.value) == ("reply", (7, 1), 42)


def test_responsive_request_proposes_immediately():
    r = rep(0, mode=RESPONSIVE)
    fill(r, [1, 2, 3])
    r.next_propose = 4
    out = r.on_client_request((7, 1), "put", 0, flush=True)
    props = [m.proposal for m in out if m.proposal]
    assert len(props) == 1 and props[0][0] == 4
    assert props[0][1].batch == ((7, 1, "put"),)
    assert r.next_propose == 7


def test_pulse_carries_whole_buffer():
    r = rep(2)
    assert r.next_propose == 3
    r.on_client_request((1, 1), "a")
    r.on_client_request((1, 2), "b")
    m = r.pulse(1)
    slot, cmd = m.proposal
    assert slot == 3 and cmd.kind == OP and [x[:2] for x in cmd.batch] == [(1, 1), (1, 2)]
    assert m.ack_slot == r.last_ack == 0
    assert r.next_propose == 6
    assert r.log.get(3) == cmd


def test_pulse_with_recover_duty_sends_noop_slot():
    r = rep(2)
    r.next_propose = 6
    p5 = op(1, 0, (4, 4))
    r.pending_recovers[5] = p5
    m = r.pulse(1)
    assert m.recovers == ((5, p5),)
    assert m.noop_slot == 6 and m.proposal is None
    assert r.next_propose == 9


def test_empty_pulse_proposes_noop():
    r = rep(0)
    m = r.pulse(1)
    assert m.proposal[0] == 1 and m.proposal[1].kind == NOOP


def test_second_pulse_in_round_is_refused():
    r = rep(0)
    r.pulse(4)
    with pytest.raises(RoundBudgetError):
        r.pulse(4)
    r.pulse(5)


def test_proposal_advances_ack_and_commit():
    r = rep(1)
    fill(r, [1, 2])
    assert r.last_ack == 2
    r.on_message(msg(2, ack=3, latest=3, proposal=(3, op(2, 0, (9, 1)))), 10)
    assert r.last_ack == 3
    assert r.acked[2] == 3
    assert r.last_commit == 3


def test_proposal_past_a_gap_is_stored_without_ack():
    r = rep(1)
    fill(r, [1, 2, 3])
    r.on_message(msg(2, proposal=(5, op(2, 0, (9, 1)))), 10)
    assert r.log.get(5) is not None
    assert r.last_ack == 3


def test_stale_view_message_is_ignored():
    r = rep(1)
    r.view = r.max_seen_view = 2
    before = (r.snapshot(), r.last_ack, dict(r.acked))
    out = r.on_message(msg(0, view=1, ack=9, latest=9, proposal=(1, op(0, 1, (1, 1)))), 5)
    assert out == []
    assert (r.snapshot(), r.last_ack, dict(r.acked)) == before


def test_equal_view_conflict_is_reported():
    r = rep(1)
    r.on_message(msg(0, proposal=(1, op(0, 0, (1, 1)))), 0)
    r.on_message(msg(0, proposal=(1, op(0, 0, (1, 2)))), 1)
    assert r.violations and "conflict" in r.violations[0]


def _own_at_five():
    r = rep(1)
    fill(r, [1, 2])
    r.next_propose = 5
    r.on_client_request((3, 1), "x")
    r._propose_next(0)
    return r


def test_coordination_timeout_nacks_holes():
    r = _own_at_five()
    assert list(r.own_slots) == [5] and r.last_ack == 2
    assert r.on_coordination_timeout(0) == []    # pulsing defers to the next pulse
    assert r.pulse(1).nacks == (3, 4)


def test_coordination_timeout_reproposes_uncommitted_own_slot():
    r = _own_at_five()
    fill(r, [3, 4])
    assert r.last_ack == 5 and r.last_commit == 0
    r.on_coordination_timeout(0)
    m = r.pulse(1)
    assert m.proposal == (5, r.log.get(5))


def test_own_commit_resets_coordination_timer():
    r = _own_at_five()
    fill(r, [3, 4])
    r.on_message(msg(0, ack=5, latest=5), 3000)
    assert r.last_commit == 5
    assert r.coord_deadline == 3000 + 8 * INTERVAL
    r.tick(3000 + 8 * INTERVAL - 1)
    assert not r.pending_nacks and not r.pending_props


def test_start_view_change_becomes_candidate():
    r = rep(0)
    fill(r, [1, 2, 3])
    r.log.append(5, noop(1, 0))
    r.start_view_change(2, 100)
    assert (r.view, r.role, r.voted_for, r.voted_by) == (1, CANDIDATE, 0, {0})
    assert r.log.get(5) is None and r.next_propose is None
    assert r.last_ack == r.last_commit
    m = r.pulse(1)
    assert m.vc == ViewChangeRequest(1, 3, 0)


def test_candidate_retries_after_backoff():
    r = rep(0)
    r.start_view_change(2, 0)
    lo, hi = r.cfg.backoff
    assert lo * INTERVAL <= r.cand_deadline <= hi * INTERVAL
    r.tick(r.cand_deadline)
    assert r.view == 2 and r.role == CANDIDATE


def _logged(rid, view, upto, n=3):
    r = rep(rid, n=n, mode=RESPONSIVE)
    for s in range(1, upto + 1):
        r.log.append(s, noop(0, view))
    r.view = r.max_seen_view = view
    r._refresh(0)
    return r


def test_vote_for_up_to_date_candidate():
    r = _logged(1, 1, 10)
    out = r.on_view_change_request(ViewChangeRequest(2, 12, 1), 2, 50)
    assert (r.view, r.role, r.voted_for) == (2, FOLLOWER, 2)
    assert [m.vc for m in out if m.vc] == [ViewChangeVote(2, 2)]


def test_refuse_stale_candidate_and_run_higher():
    r = _logged(1, 2, 3)
    r.on_view_change_request(ViewChangeRequest(3, 99, 1), 2, 50)
    assert r.role == CANDIDATE and r.view > 3


def test_request_for_old_view_is_ignored():
    r = _logged(1, 2, 3)
    out = r.on_view_change_request(ViewChangeRequest(2, 50, 2), 0, 50)
    assert all(m.vc is None for m in out)
    assert r.role == FOLLOWER and r.view == 2


def test_single_vote_per_view():
    r = _logged(1, 1, 5)
    r.on_view_change_request(ViewChangeRequest(2, 5, 1), 2, 50)
    r.on_view_change_request(ViewChangeRequest(2, 40, 1), 0, 60)
    assert r.voted_for == 2


def test_quorum_of_votes_elects_initiator():
    r = rep(0, mode=RESPONSIVE)
    fill(r, [1, 2])
    r.start_view_change(None, 0)
    out = r.on_view_change_vote(ViewChangeVote(1, 0), 1, 10)
    assert r.role == INITIATOR and r.view_base == 3
    vi = r.log.get(3)
    assert vi.kind == VIEW_INIT and vi.scheme.base == 4
    assert any(m.proposal == (3, vi) for m in out)
    assert r.next_propose is None


def test_view_init_commit_activates_scheme():
    r = rep(0, mode=RESPONSIVE)
    fill(r, [1, 2])
    r.start_view_change(None, 0)
    r.on_view_change_vote(ViewChangeVote(1, 0), 1, 10)
    r.on_message(msg(1, view=1, ack=3, latest=3), 20)
    assert r.last_commit == 3 and r.vi_committed
    assert r.next_propose == r.scheme.first_owned(0, 4)


def test_votes_below_quorum_or_misaddressed():
    r = rep(0, n=5)
    r.start_view_change(None, 0)
    r.on_view_change_vote(ViewChangeVote(1, 0), 1, 1)
    r.on_view_change_vote(ViewChangeVote(1, 0), 1, 2)
    r.on_view_change_vote(ViewChangeVote(1, 3), 2, 3)
    assert r.role == CANDIDATE and r.voted_by == {0, 1}


def test_switch_to_responsive_flushes_nacks():
    r = rep(1)
    r.pending_nacks.update({3, 4})
    out = r.switch_mode(RESPONSIVE, 0)
    assert r.mode == RESPONSIVE
    assert [m.nacks for m in out if m.nacks] == [(3, 4)]


def test_switch_to_pulsing_waits_and_same_mode_is_noop():
    r = rep(1, mode=RESPONSIVE)
    r.pending_nacks.add(3)
    assert r.switch_mode(PULSING, 0) == []
    assert r.pulse(1).nacks == (3,)
    assert r.switch_mode(PULSING, 0) == []
    with pytest.raises(ValueError):
        r.switch_mode("bursty", 0)


def test_skip_fills_own_slots_up_to_latest():
    r = rep(2)
    r.latest_propose_slot = 12
    assert r.maybe_skip(0) == (3, 12)
    assert [s for s in (3, 6, 9, 12) if r.log.get(s).kind == NOOP] == [3, 6, 9, 12]
    assert r.next_propose == 15


def test_no_skip_when_caught_up():
    r = rep(2)
    r.latest_propose_slot = 3
    assert r.maybe_skip(0) is None
    r.latest_propose_slot = 1
    assert r.maybe_skip(0) is None


def test_peer_skip_becomes_noops():
    r = rep(0)
    r.on_message(msg(2, latest=12, skip=(3, 12)), 0)
    assert all(r.log.get(s) == noop(2, 0) for s in (3, 6, 9, 12))


def test_invariants_hold_through_handlers():
    r = rep(1)
    r.on_message(msg(0, ack=1, proposal=(1, op(0, 0, (1, 1)))), 0)
    r.pulse(1)
    r.on_message(msg(2, ack=3, proposal=(3, op(2, 0, (2, 1)))), 5)
    r.check_invariants()
    assert r.last_commit <= r.last_ack <= r.log.last_append
