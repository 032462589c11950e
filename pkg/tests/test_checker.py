from chora import checker
from chora.checker import (
    FAIL, INCONCLUSIVE, PASS, SKIP, ProgressSpec, Snapshot, check_commit_uniqueness,
    check_execution_consistency, check_initiator_completeness, check_log_matching,
    check_monotone_views, check_progress, take_snapshots,
)
from chora.harness import Fault, Scenario, run_scenario
from chora.trace import Trace


def commits(*rows):
    tr = Trace()
    for t, node, slot, cid in rows:
        tr.emit(t, "commit", node, slot=slot, cid=cid, view=0, rv=0)
    return tr


def snap(*logs, time=0):
    return [Snapshot(time, {i: log for i, log in enumerate(logs)})]


def test_uniqueness_pass_and_vacuous():
    tr = commits(*[(10 + n, n, s, f"c{s}") for n in range(3) for s in (1, 2, 3)])
    assert check_commit_uniqueness(tr).status == PASS
    assert check_commit_uniqueness(Trace()).status == PASS


def test_uniqueness_fail_names_slot():
    tr = commits((1, 0, 3, "c"), (2, 1, 3, "d"))
    v = check_commit_uniqueness(tr)
    assert v.status == FAIL and "slot=3" in v.detail


def test_log_matching_examples():
    log = {1: ("a", 1), 2: ("b", 1), 5: ("e", 1)}
    assert check_log_matching(snap(log, dict(log))).status == PASS
    other = {1: ("a", 1), 2: ("x", 1), 5: ("e", 1)}
    v = check_log_matching(snap(log, other))
    assert v.status == FAIL and "slot=5" in v.detail and "slot=2" in v.detail
    assert check_log_matching(snap({1: ("a", 0)}, {2: ("b", 0)})).status == PASS


def test_monotone_views_examples():
    def views(*vs):
        return snap({i + 1: (f"c{i}", v) for i, v in enumerate(vs)})
    assert check_monotone_views(views(1, 1, 2, 2)).status == PASS
    assert check_monotone_views(views(1, 2, 1)).status == FAIL
    assert check_monotone_views(snap({})).status == PASS


def _election_trace(initiator_has_commit):
    tr = Trace()
    tr.emit(0, "append", 0, slot=1, cid="op:0:0:1.1", view=0, src="propose")
    tr.emit(1, "commit", 0, slot=1, cid="op:0:0:1.1", view=0, rv=0)
    if initiator_has_commit:
        tr.emit(2, "append", 1, slot=1, cid="op:0:0:1.1", view=0, src="deliver")
    tr.emit(3, "crash", 0)
    tr.emit(5, "elect", 1, view=1, base=2, scheme="1.2@3", la=1)
    return tr


def test_initiator_completeness_vacuous_and_fixture():
    tr = commits((1, 0, 1, "c"))
    assert check_initiator_completeness(tr, take_snapshots(tr)).status == PASS
    good = _election_trace(True)
    assert check_initiator_completeness(good, take_snapshots(good)).status == PASS
    bad = _election_trace(False)
    v = check_initiator_completeness(bad, take_snapshots(bad))
    assert v.status == FAIL and "slot=1" in v.detail


def test_initiator_completeness_needs_election_snapshots():
    tr = _election_trace(True)
    assert check_initiator_completeness(tr, []).status == INCONCLUSIVE


def test_initiator_completeness_after_simulated_crash():
    sc = Scenario(replicas=3, duration=200_000, clients=9, ideal=False,
                  faults=[Fault(60_000, "crash", (0,))])
    res, tr = run_scenario(sc, 1)
    names = {v.name: v.status for v in res.verdicts}
    assert any(e.kind == "elect" for e in tr)
    assert names["initiator_completeness"] == PASS
    assert res.safety_pass


def _exec_trace(order, reqs=None):
    tr = Trace()
    for n in range(2):
        for t, s in enumerate(order):
            tr.emit(t, "commit", n, slot=s, cid=f"c{s}", view=0, rv=0)
            tr.emit(t, "execute", n, slot=s, reqs=(reqs or {}).get(s, [f"{s}.1"]))
    return tr


def test_execution_consistency_examples():
    assert check_execution_consistency(_exec_trace([1, 2, 3])).status == PASS
    assert check_execution_consistency(_exec_trace([1, 3, 2])).status == FAIL
    dup = _exec_trace([1, 2, 3], {1: ["9.9"], 3: ["9.9"]})
    v = check_execution_consistency(dup)
    assert v.status == FAIL and "9.9" in v.detail


def test_progress_lossless_run_passes():
    res, _ = run_scenario(Scenario(replicas=3, duration=150_000, ideal=False), 2)
    v = {x.name: x for x in res.verdicts}["progress"]
    assert v.status == PASS and "checked=" in v.detail


def test_progress_drop_window_is_exempt():
    sc = Scenario(replicas=3, duration=80_000, ideal=False)
    sc.delay.drop_rate = 0.3
    res, _ = run_scenario(sc, 0)
    assert {x.name: x.status for x in res.verdicts}["progress"] == SKIP


def test_progress_stalled_fixture_fails():
    tr = Trace()
    tr.emit(100, "append", 0, slot=1, cid="op:0:0:1.1", view=0, src="propose")
    tr.emit(200, "append", 1, slot=2, cid="op:1:0:2.1", view=0, src="propose")
    tr.emit(300, "commit", 1, slot=2, cid="op:1:0:2.1", view=0, rv=0)
    v = check_progress(tr, ProgressSpec([(0, 10_000)], 1000))
    assert v.status == FAIL and "slot=1" in v.detail and "never" in v.detail
    assert check_progress(tr, None).status == SKIP


def test_report_format():
    vs = checker.run_checks(commits((1, 0, 1, "c")))
    text = checker.format_report(vs)
    assert text.splitlines()[0] == "CHECK commit_uniqueness PASS slots=1"
    assert text.endswith("SUMMARY PASS\n")
