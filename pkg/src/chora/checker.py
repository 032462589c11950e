"""Safety and progress predicates evaluated over a recorded trace.

Log snapshots are rebuilt by replaying each node's ``append``/``truncate``
events; a snapshot holds a node's gap-free log prefix as slot -> (cid, view).
"""

from __future__ import annotations

from dataclasses import dataclass

from .trace import Trace, split_list

PASS = "PASS"
FAIL = "FAIL"
INCONCLUSIVE = "INCONCLUSIVE"
SKIP = "SKIP"


@dataclass(frozen=True)
class Verdict:
    name: str
    status: str
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != FAIL

    def line(self) -> str:
        return f"CHECK {self.name} {self.status}" + (f" {self.detail}" if self.detail else "")


@dataclass
class Snapshot:
    time: int
    logs: dict            # node -> {slot: (cid, view)} over the gap-free prefix
    label: str = ""
    node: int | None = None
    view: int | None = None


class LogReplay:
    """Per-node sparse logs rebuilt from the trace."""

    def __init__(self):
        self.logs = {}

    def apply(self, ev):
        if ev.kind == "append":
            self.logs.setdefault(ev.node, {})[ev.data["slot"]] = (ev.data["cid"], ev.data["view"])
        elif ev.kind == "truncate":
            self.logs.get(ev.node, {}).pop(ev.data["slot"], None)

    def prefix(self, node) -> dict:
        log = self.logs.get(node, {})
        out = {}
        s = 1
        while s in log:
            out[s] = log[s]
            s += 1
        return out

    def snapshot(self, time, label="", node=None, view=None, nodes=None) -> Snapshot:
        nodes = self.logs.keys() if nodes is None else nodes
        return Snapshot(time, {n: self.prefix(n) for n in nodes}, label, node, view)


def take_snapshots(trace, every: int | None = None) -> list[Snapshot]:
    """Snapshots at each election (initiator only), each crash, periodically, and at the end."""
    replay = LogReplay()
    crashed = set()
    snaps = []
    events = list(trace)
    end = events[-1].time if events else 0
    if every is None:
        every = max(end // 8, 1)
    next_cp = every
    for ev in events:
        while ev.time > next_cp:
            snaps.append(replay.snapshot(next_cp, "periodic", nodes=set(replay.logs) - crashed))
            next_cp += every
        replay.apply(ev)
        if ev.kind == "elect":
            snaps.append(replay.snapshot(ev.time, "elect", ev.node, ev.data["view"], nodes=[ev.node]))
        elif ev.kind == "crash":
            crashed.add(ev.node)
    snaps.append(replay.snapshot(end, "end", nodes=set(replay.logs) - crashed))
    return snaps


def check_commit_uniqueness(trace) -> Verdict:
    seen = {}
    for ev in trace:
        if ev.kind != "commit":
            continue
        slot, cid = ev.data["slot"], ev.data["cid"]
        prev = seen.setdefault(slot, (cid, ev.node, ev.time))
        if prev[0] != cid:
            return Verdict("commit_uniqueness", FAIL,
                           f"slot={slot} {prev[0]}@r{prev[1]} vs {cid}@r{ev.node}")
    return Verdict("commit_uniqueness", PASS, f"slots={len(seen)}")


def _pair_mismatch(a: dict, b: dict):
    common = [s for s in a if s in b and a[s] == b[s]]
    if not common:
        return None
    top = max(common)
    for s in range(1, top + 1):
        if a.get(s) != b.get(s):
            return top, s
    return None


def check_log_matching(snapshots) -> Verdict:
    for snap in snapshots:
        nodes = sorted(snap.logs)
        for i, x in enumerate(nodes):
            for y in nodes[i + 1:]:
                bad = _pair_mismatch(snap.logs[x], snap.logs[y])
                if bad is not None:
                    top, s = bad
                    return Verdict("log_matching", FAIL,
                                   f"t={snap.time} r{x},r{y} agree at slot={top} differ at slot={s}")
    return Verdict("log_matching", PASS, f"snapshots={len(snapshots)}")


def _views_ok(views) -> str | None:
    done = set()
    prev = None
    for i, v in enumerate(views):
        if prev is not None and v < prev:
            return f"view {v} after {prev} at position {i + 1}"
        if v != prev:
            if v in done:
                return f"view {v} not contiguous"
            if prev is not None:
                done.add(prev)
        prev = v
    return None


def check_monotone_views(snapshots) -> Verdict:
    for snap in snapshots:
        for node, log in snap.logs.items():
            why = _views_ok([log[s][1] for s in sorted(log)])
            if why:
                return Verdict("monotone_views", FAIL, f"t={snap.time} r{node}: {why}")
    return Verdict("monotone_views", PASS)


def check_initiator_completeness(trace, snapshots) -> Verdict:
    """Every command committed while in view v is in the election log of each later initiator."""
    commits = {}
    for ev in trace:
        if ev.kind == "commit":
            rv = ev.data.get("rv", ev.data["view"])
            key = (ev.data["slot"], ev.data["cid"])
            commits[key] = min(rv, commits.get(key, rv))
    elections = {}
    for ev in trace:
        if ev.kind == "elect":
            elections.setdefault(ev.data["view"], ev.node)
    snaps = {(s.view, s.node): s for s in snapshots if s.label == "elect"}
    if elections and not snaps:
        return Verdict("initiator_completeness", INCONCLUSIVE, "no election snapshots")
    missing = [v for v, n in elections.items() if (v, n) not in snaps]
    if missing:
        return Verdict("initiator_completeness", INCONCLUSIVE, f"missing snapshot for views {missing}")
    for (view, node), snap in sorted(snaps.items()):
        log = snap.logs[node]
        for (slot, cid), rv in commits.items():
            if rv < view:
                have = log.get(slot)
                if have is None or have[0] != cid:
                    return Verdict("initiator_completeness", FAIL,
                                   f"view={view} initiator=r{node} lacks slot={slot} {cid}")
    return Verdict("initiator_completeness", PASS, f"elections={len(snaps)}")


def check_execution_consistency(trace) -> Verdict:
    """Commit/execute order per node is the common slot order, and no request runs twice."""
    common = {}
    next_slot = {}
    last_exec = {}
    where = {}
    for ev in trace:
        if ev.kind == "commit":
            slot, cid = ev.data["slot"], ev.data["cid"]
            if common.setdefault(slot, cid) != cid:
                return Verdict("execution_consistency", FAIL, f"slot={slot} diverges at r{ev.node}")
            want = next_slot.get(ev.node, 1)
            if slot != want:
                return Verdict("execution_consistency", FAIL,
                               f"r{ev.node} committed slot={slot} expecting slot={want}")
            next_slot[ev.node] = slot + 1
        elif ev.kind == "execute":
            slot = ev.data["slot"]
            if slot <= last_exec.get(ev.node, 0):
                return Verdict("execution_consistency", FAIL,
                               f"r{ev.node} executed slot={slot} after slot={last_exec[ev.node]}")
            if next_slot.get(ev.node, 1) <= slot:
                return Verdict("execution_consistency", FAIL,
                               f"r{ev.node} executed slot={slot} before committing it")
            last_exec[ev.node] = slot
            for rid in split_list(ev.data.get("reqs")):
                prev = where.setdefault(rid, {})
                if ev.node in prev or any(s != slot for s in prev.values()):
                    return Verdict("execution_consistency", FAIL, f"request {rid} executed twice")
                prev[ev.node] = slot
    return Verdict("execution_consistency", PASS, f"requests={len(where)}")


@dataclass
class ProgressSpec:
    """Where and how tightly progress is checked.

    ``windows`` are (start, end) intervals of declared synchrony. A request
    proposed at t inside a window must commit by t + ``bound``.
    """
    windows: list
    bound: int


def _rids_of(cid: str) -> list[str]:
    parts = cid.split(":")
    return parts[3].split("+") if parts[0] == "op" and len(parts) > 3 else []


def check_progress(trace, spec: ProgressSpec | None) -> Verdict:
    if spec is None or not spec.windows:
        return Verdict("progress", SKIP, "no synchronous window declared")
    proposed = {}
    committed = {}
    for ev in trace:
        if ev.kind == "append" and ev.data.get("src") == "propose":
            cid = ev.data["cid"]
            if cid.startswith("op:") and int(cid.split(":")[1]) == ev.node:
                proposed.setdefault((ev.data["slot"], cid), ev.time)
        elif ev.kind == "commit":
            committed.setdefault((ev.data["slot"], ev.data["cid"]), ev.time)
    checked = 0
    worst = None
    for key, t in sorted(proposed.items(), key=lambda kv: kv[1]):
        win = next((w for w in spec.windows if w[0] <= t and t + spec.bound <= w[1]), None)
        if win is None:
            continue
        checked += 1
        done = committed.get(key)
        if done is None or done - t > spec.bound:
            late = "never" if done is None else f"after {done - t}ns"
            if worst is None:
                worst = (t, key, late)
    if worst is not None:
        t, (slot, cid), late = worst
        return Verdict("progress", FAIL,
                       f"oldest pending slot={slot} proposed t={t} committed {late} bound={spec.bound}")
    return Verdict("progress", PASS, f"checked={checked} bound={spec.bound}")


SAFETY = ("commit_uniqueness", "log_matching", "monotone_views", "initiator_completeness",
          "execution_consistency")


def run_checks(trace, progress: ProgressSpec | None = None, snapshots=None) -> list[Verdict]:
    if snapshots is None:
        snapshots = take_snapshots(trace)
    return [
        check_commit_uniqueness(trace),
        check_log_matching(snapshots),
        check_monotone_views(snapshots),
        check_initiator_completeness(trace, snapshots),
        check_execution_consistency(trace),
        check_progress(trace, progress),
    ]


def all_pass(verdicts) -> bool:
    return all(v.ok for v in verdicts)


def safety_pass(verdicts) -> bool:
    return all(v.ok for v in verdicts if v.name in SAFETY)


def format_report(verdicts) -> str:
    lines = [v.line() for v in verdicts]
    lines.append("SUMMARY " + ("PASS" if all_pass(verdicts) else "FAIL"))
    return "\n".join(lines) + "\n"


def check_trace(trace: Trace, progress: ProgressSpec | None = None) -> list[Verdict]:
    return run_checks(trace, progress)
