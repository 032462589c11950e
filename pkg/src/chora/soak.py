"""Randomized scenario families for the safety soak and mutation hunts.

Each family maps (replica count, seed) to a short scenario; the seed also
picks the family's free parameters (drop rate, crash victim and time, ...)
so that a thousand seeds cover a thousand distinct fault schedules.
"""

from __future__ import annotations

import random
from dataclasses import replace

from . import checker
from .harness import Fault, Scenario, default_delay, run_scenario

FAMILIES = ("lossless-pulsing", "drops", "responsive", "mode-flapping", "crash-view-change",
            "dueling-candidates", "partition-heal")

# harsher schedules used only when hunting seeded mutations
HUNT_FAMILIES = FAMILIES + ("chaos",)

SOAK_DURATION = 120_000


def _base(n: int, protocol="chora-pulsing", duration=SOAK_DURATION) -> Scenario:
    return Scenario(protocol=protocol, replicas=n, clients=3 * n, duration=duration,
                    delay=default_delay(), ideal=False, check=True)


def family_scenario(family: str, n: int, seed: int, duration: int = SOAK_DURATION) -> Scenario:
    rng = random.Random(f"{family}:{n}:{seed}")
    sc = _base(n, duration=duration)
    lo, hi = duration // 5, duration // 2
    if family == "lossless-pulsing":
        pass
    elif family == "drops":
        sc.delay.drop_rate = round(rng.uniform(0.01, 0.10), 4)
    elif family == "responsive":
        sc = replace(sc, protocol="chora-responsive")
    elif family == "mode-flapping":
        t, mode, faults = lo // 2, "responsive", []
        while t < duration - lo // 2:
            faults.append(Fault(t, "switch-mode", (mode,)))
            mode = "pulsing" if mode == "responsive" else "responsive"
            t += rng.randrange(5_000, 20_000)
        sc = replace(sc, protocol=rng.choice(["chora-pulsing", "chora-responsive"]), faults=faults)
    elif family == "crash-view-change":
        sc = replace(sc, protocol=rng.choice(["chora-pulsing", "chora-responsive"]),
                     faults=[Fault(rng.randrange(lo, hi), "crash", (rng.randrange(n),))])
    elif family == "dueling-candidates":
        # every survivor suspects at once and stands immediately; back-off breaks ties
        sc = replace(sc, candidacy_jitter=0,
                     faults=[Fault(rng.randrange(lo, hi), "crash", (rng.randrange(n),))])
    elif family == "partition-heal":
        f = (n - 1) // 2
        minority = tuple(sorted(rng.sample(range(n), rng.randint(1, f))))
        majority = tuple(i for i in range(n) if i not in minority)
        start = rng.randrange(lo, hi)
        heal = start + rng.randrange(10_000, 30_000)
        sc = replace(sc, protocol=rng.choice(["chora-pulsing", "chora-responsive"]),
                     faults=[Fault(start, "partition", (minority, majority, heal))])
    elif family == "chaos":
        # drops plus a train of partitions with shifting minorities
        sc.delay.drop_rate = round(rng.uniform(0.02, 0.08), 4)
        f = (n - 1) // 2
        faults, t = [], lo // 2
        while t < duration - lo:
            minority = tuple(sorted(rng.sample(range(n), rng.randint(1, f))))
            majority = tuple(i for i in range(n) if i not in minority)
            heal = t + rng.randrange(8_000, 25_000)
            faults.append(Fault(t, "partition", (minority, majority, heal)))
            t = heal + rng.randrange(2_000, 10_000)
        sc = replace(sc, protocol=rng.choice(["chora-pulsing", "chora-responsive"]), faults=faults)
    else:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return sc


def baseline_scenario(protocol: str, family: str, n: int, seed: int,
                      duration: int = SOAK_DURATION) -> Scenario:
    """A family member replayed on a comparison protocol.

    Baselines have a single mode, so mode switches are dropped, and the
    Paxos leader (replica 0) is never the crash victim.
    """
    sc = family_scenario(family, n, seed, duration)
    faults = []
    for f in sc.faults:
        if f.action == "switch-mode":
            continue
        if f.action == "crash" and protocol == "multipaxos" and f.args[0] == 0:
            f = Fault(f.time, "crash", (1 + seed % (n - 1),))
        faults.append(f)
    return replace(sc, protocol=protocol, faults=faults)


def soak_one(family: str, n: int, seed: int, mutations=(), duration: int = SOAK_DURATION):
    """Run one family member; returns the checker verdicts."""
    sc = family_scenario(family, n, seed, duration)
    if mutations:
        sc = replace(sc, mutations=tuple(mutations))
    res, _ = run_scenario(sc, seed, check=True)
    return res.verdicts


def soak(families=FAMILIES, ns=(3, 5, 7), seeds=range(1000), duration: int = SOAK_DURATION):
    """Safety soak; returns {(family, n): [failing seeds]}."""
    failures = {}
    for fam in families:
        for n in ns:
            bad = []
            for seed in seeds:
                if not checker.safety_pass(soak_one(fam, n, seed, duration=duration)):
                    bad.append(seed)
            failures[(fam, n)] = bad
    return failures


def hunt(mutation: str, families=HUNT_FAMILIES, ns=(3, 5), seeds=range(50)):
    """First (family, n, seed, verdict) where the checker suite catches ``mutation``."""
    for seed in seeds:
        for fam in families:
            for n in ns:
                verdicts = soak_one(fam, n, seed, mutations=(mutation,))
                failed = [v for v in verdicts if not v.ok]
                if failed:
                    return fam, n, seed, failed[0]
    return None
