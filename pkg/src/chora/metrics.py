"""Synchrony coefficients, round-length bounds and throughput bounds.

Percentiles use the nearest-rank rule throughout: the ceil(x/100 * n)-th order
statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence


class UndefinedCoefficient(ArithmeticError):
    pass


def _check(samples: Sequence[float], name="samples"):
    if len(samples) == 0:
        raise ValueError(f"{name} is empty")


def percentile(samples: Sequence[float], x: float) -> float:
    """Nearest-rank x-th percentile (0 < x <= 100)."""
    _check(samples)
    if not 0 < x <= 100:
        raise ValueError(f"percentile level {x} outside (0, 100]")
    ordered = sorted(samples)
    # exact rational rank: x/100*n in floating point can land just above an integer
    rank = math.ceil(Fraction(x) * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


def mean(samples: Sequence[float]) -> float:
    _check(samples)
    return math.fsum(samples) / len(samples)


def s_tilde(samples: Sequence[float], x: float) -> float:
    """Conventional synchrony coefficient: mean delay over x-th percentile delay."""
    p = percentile(samples, x)
    if p == 0:
        raise UndefinedCoefficient("x-th percentile is zero")
    return mean(samples) / p


def chora_round_bound(prop, proc, x) -> float:
    # tail excess summed sample by sample, avoiding cancellation in p - mean
    p = percentile(prop, x)
    return math.fsum(p - v for v in prop) / len(prop) + percentile(proc, x)


def s_chora(prop: Sequence[float], proc: Sequence[float], x: float) -> float:
    """Synchrony coefficient for rounds that need not consume same-round messages.

    Denominator is the propagation tail excess plus the processing tail, which
    reduces to the processing mean (so S=1) when both are constant.
    """
    _check(prop, "prop")
    _check(proc, "proc")
    denom = chora_round_bound(prop, proc, x)
    if denom <= 0:
        raise UndefinedCoefficient(f"round bound {denom} is not positive")
    return mean(proc) / denom


def round_bounds(prop: Sequence[float], proc: Sequence[float], x: float) -> tuple[float, float]:
    """(conventional, chora) lower bounds on the round length."""
    _check(prop, "prop")
    _check(proc, "proc")
    conventional = percentile(prop, x) + percentile(proc, x)
    return conventional, chora_round_bound(prop, proc, x)


def tput_bound(work: float, proc: Sequence[float], x: float, prop: Sequence[float] | None = None,
               s: float | None = None) -> float:
    """Throughput upper bound S * W / mean(proc).

    Pass ``s`` directly, or ``prop`` so the coefficient can be computed.
    """
    if s is None:
        if prop is None:
            raise ValueError("need either s or prop samples")
        s = s_chora(prop, proc, x)
    if work == 0:
        return 0.0
    return s * work / mean(proc)


def efficiency_effectiveness(ideal: tuple[float, float], measured: tuple[float, float]):
    """(alpha, beta) = (t_hat / t, r_hat / r)."""
    t_hat, r_hat = ideal
    t, r = measured
    if t <= 0 or r <= 0:
        raise ValueError("measured round length and round count must be positive")
    return t_hat / t, r_hat / r


def kappa(points) -> float:
    """Max alpha*beta over an efficiency-effectiveness curve."""
    pts = list(points)
    if not pts:
        raise ValueError("empty curve")
    return max(a * b for a, b in pts)


@dataclass
class MessageCount:
    broadcasts: int
    copies: int
    commits: int

    @property
    def per_commit(self) -> float:
        return self.broadcasts / self.commits

    @property
    def copies_per_commit(self) -> float:
        return self.copies / self.commits


def msgs_per_commit(trace, include_noops: bool = False, since: int = 0,
                    until: int | None = None) -> MessageCount:
    """Protocol messages per committed slot.

    A multicast counts once (``broadcasts``); ``copies`` counts every
    per-receiver copy. Commits are distinct slots committed on any replica,
    client work only unless ``include_noops``.
    """
    broadcasts = copies = 0
    committed = {}
    for ev in trace:
        if ev.time < since or (until is not None and ev.time > until):
            continue
        if ev.kind == "send" and ev.data.get("proto", 1):
            broadcasts += 1
            copies += ev.data.get("copies", 0)
        elif ev.kind == "commit":
            committed.setdefault(ev.data["slot"], ev.data["cid"])
    n = sum(1 for cid in committed.values()
            if include_noops or str(cid).startswith("op:"))
    if n == 0:
        raise ValueError("no commits in trace")
    return MessageCount(broadcasts, copies, n)


@dataclass
class DelaySamples:
    prop: list = field(default_factory=list)
    proc: list = field(default_factory=list)

    @property
    def combined(self) -> list:
        return [a + b for a, b in zip(self.prop, self.proc)]


@dataclass
class SynchronyReport:
    x: float
    S_tilde: float | None = None
    S: float | None = None
    T_bound_conventional: float | None = None
    T_bound_chora: float | None = None
    tput_bound: float | None = None
    alpha: float | None = None
    beta: float | None = None
    kappa: float | None = None


def synchrony_report(samples: DelaySamples, x: float = 90, work_per_round: float | None = None,
                     round_busy: Sequence[float] | None = None, ideal=None, measured=None
                     ) -> SynchronyReport:
    """Fill whatever fields the available samples support; the rest stay None.

    ``round_busy`` is per-round processing time; when given it replaces the
    per-message processing mean in the throughput bound.
    """
    rep = SynchronyReport(x=x)
    if samples.prop and samples.proc:
        try:
            rep.S_tilde = s_tilde(samples.combined, x)
        except UndefinedCoefficient:
            pass
        rep.T_bound_conventional, rep.T_bound_chora = round_bounds(samples.prop, samples.proc, x)
        try:
            rep.S = s_chora(samples.prop, samples.proc, x)
        except UndefinedCoefficient:
            pass
        if work_per_round is not None and rep.S is not None:
            rep.tput_bound = tput_bound(work_per_round, round_busy or samples.proc, x, s=rep.S)
    if ideal is not None and measured is not None:
        rep.alpha, rep.beta = efficiency_effectiveness(ideal, measured)
        rep.kappa = rep.alpha * rep.beta
    return rep
