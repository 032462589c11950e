"""Comparison protocols running on the same simulator and checker."""

from .mencius import MenciusReplica, mencius_step
from .paxos import PaxosReplica, paxos_step

__all__ = ["MenciusReplica", "PaxosReplica", "mencius_step", "paxos_step"]
