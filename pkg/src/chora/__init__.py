"""Simulator and checker for the Chora round-based SMR protocol."""

from .core import (
    AssignmentScheme, Command, Log, append, compute_commit, log_up_to_date, quorum_size, slot_owner,
)
from .replica import Replica, ReplicaConfig, RoundMessage

__version__ = "0.1.0"

__all__ = [
    "AssignmentScheme", "Command", "Log", "Replica", "ReplicaConfig", "RoundMessage", "append",
    "compute_commit", "log_up_to_date", "quorum_size", "slot_owner",
]
