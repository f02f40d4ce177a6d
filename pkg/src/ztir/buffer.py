"""Replay buffer with group-accuracy filtering.

Groups whose sample accuracy lands strictly above the high threshold or
strictly below the low one carry no useful contrast and are dropped whole;
boundary accuracies are kept.  Kept groups contribute every member, failed
samples included.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from ztir.model import RLHyperparams, Trajectory
from ztir.verify import RewardRecord

Member = tuple[Trajectory, RewardRecord]


class FilterDecision(str, Enum):
    KEEP = "Keep"
    DROP_HIGH = "DropHigh"
    DROP_LOW = "DropLow"


@dataclass(frozen=True)
class RewardedGroup:
    """All samples drawn for one prompt, with the group's mean reward."""

    problem_id: str
    members: tuple[Member, ...]
    accuracy: float

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("a group needs at least one member")
        for traj, _ in self.members:
            if traj.problem_id != self.problem_id:
                raise ValueError("all members must share the group's problem_id")
        mean = sum(rec.reward for _, rec in self.members) / len(self.members)
        if abs(mean - self.accuracy) > 1e-12:
            raise ValueError("accuracy must equal the mean member reward")

    @classmethod
    def build(cls, problem_id: str, members: Iterable[Member]) -> "RewardedGroup":
        members = tuple(members)
        acc = sum(rec.reward for _, rec in members) / len(members) if members else 0.0
        return cls(problem_id=problem_id, members=members, accuracy=acc)


def filter_group(group: RewardedGroup, low: float, high: float) -> FilterDecision:
    if not 0.0 <= low < high <= 1.0:
        raise ValueError("need 0 <= low < high <= 1")
    if group.accuracy > high:
        return FilterDecision.DROP_HIGH
    if group.accuracy < low:
        return FilterDecision.DROP_LOW
    return FilterDecision.KEEP


class Underflow(Exception):
    """next_batch could not assemble a full batch; collect more rollouts."""

    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} members, only {available} buffered")
        self.requested = requested
        self.available = available


class ReplayBuffer:
    """FIFO over members of kept groups.

    Safe for concurrent producers and a single consumer.  Counters satisfy
    members_in == emitted + dropped + pending at every quiescent point.
    """

    def __init__(self, hyperparams: RLHyperparams | None = None):
        self.hp = hyperparams or RLHyperparams()
        self._lock = threading.Lock()
        self._pending: deque[Member] = deque()
        self._log: list[dict] = []
        self.members_in = 0
        self.members_emitted = 0
        self.members_dropped = 0

    def push_group(self, group: RewardedGroup) -> FilterDecision:
        decision = filter_group(group, self.hp.low_threshold, self.hp.high_threshold)
        with self._lock:
            self.members_in += len(group.members)
            if decision is FilterDecision.KEEP:
                self._pending.extend(group.members)
            else:
                self.members_dropped += len(group.members)
            self._log.append(
                {
                    "problem_id": group.problem_id,
                    "accuracy": group.accuracy,
                    "decision": decision.value,
                }
            )
        return decision

    def next_batch(self, batch_size: int | None = None) -> list[Member]:
        size = batch_size if batch_size is not None else self.hp.rollout_batch
        if size < 1:
            raise ValueError("batch_size must be positive")
        with self._lock:
            if len(self._pending) < size:
                raise Underflow(size, len(self._pending))
            batch = [self._pending.popleft() for _ in range(size)]
            self.members_emitted += size
            return batch

    def needs_refill(self, batch_size: int | None = None) -> bool:
        size = batch_size if batch_size is not None else self.hp.rollout_batch
        with self._lock:
            return len(self._pending) < size

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def conserved(self) -> bool:
        with self._lock:
            return self.members_in == (
                self.members_emitted + self.members_dropped + len(self._pending)
            )

    def decisions(self) -> list[dict]:
        with self._lock:
            return list(self._log)

    def dump_state(self, path: str) -> None:
        """Debugging aid: one JSON summary line per pushed group."""
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.decisions():
                fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
