"""Threaded rollout pipeline: actor workers, bounded queues, adaptive collection.

Actors produce whole rollout groups into per-actor bounded queues while the
trainer consumes; because queues are pre-filled and actors run continuously,
retrieval of one group naturally overlaps generation of the next.  When
filtering starves the replay buffer, adaptive_sync_collect drains completed
groups synchronously without ever launching work beyond queue capacity.

Throughput acceptance lives in the latency simulation (ztir.simulate); this
module is the functional machinery for running real backends concurrently.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from ztir.backends import GenerationBackend
from ztir.buffer import ReplayBuffer, RewardedGroup
from ztir.model import Problem, RolloutConfig
from ztir.rollout import Executor, run_rollout
from ztir.verify import score_trajectory

logger = logging.getLogger(__name__)

GroupProducer = Callable[[], RewardedGroup]


@dataclass
class ActorState:
    """Shared view of one actor; counters satisfy
    submitted == completed + failed + in_flight under the actor's lock."""

    actor_id: int
    queue_capacity: int
    queue: "queue.Queue[RewardedGroup]" = field(init=False)
    lock: threading.Lock = field(init=False, default_factory=threading.Lock)
    in_flight: int = 0
    submitted: int = 0
    completed: int = 0
    failed: int = 0
    alive: bool = True

    def __post_init__(self) -> None:
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be at least 1")
        self.queue = queue.Queue(maxsize=self.queue_capacity)

    def snapshot(self) -> dict:
        with self.lock:
            return {
                "actor_id": self.actor_id,
                "submitted": self.submitted,
                "completed": self.completed,
                "failed": self.failed,
                "in_flight": self.in_flight,
                "queued": self.queue.qsize(),
                "alive": self.alive,
            }


class _ActorThread(threading.Thread):
    def __init__(self, state: ActorState, produce: GroupProducer, max_retries: int):
        super().__init__(name=f"rollout-actor-{state.actor_id}", daemon=True)
        self.state = state
        self.produce = produce
        self.max_retries = max_retries
        self._halt = threading.Event()

    def stop(self) -> None:
        self._halt.set()

    def run(self) -> None:
        state = self.state
        while not self._halt.is_set():
            with state.lock:
                state.in_flight += 1
                state.submitted += 1
            group: Optional[RewardedGroup] = None
            for attempt in range(self.max_retries + 1):
                if self._halt.is_set():
                    break
                try:
                    group = self.produce()
                    break
                except Exception as exc:
                    logger.warning(
                        "actor %d rollout attempt %d failed: %s",
                        state.actor_id, attempt + 1, exc,
                    )
            if group is None:
                with state.lock:
                    state.in_flight -= 1
                    state.failed += 1
                if self._halt.is_set():
                    break
                continue
            # Bounded handoff: block while the queue is full, still honoring
            # stop requests.
            delivered = False
            while not self._halt.is_set():
                try:
                    state.queue.put(group, timeout=0.05)
                    delivered = True
                    break
                except queue.Full:
                    continue
            with state.lock:
                state.in_flight -= 1
                if delivered:
                    state.completed += 1
                else:
                    state.failed += 1
        with state.lock:
            state.alive = False


class CollectShortfall(Exception):
    """Adaptive collection hit its deadline before filling the buffer."""

    def __init__(self, collected: int, still_needed: int):
        super().__init__(
            f"collected {collected} groups but the buffer still needs "
            f"{still_needed} more members"
        )
        self.collected = collected
        self.still_needed = still_needed


class Pipeline:
    """Owns the actor threads and the trainer-facing collection API."""

    def __init__(
        self,
        producers: Sequence[GroupProducer],
        buffer: ReplayBuffer,
        queue_depth: int = 2,
        max_retries: int = 3,
    ):
        if not producers:
            raise ValueError("need at least one producer")
        self.buffer = buffer
        self.actors = [
            ActorState(actor_id=i, queue_capacity=queue_depth)
            for i in range(len(producers))
        ]
        self._threads = [
            _ActorThread(state, produce, max_retries)
            for state, produce in zip(self.actors, producers)
        ]
        self._rr = 0

    def start(self, prefill: bool = True, prefill_timeout_s: float = 60.0) -> "Pipeline":
        for thread in self._threads:
            thread.start()
        if prefill:
            deadline = time.monotonic() + prefill_timeout_s
            while time.monotonic() < deadline:
                if all(
                    state.queue.full() or not state.alive for state in self.actors
                ):
                    break
                time.sleep(0.005)
        return self

    def stop(self) -> None:
        for thread in self._threads:
            thread.stop()
        for thread in self._threads:
            thread.join(timeout=5)

    def kill_actor(self, actor_id: int) -> None:
        self._threads[actor_id].stop()

    def alive_count(self) -> int:
        return sum(1 for state in self.actors if state.snapshot()["alive"])

    def collect_one(self, timeout_s: float) -> Optional[RewardedGroup]:
        """Round-robin non-blocking sweep, then a short blocking wait."""
        deadline = time.monotonic() + timeout_s
        while True:
            for offset in range(len(self.actors)):
                i = (self._rr + offset) % len(self.actors)
                try:
                    group = self.actors[i].queue.get_nowait()
                    self._rr = (i + 1) % len(self.actors)
                    return group
                except queue.Empty:
                    continue
            if time.monotonic() >= deadline:
                return None
            if all(not state.snapshot()["alive"] for state in self.actors):
                return None
            time.sleep(0.002)

    def conservation(self) -> dict:
        totals = {"submitted": 0, "completed": 0, "failed": 0, "in_flight": 0,
                  "queued": 0}
        for state in self.actors:
            snap = state.snapshot()
            for key in totals:
                totals[key] += snap[key]
        totals["balanced"] = (
            totals["submitted"]
            == totals["completed"] + totals["failed"] + totals["in_flight"]
        )
        return totals


def adaptive_sync_collect(
    buffer: ReplayBuffer,
    pipeline: Pipeline,
    batch_size: Optional[int] = None,
    deadline_s: float = 30.0,
) -> list[RewardedGroup]:
    """Drain completed groups until the buffer can serve one batch.

    Never launches new work: actors already cap their own production at queue
    capacity.  Returns the groups pushed; raises CollectShortfall when the
    deadline passes first.
    """
    collected: list[RewardedGroup] = []
    if not buffer.needs_refill(batch_size):
        return collected
    deadline = time.monotonic() + deadline_s
    while buffer.needs_refill(batch_size):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            size = batch_size if batch_size is not None else buffer.hp.rollout_batch
            raise CollectShortfall(
                collected=len(collected),
                still_needed=size - buffer.pending_count(),
            )
        group = pipeline.collect_one(timeout_s=min(0.1, remaining))
        if group is not None:
            buffer.push_group(group)
            collected.append(group)
        elif pipeline.alive_count() == 0:
            size = batch_size if batch_size is not None else buffer.hp.rollout_batch
            raise CollectShortfall(
                collected=len(collected),
                still_needed=size - buffer.pending_count(),
            )
    return collected


@dataclass
class PipelineReport:
    steps: int
    wall_ms: float
    steps_per_sec: float
    collect_ms: float
    train_ms: float
    groups_consumed: int

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "wall_ms": self.wall_ms,
            "steps_per_sec": self.steps_per_sec,
            "collect_ms": self.collect_ms,
            "train_ms": self.train_ms,
            "groups_consumed": self.groups_consumed,
        }


def run_pipelined(
    pipeline: Pipeline,
    steps: int,
    batch_size: int,
    train_fn: Callable[[list], None],
    collect_deadline_s: float = 30.0,
) -> PipelineReport:
    """Trainer loop: refill the buffer adaptively, then train on one batch."""
    wall_start = time.monotonic()
    collect_total = 0.0
    train_total = 0.0
    consumed = 0
    for _ in range(steps):
        t0 = time.monotonic()
        groups = adaptive_sync_collect(
            pipeline.buffer, pipeline, batch_size, collect_deadline_s
        )
        consumed += len(groups)
        collect_total += time.monotonic() - t0
        batch = pipeline.buffer.next_batch(batch_size)
        t1 = time.monotonic()
        train_fn(batch)
        train_total += time.monotonic() - t1
    wall = (time.monotonic() - wall_start) * 1000.0
    return PipelineReport(
        steps=steps,
        wall_ms=wall,
        steps_per_sec=steps / (wall / 1000.0) if wall else 0.0,
        collect_ms=collect_total * 1000.0,
        train_ms=train_total * 1000.0,
        groups_consumed=consumed,
    )


class ProblemCycler:
    """Thread-safe round-robin over a fixed problem list."""

    def __init__(self, problems: Sequence[Problem]):
        if not problems:
            raise ValueError("need at least one problem")
        self._problems = list(problems)
        self._lock = threading.Lock()
        self._index = 0

    def __call__(self) -> Problem:
        with self._lock:
            problem = self._problems[self._index % len(self._problems)]
            self._index += 1
            return problem


def make_group_producer(
    problem_source: Callable[[], Problem],
    backend_factory: Callable[[Problem], GenerationBackend],
    env: Executor,
    config: RolloutConfig,
    samples_per_prompt: int,
) -> GroupProducer:
    """Bundle rollout + scoring into a producer suitable for an actor."""

    def produce() -> RewardedGroup:
        problem = problem_source()
        members = []
        for sample in range(samples_per_prompt):
            trajectory = run_rollout(backend_factory(problem), problem, env, config)
            record = score_trajectory(
                trajectory, problem, trajectory_id=f"{problem.id}#{sample}"
            )
            members.append((trajectory, record))
        return RewardedGroup.build(problem.id, members)

    return produce
