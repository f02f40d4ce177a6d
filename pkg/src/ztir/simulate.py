"""Deterministic latency simulation of the rollout pipeline.

Three trainer modes over the same actor model:
  - sync: submit, wait for the rollout, retrieve, train, fully serialized;
  - basic_async: actors produce into pre-filled bounded queues continuously,
    but the trainer still serializes retrieve, train, submit;
  - pipelined: retrieval and submission run concurrently with training, so
    the steady-state step cost is the max of the three phases (or the actor
    capacity bound when generation is the bottleneck).

The simulation runs on a virtual clock with a seeded RNG, so identical
profiles yield identical event traces; throughput claims are reproducible
without real inference hardware.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Optional, Union

Latency = Union[float, int, dict]

SIM_MODES = ("sync", "basic_async", "pipelined")


@dataclass(frozen=True)
class SimProfile:
    """Latency model: fixed numbers or {"mean": m, "jitter": j} for uniform
    draws in [m-j, m+j]."""

    gen_latency_ms: Latency = 100.0
    exec_latency_ms: Latency = 50.0
    actors: int = 4
    seed: int = 0
    queue_depth: int = 2
    train_ms: float = 60.0
    retrieve_ms: float = 15.0
    submit_ms: float = 15.0

    def __post_init__(self) -> None:
        if self.actors < 1:
            raise ValueError("need at least one actor")
        if self.queue_depth < 0:
            raise ValueError("queue_depth must be non-negative")

    @classmethod
    def from_json(cls, path: str) -> "SimProfile":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(**data)

    def to_json(self, path: str) -> None:
        body = {
            "gen_latency_ms": self.gen_latency_ms,
            "exec_latency_ms": self.exec_latency_ms,
            "actors": self.actors,
            "seed": self.seed,
            "queue_depth": self.queue_depth,
            "train_ms": self.train_ms,
            "retrieve_ms": self.retrieve_ms,
            "submit_ms": self.submit_ms,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(body, fh, indent=2)
            fh.write("\n")


@dataclass
class ThroughputReport:
    mode: str
    steps: int
    wall_ms: float
    steps_per_sec: float
    gen_utilization: float
    exec_utilization: float
    groups_submitted: int = 0
    groups_completed: int = 0
    groups_failed: int = 0
    groups_in_flight: int = 0
    trace: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "steps": self.steps,
            "wall_ms": self.wall_ms,
            "steps_per_sec": self.steps_per_sec,
            "gen_utilization": self.gen_utilization,
            "exec_utilization": self.exec_utilization,
        }


class _Draw:
    def __init__(self, seed: int):
        self._rng = random.Random(seed)

    def sample(self, spec: Latency) -> float:
        if isinstance(spec, (int, float)):
            return float(spec)
        mean = float(spec["mean"])
        jitter = float(spec.get("jitter", 0.0))
        if jitter == 0.0:
            return mean
        return self._rng.uniform(mean - jitter, mean + jitter)


class _ActorPool:
    """Continuous producers with bounded completion queues.

    Each actor keeps one rollout in flight while its queue has room; a
    completed group waits on the actor (blocking it) when the queue is full.
    """

    def __init__(self, profile: SimProfile, draw: _Draw, trace: list):
        self.profile = profile
        self.draw = draw
        self.trace = trace
        n = profile.actors
        self.queues: list[list[tuple[float, float]]] = [[] for _ in range(n)]
        self.alive = [True] * n
        self.producing_until = [0.0] * n
        self.producing = [False] * n
        self.blocked: list[Optional[tuple[float, float]]] = [None] * n
        self.heap: list[tuple[float, int, int]] = []
        self._seq = 0
        self._pending_durations: dict[int, tuple[float, float]] = {}
        self.gen_busy = 0.0
        self.exec_busy = 0.0
        self.submitted = 0
        self.completed = 0
        self.failed = 0
        self._rr = 0

    def prefill(self) -> None:
        for i in range(self.profile.actors):
            for _ in range(self.profile.queue_depth):
                gen = self.draw.sample(self.profile.gen_latency_ms)
                ex = self.draw.sample(self.profile.exec_latency_ms)
                self.queues[i].append((gen, ex))
                self.submitted += 1
                self.completed += 1
        self.trace.append((0.0, "prefill", self.submitted))

    def start_production(self, actor: int, now: float) -> None:
        if not self.alive[actor] or self.producing[actor] or self.blocked[actor]:
            return
        if len(self.queues[actor]) >= self.profile.queue_depth > 0:
            return
        if self.profile.queue_depth == 0:
            return
        gen = self.draw.sample(self.profile.gen_latency_ms)
        ex = self.draw.sample(self.profile.exec_latency_ms)
        self.producing[actor] = True
        self.producing_until[actor] = now + gen + ex
        self.submitted += 1
        self._push(now + gen + ex, actor)
        self.trace.append((now, "submit", actor))
        self._pending_durations[actor] = (gen, ex)

    def _push(self, when: float, actor: int) -> None:
        heapq.heappush(self.heap, (when, self._seq, actor))
        self._seq += 1

    def advance_to(self, now: float) -> None:
        """Apply all completion events at or before `now`."""
        while self.heap and self.heap[0][0] <= now:
            when, _, actor = heapq.heappop(self.heap)
            if not self.alive[actor] or not self.producing[actor]:
                continue
            self.producing[actor] = False
            gen, ex = self._pending_durations.pop(actor)
            self.gen_busy += gen
            self.exec_busy += ex
            self.completed += 1
            self.trace.append((when, "complete", actor))
            if len(self.queues[actor]) < self.profile.queue_depth:
                self.queues[actor].append((gen, ex))
                self.start_production(actor, when)
            else:
                self.blocked[actor] = (gen, ex)

    def next_completion_time(self) -> Optional[float]:
        while self.heap:
            when, _, actor = self.heap[0]
            if self.alive[actor] and self.producing[actor]:
                return when
            heapq.heappop(self.heap)
        return None

    def any_ready(self) -> Optional[int]:
        for offset in range(self.profile.actors):
            i = (self._rr + offset) % self.profile.actors
            if self.queues[i]:
                self._rr = (i + 1) % self.profile.actors
                return i
        return None

    def dequeue(self, actor: int, now: float) -> None:
        self.queues[actor].pop(0)
        self.trace.append((now, "retrieve", actor))
        if self.blocked[actor] is not None:
            self.queues[actor].append(self.blocked[actor])
            self.blocked[actor] = None
            self.start_production(actor, now)
        else:
            self.start_production(actor, now)

    def kill(self, actor: int, now: float) -> None:
        if not self.alive[actor]:
            return
        self.alive[actor] = False
        if self.producing[actor]:
            self.producing[actor] = False
            self._pending_durations.pop(actor, None)
            self.failed += 1
        if self.blocked[actor] is not None:
            self.blocked[actor] = None
        self.trace.append((now, "kill", actor))

    def alive_count(self) -> int:
        return sum(self.alive)


def _simulate_sync(
    profile: SimProfile, steps: int, kill_at: Optional[tuple[float, int]], trace: list
) -> ThroughputReport:
    draw = _Draw(profile.seed)
    now = 0.0
    gen_busy = exec_busy = 0.0
    submitted = completed = failed = 0
    alive = [True] * profile.actors
    rr = 0
    for step in range(steps):
        if kill_at and now >= kill_at[0] and alive[kill_at[1] % profile.actors]:
            alive[kill_at[1] % profile.actors] = False
            trace.append((now, "kill", kill_at[1] % profile.actors))
        while not alive[rr % profile.actors]:
            rr += 1
        actor = rr % profile.actors
        rr += 1
        now += profile.submit_ms
        gen = draw.sample(profile.gen_latency_ms)
        ex = draw.sample(profile.exec_latency_ms)
        submitted += 1
        now += gen + ex
        gen_busy += gen
        exec_busy += ex
        completed += 1
        now += profile.retrieve_ms
        now += profile.train_ms
        trace.append((now, "step_done", step))
    wall = now
    return ThroughputReport(
        mode="sync",
        steps=steps,
        wall_ms=wall,
        steps_per_sec=steps / (wall / 1000.0) if wall else 0.0,
        gen_utilization=gen_busy / (profile.actors * wall) if wall else 0.0,
        exec_utilization=exec_busy / (profile.actors * wall) if wall else 0.0,
        groups_submitted=submitted,
        groups_completed=completed,
        groups_failed=failed,
        trace=tuple(trace),
    )


def _simulate_async(
    profile: SimProfile,
    steps: int,
    pipelined: bool,
    kill_at: Optional[tuple[float, int]],
    trace: list,
) -> ThroughputReport:
    if profile.queue_depth == 0:
        # Degenerate configuration: nothing can buffer, so both async modes
        # collapse to the synchronous schedule.
        report = _simulate_sync(profile, steps, kill_at, trace)
        report.mode = "pipelined" if pipelined else "basic_async"
        return report

    draw = _Draw(profile.seed)
    pool = _ActorPool(profile, draw, trace)
    pool.prefill()
    now = 0.0
    for i in range(profile.actors):
        pool.start_production(i, now)

    def maybe_kill(t: float) -> None:
        if kill_at and t >= kill_at[0]:
            pool.kill(kill_at[1] % profile.actors, t)

    def wait_for_group(t: float) -> tuple[float, int]:
        """Advance time until some queue is non-empty; returns (time, actor)."""
        while True:
            maybe_kill(t)
            pool.advance_to(t)
            ready = pool.any_ready()
            if ready is not None:
                return t, ready
            nxt = pool.next_completion_time()
            if nxt is None:
                raise RuntimeError("starved: no actors producing and queues empty")
            if kill_at and kill_at[0] > t and kill_at[0] < nxt:
                t = kill_at[0]
            else:
                t = nxt

    for step in range(steps):
        if pipelined:
            # retrieve for the next step and submit replacements run while
            # training; the step costs the slowest of the three phases.
            t_ready, actor = wait_for_group(now)
            retrieve_done = t_ready + profile.retrieve_ms
            pool.dequeue(actor, retrieve_done)
            submit_done = now + profile.submit_ms
            train_done = now + profile.train_ms
            now = max(train_done, retrieve_done, submit_done)
        else:
            t_ready, actor = wait_for_group(now)
            retrieve_done = t_ready + profile.retrieve_ms
            pool.dequeue(actor, retrieve_done)
            now = retrieve_done + profile.train_ms + profile.submit_ms
        maybe_kill(now)
        pool.advance_to(now)
        trace.append((now, "step_done", step))

    wall = now
    return ThroughputReport(
        mode="pipelined" if pipelined else "basic_async",
        steps=steps,
        wall_ms=wall,
        steps_per_sec=steps / (wall / 1000.0) if wall else 0.0,
        gen_utilization=pool.gen_busy / (profile.actors * wall) if wall else 0.0,
        exec_utilization=pool.exec_busy / (profile.actors * wall) if wall else 0.0,
        groups_submitted=pool.submitted,
        groups_completed=pool.completed,
        groups_failed=pool.failed,
        groups_in_flight=sum(pool.producing),
        trace=tuple(trace),
    )


def simulate(
    profile: SimProfile,
    mode: str,
    steps: int,
    kill_actor_at: Optional[tuple[float, int]] = None,
) -> ThroughputReport:
    """Run one mode for `steps` trainer steps; deterministic per profile."""
    if mode not in SIM_MODES:
        raise ValueError(f"mode must be one of {SIM_MODES}")
    trace: list = []
    if mode == "sync":
        return _simulate_sync(profile, steps, kill_actor_at, trace)
    return _simulate_async(profile, steps, mode == "pipelined", kill_actor_at, trace)


def compare_modes(
    profile: SimProfile, steps: int, modes: tuple[str, ...] = SIM_MODES
) -> dict[str, ThroughputReport]:
    return {mode: simulate(profile, mode, steps) for mode in modes}
