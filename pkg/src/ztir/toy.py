"""Desk-scale learnable policy over two action templates.

The policy chooses between answering directly (a configurable-accuracy guess)
and writing code whose echoed tool output becomes the answer.  Trajectories
are produced by the real rollout engine with an in-process executor, scored
by the real verifier, filtered by the real replay rules, and credited by the
real advantage layer, so the training dynamics exercise the whole stack.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from ztir.advantage import (
    BaselineMode,
    RunningMean,
    StepRecord,
    reinforce_advantage,
)
from ztir.backends import BackendCapabilities, Generation, SamplingParams
from ztir.buffer import FilterDecision, RewardedGroup, filter_group
from ztir.model import Origin, Problem, RolloutConfig, Trajectory
from ztir.rollout import run_rollout
from ztir.sandbox.client import StubExecClient
from ztir.verify import score_trajectory


class Action(str, Enum):
    DIRECT_GUESS = "DirectGuess"
    WRITE_CODE = "WriteCodeThenAnswer"


_ACTIONS = (Action.DIRECT_GUESS, Action.WRITE_CODE)


@dataclass
class ToyPolicy:
    """Softmax over the two templates; theta is the only learnable state."""

    theta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    temperature: float = 1.0
    learning_rate: float = 0.05

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (2,):
            raise ValueError("theta must have one entry per action template")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def probs(self) -> np.ndarray:
        z = self.theta / self.temperature
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def p_write_code(self) -> float:
        return float(self.probs()[1])

    def sample(self, rng: random.Random) -> Action:
        return Action.WRITE_CODE if rng.random() < self.p_write_code() else Action.DIRECT_GUESS

    def logp(self, action: Action) -> float:
        return float(np.log(self.probs()[_ACTIONS.index(action)]))

    def grad_logp(self, action: Action) -> np.ndarray:
        onehot = np.zeros(2)
        onehot[_ACTIONS.index(action)] = 1.0
        return (onehot - self.probs()) / self.temperature


def toy_update(
    policy: ToyPolicy, batch: Sequence[tuple[Trajectory, float]]
) -> ToyPolicy:
    """theta += lr * sum_i advantage_i * grad log pi(action_i), in place.

    The action is read off the trajectory: any executed tool call means
    WriteCodeThenAnswer.
    """
    grad = np.zeros(2)
    for trajectory, advantage in batch:
        action = Action.WRITE_CODE if trajectory.tool_calls else Action.DIRECT_GUESS
        grad += advantage * policy.grad_logp(action)
    policy.theta = policy.theta + policy.learning_rate * grad
    return policy


def objective(policy: ToyPolicy, batch: Sequence[tuple[Action, float]]) -> float:
    """sum_i advantage_i * log pi(action_i); toy_update ascends its gradient."""
    return sum(adv * policy.logp(action) for action, adv in batch)


class ToyValueEstimator:
    """Tabular stand-in for a value network: per-state running estimates."""

    def __init__(self, step_size: float = 0.1):
        self.step_size = step_size
        self.table: dict[str, float] = {}

    def value(self, state: str) -> float:
        return self.table.get(state, 0.0)

    def update(self, state: str, target: float) -> float:
        if not math.isfinite(target):
            raise ValueError("target must be finite")
        current = self.table.get(state, 0.0)
        self.table[state] = current + self.step_size * (target - current)
        return self.table[state]


# -- task ---------------------------------------------------------------------

_PRODUCT_RE = re.compile(r"Compute (\d+) \* (\d+)\.")
_MODULAR_RE = re.compile(r"Compute \((\d+) \* (\d+)\) mod (\d+)\.")


def toy_task_generate(seed: int) -> Problem:
    """Arithmetic problems with exactly computable gold answers."""
    rng = random.Random(seed)
    a = rng.randint(12, 987)
    b = rng.randint(12, 987)
    if rng.random() < 0.5:
        prompt = f"Compute {a} * {b}.\n"
        gold = str(a * b)
    else:
        m = rng.randint(7, 97)
        prompt = f"Compute ({a} * {b}) mod {m}.\n"
        gold = str((a * b) % m)
    return Problem(id=f"toy-{seed}", prompt=prompt, gold_answer=gold)


def expression_of(problem: Problem) -> str:
    """The printable expression for a toy problem's prompt."""
    match = _MODULAR_RE.search(problem.prompt)
    if match:
        a, b, m = match.groups()
        return f"({a} * {b}) % {m}"
    match = _PRODUCT_RE.search(problem.prompt)
    if match:
        a, b = match.groups()
        return f"{a} * {b}"
    raise ValueError(f"not a toy problem prompt: {problem.prompt!r}")


def _gold_int(problem: Problem) -> int:
    return int(problem.gold_answer)


class ToyBackend:
    """Plays one sampled action template through the rollout engine.

    DirectGuess emits a boxed guess (correct with probability p_guess);
    WriteCodeThenAnswer emits a print() of the problem expression, then
    echoes whatever landed in the last tool-output block.
    """

    def __init__(
        self,
        action: Action,
        problem: Problem,
        rng: random.Random,
        p_guess: float,
        eos_marker: str = "<eos>",
    ):
        self.action = action
        self.problem = problem
        self.rng = rng
        self.p_guess = p_guess
        self._eos = eos_marker
        self._step = 0

    @property
    def capabilities(self) -> BackendCapabilities:
        return BackendCapabilities(supports_stop_strings=True, eos_marker=self._eos)

    def _guess_text(self) -> str:
        gold = _gold_int(self.problem)
        if self.rng.random() < self.p_guess:
            return str(gold)
        return str(gold + self.rng.choice((-3, -2, -1, 1, 2, 3)) * self.rng.randint(1, 9))

    @staticmethod
    def _echo_from(context: str) -> str:
        start = context.rfind("```output\n")
        if start < 0:
            return "unknown"
        start += len("```output\n")
        end = context.find("\n```", start)
        payload = context[start:end] if end >= 0 else context[start:]
        first_line = payload.splitlines()[0] if payload else ""
        return first_line.replace("{", "").replace("}", "")[:64] or "unknown"

    def generate(
        self,
        context: str,
        stop_set: Sequence[str],
        sampling: Optional[SamplingParams] = None,
    ) -> Generation:
        step = self._step
        self._step += 1
        if self.action is Action.DIRECT_GUESS:
            script = [
                ("I think the answer is ", "\\boxed{"),
                (self._guess_text(), "}"),
            ]
        else:
            if step == 0:
                script_entry = ("Let me compute this.\n", "```python")
            elif step == 1:
                script_entry = (f"\nprint({expression_of(self.problem)})\n", "```")
            elif step == 2:
                script_entry = ("The result is ", "\\boxed{")
            else:
                script_entry = (self._echo_from(context), "}")
            text, stop = script_entry
            return Generation(text=text, stop=stop, token_count=len(text) + 1)
        if step >= len(script):
            raise RuntimeError("toy backend driven past its script")
        text, stop = script[step]
        return Generation(text=text, stop=stop, token_count=len(text) + 1)


# -- training loop -------------------------------------------------------------


@dataclass
class ToyTrainConfig:
    seed: int = 0
    updates: int = 5000
    group_size: int = 8
    p_guess: float = 0.3
    tool_reliability: float = 1.0
    learning_rate: float = 0.05
    temperature: float = 1.0
    baseline: BaselineMode = BaselineMode.GROUP_MEAN
    low_threshold: float = 0.2
    high_threshold: float = 0.8
    max_tool_calls: int = 4


@dataclass
class ToyRunResult:
    policy: ToyPolicy
    history: list[dict]
    value_estimator: ToyValueEstimator


def build_step_records(
    trajectory: Trajectory, reward: float, decision_logp: float
) -> tuple[StepRecord, ...]:
    """Segment-granularity records: the policy's choice carries its log-prob
    on the first policy segment; the outcome reward lands on the last."""
    n = len(trajectory.segments)
    records = []
    seen_policy = False
    for i, segment in enumerate(trajectory.segments):
        is_env = segment.origin is Origin.ENVIRONMENT
        logp = 0.0
        if not is_env and not seen_policy:
            logp = decision_logp
            seen_policy = True
        records.append(
            StepRecord(
                reward=reward if i == n - 1 else 0.0,
                value=0.0,
                logp_new=logp,
                logp_old=logp,
                logp_ref=logp,
                is_env=is_env,
            )
        )
    return tuple(records)


def run_toy_group(
    policy: ToyPolicy,
    problem: Problem,
    env: StubExecClient,
    rng: random.Random,
    config: ToyTrainConfig,
    rollout_config: RolloutConfig,
) -> RewardedGroup:
    members = []
    for sample in range(config.group_size):
        action = policy.sample(rng)
        backend = ToyBackend(action, problem, rng, config.p_guess)
        trajectory = run_rollout(backend, problem, env, rollout_config)
        record = score_trajectory(
            trajectory, problem, trajectory_id=f"{problem.id}#{sample}"
        )
        members.append((trajectory, record))
    return RewardedGroup.build(problem.id, members)


def train_toy(config: ToyTrainConfig) -> ToyRunResult:
    rng = random.Random(config.seed)
    policy = ToyPolicy(
        temperature=config.temperature, learning_rate=config.learning_rate
    )
    env = StubExecClient(fail_rate=1.0 - config.tool_reliability, rng=rng)
    values = ToyValueEstimator()
    running = RunningMean()
    rollout_config = RolloutConfig(max_tool_calls=config.max_tool_calls)
    history: list[dict] = []

    for step in range(config.updates):
        problem = toy_task_generate(rng.randrange(1 << 30))
        group = run_toy_group(policy, problem, env, rng, config, rollout_config)
        decision = filter_group(group, config.low_threshold, config.high_threshold)
        group_rewards = [rec.reward for _, rec in group.members]
        values.update("start", group.accuracy)

        if decision is FilterDecision.KEEP:
            batch = []
            for trajectory, record in group.members:
                action = (
                    Action.WRITE_CODE if trajectory.tool_calls else Action.DIRECT_GUESS
                )
                steps = build_step_records(
                    trajectory, float(record.reward), policy.logp(action)
                )
                advantages = reinforce_advantage(
                    steps,
                    gamma=1.0,
                    baseline_mode=config.baseline,
                    group_rewards=group_rewards,
                    running=running,
                )
                batch.append((trajectory, advantages[0]))
            toy_update(policy, batch)

        n = len(group.members)
        used = sum(1 for _, rec in group.members if rec.used_code)
        correct = [rec for _, rec in group.members if rec.reward == 1]
        history.append(
            {
                "step": step,
                "reward_avg": group.accuracy,
                "code_proportion": used / n,
                "code_in_correct": (
                    sum(1 for rec in correct if rec.used_code) / len(correct)
                    if correct
                    else 0.0
                ),
                "code_count_avg": sum(rec.code_calls for _, rec in group.members) / n,
                "response_length_avg": (
                    sum(rec.response_tokens for _, rec in group.members) / n
                ),
                "kept_group_fraction": 1.0 if decision is FilterDecision.KEEP else 0.0,
            }
        )
    return ToyRunResult(policy=policy, history=history, value_estimator=values)


def summarize_run(history: Sequence[dict], window: int = 50, tail: int = 250) -> dict:
    """Final-window levels plus the accuracy/code-ratio rank correlation."""
    from scipy.stats import spearmanr

    if len(history) < 2 * window:
        raise ValueError("history too short to summarize")
    acc_windows = []
    code_windows = []
    for start in range(0, len(history) - window + 1, window):
        chunk = history[start : start + window]
        acc_windows.append(sum(h["reward_avg"] for h in chunk) / len(chunk))
        code_windows.append(sum(h["code_proportion"] for h in chunk) / len(chunk))
    rho = spearmanr(acc_windows, code_windows).correlation
    last = history[-tail:]
    return {
        "final_accuracy": sum(h["reward_avg"] for h in last) / len(last),
        "final_code_proportion": sum(h["code_proportion"] for h in last) / len(last),
        "spearman_acc_code": float(rho),
        "windows": len(acc_windows),
    }
