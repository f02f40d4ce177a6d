"""Per-token returns, masked GAE, baselines, clipped objective, KL term.

Everything here is a pure function over immutable step arrays.  Environment-
inserted tokens never contribute to policy terms: their advantages are forced
to 0 and they are excluded from every summary mean.  Summation order is fixed
(backward recursions, left-to-right means) so results are bitwise
reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Sequence


@dataclass(frozen=True)
class StepRecord:
    """One token position: reward, value estimate, log-probs, origin mask.

    Environment tokens carry a 0.0 sentinel in every logp field; they have no
    policy probability.
    """

    reward: float
    value: float
    logp_new: float
    logp_old: float
    logp_ref: float
    is_env: bool

    def __post_init__(self) -> None:
        for name in ("reward", "value", "logp_new", "logp_old", "logp_ref"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.is_env and (self.logp_new or self.logp_old or self.logp_ref):
            raise ValueError("environment tokens must carry logp sentinels of 0.0")


@dataclass(frozen=True)
class AdvantageOutput:
    """advantages are masked (0 at env positions); returns are the value-loss
    targets unmasked_advantage + value, which equal the Monte Carlo return
    when lambda = 1."""

    advantages: tuple[float, ...]
    returns: tuple[float, ...]
    td_errors: tuple[float, ...]


class BaselineMode(str, Enum):
    RUNNING_MEAN = "RunningMean"
    GROUP_MEAN = "GroupMean"
    NONE = "None"


def compute_returns(steps: Sequence[StepRecord], gamma: float) -> tuple[float, ...]:
    """Discounted return G_t by backward recursion."""
    out = [0.0] * len(steps)
    acc = 0.0
    for t in range(len(steps) - 1, -1, -1):
        acc = steps[t].reward + gamma * acc
        out[t] = acc
    return tuple(out)


def compute_gae(
    steps: Sequence[StepRecord], gamma: float, lam: float
) -> AdvantageOutput:
    """TD errors and exponentially weighted advantages, masked at env tokens.

    Terminal bootstrap value is 0: episodes end at answer emission.  The
    lambda = 1 case is computed as G_t - v_t via the telescoping identity, so
    values at other positions cannot leak into it.
    """
    n = len(steps)
    values = [s.value for s in steps]
    deltas = [0.0] * n
    for t in range(n):
        next_v = values[t + 1] if t + 1 < n else 0.0
        deltas[t] = steps[t].reward + gamma * next_v - values[t]

    raw = [0.0] * n
    if lam == 1.0:
        returns = compute_returns(steps, gamma)
        for t in range(n):
            raw[t] = returns[t] - values[t]
    else:
        acc = 0.0
        for t in range(n - 1, -1, -1):
            acc = deltas[t] + gamma * lam * acc
            raw[t] = acc

    advantages = [0.0 if steps[t].is_env else raw[t] for t in range(n)]
    targets = [raw[t] + values[t] for t in range(n)]
    return AdvantageOutput(
        advantages=tuple(advantages),
        returns=tuple(targets),
        td_errors=tuple(deltas),
    )


class RunningMean:
    """Streaming mean of trajectory returns for the RunningMean baseline.

    The baseline applied to a trajectory is the mean of returns seen before
    it; the trajectory's own return is folded in afterwards.
    """

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0

    def current(self) -> float:
        return self.mean if self.count else 0.0

    def update(self, value: float) -> None:
        self.count += 1
        self.mean += (value - self.mean) / self.count


def reinforce_advantage(
    steps: Sequence[StepRecord],
    gamma: float,
    baseline_mode: BaselineMode,
    group_rewards: Optional[Sequence[float]] = None,
    running: Optional[RunningMean] = None,
) -> tuple[float, ...]:
    """A_t = G_t - b with the chosen baseline, masked at env tokens."""
    returns = compute_returns(steps, gamma)
    if baseline_mode is BaselineMode.GROUP_MEAN:
        if not group_rewards:
            raise ValueError("GroupMean baseline needs the group's rewards")
        b = sum(group_rewards) / len(group_rewards)
    elif baseline_mode is BaselineMode.RUNNING_MEAN:
        if running is None:
            raise ValueError("RunningMean baseline needs a RunningMean accumulator")
        b = running.current()
        if returns:
            running.update(returns[0])
    else:
        b = 0.0
    return tuple(
        0.0 if s.is_env else g - b for s, g in zip(steps, returns)
    )


@dataclass(frozen=True)
class PpoSummary:
    """mean is over non-env tokens; clip_fraction is the share of non-env
    tokens where clipping actually lowered the objective."""

    per_token: tuple[float, ...]
    mean: float
    clip_fraction: float
    token_count: int


def ppo_clip_terms(
    steps: Sequence[StepRecord],
    advantages: Sequence[float],
    epsilon: float,
) -> PpoSummary:
    if len(steps) != len(advantages):
        raise ValueError("advantages length must match steps")
    per_token = [0.0] * len(steps)
    total = 0.0
    clipped_count = 0
    n_policy = 0
    for t, (s, adv) in enumerate(zip(steps, advantages)):
        if s.is_env:
            continue
        n_policy += 1
        ratio = math.exp(s.logp_new - s.logp_old)
        unclipped = ratio * adv
        bounded = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon) * adv
        contribution = min(unclipped, bounded)
        if contribution < unclipped:
            clipped_count += 1
        per_token[t] = contribution
        total += contribution
    mean = total / n_policy if n_policy else 0.0
    clip_fraction = clipped_count / n_policy if n_policy else 0.0
    return PpoSummary(
        per_token=tuple(per_token),
        mean=mean,
        clip_fraction=clip_fraction,
        token_count=n_policy,
    )


def value_loss(steps: Sequence[StepRecord], targets: Sequence[float]) -> float:
    """Mean squared error over non-env tokens only."""
    if len(steps) != len(targets):
        raise ValueError("targets length must match steps")
    total = 0.0
    n_policy = 0
    for s, target in zip(steps, targets):
        if s.is_env:
            continue
        n_policy += 1
        err = s.value - target
        total += err * err
    return total / n_policy if n_policy else 0.0


def kl_term(steps: Sequence[StepRecord], beta: float) -> float:
    """beta times the sampled log-ratio to the reference, non-env tokens."""
    if beta == 0.0:
        return 0.0
    total = 0.0
    n_policy = 0
    for s in steps:
        if s.is_env:
            continue
        n_policy += 1
        total += s.logp_new - s.logp_ref
    return beta * (total / n_policy) if n_policy else 0.0


# Columnar serialization for golden-file tests.


def steps_to_columns(steps: Sequence[StepRecord]) -> dict[str, list[Any]]:
    return {
        "r": [s.reward for s in steps],
        "v": [s.value for s in steps],
        "lp_new": [s.logp_new for s in steps],
        "lp_old": [s.logp_old for s in steps],
        "lp_ref": [s.logp_ref for s in steps],
        "env": [s.is_env for s in steps],
    }


def steps_from_columns(cols: dict[str, list[Any]]) -> tuple[StepRecord, ...]:
    n = len(cols["r"])
    if any(len(cols[key]) != n for key in ("v", "lp_new", "lp_old", "lp_ref", "env")):
        raise ValueError("column lengths differ")
    return tuple(
        StepRecord(
            reward=cols["r"][t],
            value=cols["v"][t],
            logp_new=cols["lp_new"][t],
            logp_old=cols["lp_old"][t],
            logp_ref=cols["lp_ref"][t],
            is_env=bool(cols["env"][t]),
        )
        for t in range(n)
    )
