"""Tool-integrated reasoning RL engine.

A model-agnostic toolkit for reinforcement learning with spontaneous code
execution: interactive rollouts driven by dynamic stop tokens, a decoupled
sandboxed execution service, outcome-based reward verification, accuracy-band
replay filtering, environment-masked advantage computation, and an
asynchronous pipelined rollout scheduler.
"""

from ztir.model import (
    BudgetMode,
    Origin,
    Problem,
    RLHyperparams,
    RolloutConfig,
    Segment,
    SegmentKind,
    StopReason,
    ToolCallRecord,
    Trajectory,
    render_context,
)
from ztir.sandbox.types import ExecRequest, ExecResult, Verdict

__version__ = "0.1.0"

__all__ = [
    "BudgetMode",
    "ExecRequest",
    "ExecResult",
    "Origin",
    "Problem",
    "RLHyperparams",
    "RolloutConfig",
    "Segment",
    "SegmentKind",
    "StopReason",
    "ToolCallRecord",
    "Trajectory",
    "Verdict",
    "render_context",
    "__version__",
]
