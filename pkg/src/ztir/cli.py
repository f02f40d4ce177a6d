"""Operator command line.

Subcommands: `sandbox serve`, `rollout run`, `train toy`, `eval`, and
`bench pipeline`.  Exit status 2 signals a usage error, 1 a runtime failure;
failures also emit one machine-readable JSON line on stderr.

Setting precedence for shared knobs is flags > environment variables
(ZTIR_SANDBOX_URL, ZTIR_SANDBOX_BIND, ZTIR_SANDBOX_POOL, ZTIR_BACKEND_TOKEN)
> --config JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from typing import Optional, Sequence

from ztir.backends import (
    GenerationBackend,
    HttpCompletionBackend,
    ScriptedBackend,
    load_scenario,
)
from ztir.curves import export_curves, history_to_points
from ztir.model import (
    BudgetMode,
    RolloutConfig,
    load_problems,
    read_trajectories,
    write_trajectories,
)
from ztir.rollout import run_rollout
from ztir.sandbox.client import ExecClient, StubExecClient
from ztir.sandbox.service import SandboxService, ServiceConfig
from ztir.simulate import SIM_MODES, SimProfile, simulate
from ztir.toy import ToyTrainConfig, summarize_run, train_toy
from ztir.verify import (
    Answer,
    EvalSample,
    ProblemSamples,
    eval_metrics,
    extract_final_answer,
    score_trajectory,
)
from ztir.advantage import BaselineMode

_PRECEDENCE_NOTE = (
    "Setting precedence: command-line flags override environment variables "
    "(ZTIR_SANDBOX_URL, ZTIR_SANDBOX_BIND, ZTIR_SANDBOX_POOL, "
    "ZTIR_BACKEND_TOKEN), which override values from --config, which "
    "override built-in defaults."
)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 2 with a machine-readable line on stderr."""

    def error(self, message: str):
        _emit_error("usage", message)
        self.print_usage(sys.stderr)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": message, "kind": kind}), file=sys.stderr)


def _resolve(
    flag_value,
    env_var: Optional[str],
    config: dict,
    config_key: str,
    default,
):
    if flag_value is not None:
        return flag_value
    if env_var is not None:
        env = os.environ.get(env_var)
        if env is not None:
            return env
    if config_key in config:
        return config[config_key]
    return default


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("--config must contain a JSON object")
    return data


def build_parser() -> _Parser:
    parser = _Parser(prog="ztir", description=__doc__.splitlines()[0],
                     epilog=_PRECEDENCE_NOTE)
    parser.add_argument(
        "--config", help="JSON file supplying defaults for any flag below"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sandbox = sub.add_parser("sandbox", help="code execution service")
    sandbox_sub = sandbox.add_subparsers(dest="sandbox_command", required=True)
    serve = sandbox_sub.add_parser(
        "serve", help="run the HTTP execution service", epilog=_PRECEDENCE_NOTE
    )
    serve.add_argument("--bind", help="host:port (default 127.0.0.1:8731)")
    serve.add_argument("--pool", type=int, help="worker pool size (default 8)")
    serve.add_argument(
        "--rate-limit", type=float, default=None,
        help="per-client requests/sec (default unlimited)",
    )
    serve.add_argument(
        "--worker-cmd",
        help="command executing one JSON frame on stdin (default direct spawn)",
    )
    serve.add_argument(
        "--hard-timeout-ms", type=int, help="server-side timeout clamp"
    )

    rollout = sub.add_parser("rollout", help="interactive tool-call rollouts")
    rollout_sub = rollout.add_subparsers(dest="rollout_command", required=True)
    run = rollout_sub.add_parser(
        "run", help="roll out every problem in a dataset", epilog=_PRECEDENCE_NOTE
    )
    run.add_argument("--dataset", required=True, help="problems JSONL")
    run.add_argument(
        "--backend", required=True,
        help="completion endpoint URL (http...) or scripted-scenario JSONL path",
    )
    run.add_argument("--n-max", type=int, default=20, help="tool-call budget")
    run.add_argument(
        "--budget-mode", choices=[m.value for m in BudgetMode],
        default=BudgetMode.NOTICE_RESUME.value,
    )
    run.add_argument("--out", required=True, help="trajectory JSONL to write")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--max-total-tokens", type=int, default=4096)
    run.add_argument(
        "--executor", choices=("auto", "http", "stub"), default="auto",
        help="auto uses the sandbox URL when configured, else in-process stub",
    )
    run.add_argument("--sandbox-url", help="execution service base URL")

    train = sub.add_parser("train", help="desk-scale policy training")
    train_sub = train.add_subparsers(dest="train_command", required=True)
    toy = train_sub.add_parser(
        "toy", help="train the two-template policy", epilog=_PRECEDENCE_NOTE
    )
    toy.add_argument("--steps", type=int, required=True)
    toy.add_argument(
        "--algo", choices=("reinforce", "grpo-baseline"), default="grpo-baseline",
        help="reinforce uses a running-mean baseline; grpo-baseline the group mean",
    )
    toy.add_argument("--curves", required=True, help="CSV output path")
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--group-size", type=int, default=8)
    toy.add_argument("--p-guess", type=float, default=0.3)
    toy.add_argument("--lr", type=float, default=0.05)
    toy.add_argument("--temperature", type=float, default=1.0)
    toy.add_argument("--tool-reliability", type=float, default=1.0)

    ev = sub.add_parser(
        "eval", help="score a trajectory file", epilog=_PRECEDENCE_NOTE
    )
    ev.add_argument("--traj", required=True, help="trajectory JSONL")
    ev.add_argument("--dataset", required=True, help="problems JSONL")
    ev.add_argument("--k", type=int, required=True, help="samples per problem")
    ev.add_argument("--metrics", required=True, help="metrics JSON to write")

    bench = sub.add_parser("bench", help="throughput benchmarks")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    pipe = bench_sub.add_parser(
        "pipeline", help="latency-model throughput comparison",
        epilog=_PRECEDENCE_NOTE,
    )
    pipe.add_argument("--profile", required=True, help="sim profile JSON")
    pipe.add_argument(
        "--modes", default="sync,async,pipelined",
        help="comma list from sync,async,pipelined",
    )
    pipe.add_argument("--steps", type=int, default=50)
    pipe.add_argument("--out", help="optional report JSON path")
    return parser


def _cmd_sandbox_serve(args, config: dict) -> int:
    bind = _resolve(args.bind, "ZTIR_SANDBOX_BIND", config, "bind", "127.0.0.1:8731")
    pool = int(_resolve(args.pool, "ZTIR_SANDBOX_POOL", config, "pool", 8))
    hard = int(
        _resolve(
            args.hard_timeout_ms, "ZTIR_SANDBOX_HARD_TIMEOUT_MS", config,
            "hard_timeout_ms", 30000,
        )
    )
    worker_cmd = _resolve(
        args.worker_cmd, "ZTIR_SANDBOX_WORKER_CMD", config, "worker_cmd", None
    )
    if isinstance(worker_cmd, str):
        worker_cmd = worker_cmd.split()
    rate = args.rate_limit if args.rate_limit is not None else config.get("rate_limit")
    host, _, port = bind.partition(":")
    service = SandboxService(
        ServiceConfig(
            bind_host=host or "127.0.0.1",
            bind_port=int(port or 0),
            pool_size=pool,
            hard_timeout_ms=hard,
            rate_limit_per_client=rate,
            worker_cmd=worker_cmd,
        )
    )
    service.start()
    print(json.dumps({"url": service.url, "pool": pool}), flush=True)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return 0


def _make_backend(spec: str, token: Optional[str]) -> GenerationBackend:
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpCompletionBackend(spec, token=token)
    return ScriptedBackend(load_scenario(spec))


def _cmd_rollout_run(args, config: dict) -> int:
    problems = load_problems(args.dataset)
    sandbox_url = _resolve(
        args.sandbox_url, "ZTIR_SANDBOX_URL", config, "sandbox_url", None
    )
    executor_kind = args.executor
    if executor_kind == "auto":
        executor_kind = "http" if sandbox_url else "stub"
    if executor_kind == "http":
        if not sandbox_url:
            raise ValueError("--executor http needs --sandbox-url or ZTIR_SANDBOX_URL")
        env = ExecClient(sandbox_url)
    else:
        env = StubExecClient(rng=random.Random(args.seed))
    token = _resolve(None, "ZTIR_BACKEND_TOKEN", config, "backend_token", None)
    rollout_config = RolloutConfig(
        max_tool_calls=args.n_max,
        budget_mode=BudgetMode(args.budget_mode),
        max_total_tokens=args.max_total_tokens,
    )
    trajectories = []
    for problem in problems:
        backend = _make_backend(args.backend, token)
        trajectories.append(run_rollout(backend, problem, env, rollout_config))
    count = write_trajectories(args.out, trajectories)
    print(json.dumps({"trajectories": count, "out": args.out}))
    return 0


def _cmd_train_toy(args, config: dict) -> int:
    baseline = (
        BaselineMode.RUNNING_MEAN
        if args.algo == "reinforce"
        else BaselineMode.GROUP_MEAN
    )
    result = train_toy(
        ToyTrainConfig(
            seed=args.seed,
            updates=args.steps,
            group_size=args.group_size,
            p_guess=args.p_guess,
            tool_reliability=args.tool_reliability,
            learning_rate=args.lr,
            temperature=args.temperature,
            baseline=baseline,
        )
    )
    export_curves(history_to_points(result.history), args.curves)
    summary: dict = {
        "steps": args.steps,
        "p_write_code": result.policy.p_write_code(),
        "curves": args.curves,
    }
    if len(result.history) >= 100:
        summary.update(summarize_run(result.history))
    print(json.dumps(summary))
    return 0


def _cmd_eval(args, config: dict) -> int:
    problems = {p.id: p for p in load_problems(args.dataset)}
    grouped: dict[str, list] = {}
    order: list[str] = []
    for trajectory in read_trajectories(args.traj):
        pid = trajectory.problem_id
        if pid not in problems:
            raise ValueError(f"trajectory references unknown problem {pid!r}")
        if pid not in grouped:
            grouped[pid] = []
            order.append(pid)
        index = len(grouped[pid])
        record = score_trajectory(
            trajectory, problems[pid], trajectory_id=f"{pid}#{index}"
        )
        grouped[pid].append(EvalSample(record=record, answer=extract_final_answer(trajectory)))
    if not grouped:
        raise ValueError("trajectory file is empty")
    for pid, samples in grouped.items():
        if len(samples) != args.k:
            raise ValueError(
                f"problem {pid!r} has {len(samples)} samples, expected k={args.k}"
            )
    groups = [
        ProblemSamples(
            problem_id=pid,
            gold=Answer.of(problems[pid].gold_answer),
            samples=tuple(grouped[pid]),
        )
        for pid in order
    ]
    metrics = eval_metrics(groups).to_dict()
    body = json.dumps(metrics, indent=2, sort_keys=True)
    with open(args.metrics, "w", encoding="utf-8") as fh:
        fh.write(body + "\n")
    print(body)
    return 0


def _cmd_bench_pipeline(args, config: dict) -> int:
    profile = SimProfile.from_json(args.profile)
    alias = {"async": "basic_async"}
    reports = {}
    for name in args.modes.split(","):
        name = name.strip()
        mode = alias.get(name, name)
        if mode not in SIM_MODES:
            raise ValueError(f"unknown mode {name!r}; choose from sync,async,pipelined")
        reports[name] = simulate(profile, mode, args.steps).to_dict()
    body = json.dumps(reports, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(body + "\n")
    print(body)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        if args.command == "sandbox":
            return _cmd_sandbox_serve(args, config)
        if args.command == "rollout":
            return _cmd_rollout_run(args, config)
        if args.command == "train":
            return _cmd_train_toy(args, config)
        if args.command == "eval":
            return _cmd_eval(args, config)
        if args.command == "bench":
            return _cmd_bench_pipeline(args, config)
        parser.error(f"unknown command {args.command!r}")
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
