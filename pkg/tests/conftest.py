"""Shared fixtures: scripted-scenario helpers and a live execution service."""

from __future__ import annotations

import pytest

from ztir.backends import ScenarioStep, ScriptedBackend
from ztir.model import Problem
from ztir.sandbox.service import SandboxService, ServiceConfig


def step(emit: str, stop: str, suffix: str = "", tokens=None) -> ScenarioStep:
    return ScenarioStep(
        await_context_suffix=suffix, emit=emit, stop=stop, tokens=tokens
    )


def scripted(*steps: ScenarioStep) -> ScriptedBackend:
    return ScriptedBackend(list(steps))


@pytest.fixture
def problem() -> Problem:
    return Problem(id="p1", prompt="Compute 2+2.\n", gold_answer="4")


@pytest.fixture(scope="session")
def service():
    """One shared live execution service bound to an ephemeral port."""
    svc = SandboxService(ServiceConfig(bind_port=0, pool_size=8))
    svc.start()
    yield svc
    svc.stop()
