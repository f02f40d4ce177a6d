"""Sandboxed code execution: wire types, local runner, HTTP service, client."""

from ztir.sandbox.types import ExecRequest, ExecResult, Verdict

__all__ = ["ExecRequest", "ExecResult", "Verdict"]
