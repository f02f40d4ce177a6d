"""JSON-framed single-shot execution harness."""

from ztir_worker.harness import main, parse_frame, run_once

__all__ = ["main", "parse_frame", "run_once"]
