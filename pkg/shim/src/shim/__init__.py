"""Snippet runner for data-analysis code: executes one snippet with its working
directory set, enforces timeout and memory limits, captures both streams, and
reports a single structured result."""

from .runner import ShimResult, run_snippet

__all__ = ["ShimResult", "run_snippet"]
__version__ = "0.1.0"
