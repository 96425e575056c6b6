"""Core execution: run one snippet in a fresh interpreter under limits.

The snippet runs in a child process so that stream capture survives any
snippet outcome (exceptions, os._exit, hard kills) and so limits can be
enforced from outside the snippet's own interpreter.
"""

from __future__ import annotations

import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"
STATUS_RESOURCE_KILL = "resource_kill"

# snippet code is compiled under this filename so tracebacks are stable
SNIPPET_FILENAME = "<snippet>"

_BOOTSTRAP = (
    "import sys\n"
    "source = open(sys.argv[1], encoding='utf-8').read()\n"
    f"code = compile(source, {SNIPPET_FILENAME!r}, 'exec')\n"
    "exec(code, {'__name__': '__main__'})\n"
)


@dataclass(frozen=True)
class ShimResult:
    stdout: str
    stderr: str
    status: str  # ok | error | timeout | resource_kill
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


def _memory_limiter(mem_bytes: int | None):
    """Best-available memory cap; returns (preexec_fn, note). A note means the
    platform cannot enforce the cap and enforcement degrades to timeout-only."""
    if not mem_bytes or mem_bytes <= 0:
        return None, None
    if os.name != "posix":
        return None, "[shim] memory cap unsupported on this platform; timeout-only enforcement"
    try:
        import resource
    except ImportError:
        return None, "[shim] resource module unavailable; timeout-only enforcement"

    def apply() -> None:
        resource.setrlimit(resource.RLIMIT_AS, (mem_bytes, mem_bytes))

    return apply, None


def _decode(raw: bytes | None) -> str:
    if raw is None:
        return ""
    return raw.decode("utf-8", errors="replace")


def run_snippet(
    code_path: str,
    workdir: str,
    timeout_s: float = 120.0,
    mem_bytes: int = 2 * 1024**3,
) -> ShimResult:
    """Execute the snippet at code_path with cwd=workdir.

    Never raises for snippet outcomes: every result, including shim-internal
    faults, is reported through the status field.
    """
    started = time.monotonic()
    if not os.path.isfile(code_path):
        return ShimResult("", f"[shim] snippet file not found: {code_path}", STATUS_ERROR, 0.0)
    if not os.path.isdir(workdir):
        return ShimResult("", f"[shim] workdir not found: {workdir}", STATUS_ERROR, 0.0)
    preexec, note = _memory_limiter(mem_bytes)
    try:
        proc = subprocess.run(
            [sys.executable, "-u", "-c", _BOOTSTRAP, code_path],
            cwd=workdir,
            capture_output=True,
            timeout=timeout_s,
            preexec_fn=preexec,
        )
        wall = time.monotonic() - started
        stdout, stderr = _decode(proc.stdout), _decode(proc.stderr)
        if note:
            stderr = f"{stderr}\n{note}" if stderr else note
        if proc.returncode == 0:
            status = STATUS_OK
        elif preexec is not None and ("MemoryError" in stderr or proc.returncode == -9):
            status = STATUS_RESOURCE_KILL
        else:
            status = STATUS_ERROR
            if not stderr:
                stderr = f"[shim] snippet exited with status {proc.returncode}"
        return ShimResult(stdout, stderr, status, wall)
    except subprocess.TimeoutExpired as exc:
        wall = time.monotonic() - started
        return ShimResult(
            _decode(exc.stdout if isinstance(exc.stdout, bytes) else None),
            _decode(exc.stderr if isinstance(exc.stderr, bytes) else None)
            or f"[shim] killed after {timeout_s}s timeout",
            STATUS_TIMEOUT,
            wall,
        )
    except Exception as exc:  # shim-internal fault: still a structured result
        wall = time.monotonic() - started
        return ShimResult("", f"[shim] internal fault: {exc!r}", STATUS_ERROR, wall)
