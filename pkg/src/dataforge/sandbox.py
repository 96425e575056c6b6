"""Isolated execution of code turns inside per-episode workspaces.

Executors are pluggable: `LocalExecutor` runs snippets in a plain interpreter
subprocess (timeout only), `ShimExecutor` delegates to the external shim CLI
(structured JSON protocol with timeout and memory enforcement), and
`ScriptedExecutor` serves canned results for tests.
"""

from __future__ import annotations

import json
import os
import shutil
import subprocess
import sys
import tempfile
import time
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from .core import CorpusError, DataFileRef, ForgeError, Question

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"
STATUS_RESOURCE_KILL = "resource_kill"

ELISION_MARKER = "\n...[truncated]...\n"
STDERR_TAG = "STDERR:"


class ShimProtocolError(ForgeError):
    """The shim child process did not produce a parseable result line."""


@dataclass(frozen=True)
class Limits:
    timeout_s: float = 120.0
    memory_bytes: int = 2 * 1024**3
    output_bytes: int = 4000


@dataclass(frozen=True)
class ExecutionResult:
    stdout: str
    stderr: str
    exit_status: str  # ok | error | timeout | resource_kill
    wall_time: float
    truncated: bool = False

    @property
    def counts_as_code_error(self) -> bool:
        return self.exit_status != STATUS_OK


@dataclass(frozen=True)
class Workspace:
    root: Path
    staged_files: tuple[DataFileRef, ...]
    session_id: str

    def cleanup(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)


def prepare_workspace(
    q: Question,
    distractors: Sequence[DataFileRef] = (),
    corpus_root: str | Path = ".",
    workspaces_root: str | Path | None = None,
) -> Workspace:
    """Stage the question's files plus distractors (in corpus order, names kept)
    into a fresh isolated directory."""
    corpus_root = Path(corpus_root)
    session_id = uuid.uuid4().hex
    base = Path(workspaces_root) if workspaces_root else Path(tempfile.gettempdir()) / "forge-ws"
    root = base / f"{q.id}-{session_id[:8]}"
    root.mkdir(parents=True, exist_ok=False)
    staged: list[DataFileRef] = []
    try:
        for ref in tuple(q.files) + tuple(distractors):
            src = corpus_root / ref.path
            if not src.is_file():
                raise CorpusError(f"data file not found in corpus store: {ref.path}")
            dest = root / ref.path
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(src, dest)
            staged.append(ref)
    except Exception:
        shutil.rmtree(root, ignore_errors=True)
        raise
    return Workspace(root=root, staged_files=tuple(staged), session_id=session_id)


def truncate_middle(text: str, budget: int) -> tuple[str, bool]:
    """Head+tail truncation around an elision marker; result is exactly `budget`
    characters when truncation happens."""
    if len(text) <= budget:
        return text, False
    if budget <= len(ELISION_MARKER):
        return text[:budget], True
    keep = budget - len(ELISION_MARKER)
    head = keep - keep // 3
    tail = keep - head
    return text[:head] + ELISION_MARKER + text[len(text) - tail:], True


class Executor(Protocol):
    def run(self, code: str, workdir: Path, limits: Limits) -> ExecutionResult: ...


def _decode(raw: bytes | str | None) -> str:
    if raw is None:
        return ""
    if isinstance(raw, bytes):
        return raw.decode("utf-8", errors="replace")
    return raw


def _rlimit_preexec(memory_bytes: int | None) -> Callable[[], None] | None:
    if memory_bytes is None or os.name != "posix":
        return None
    try:
        import resource
    except ImportError:  # pragma: no cover - non-posix
        return None

    def _apply() -> None:
        resource.setrlimit(resource.RLIMIT_AS, (memory_bytes, memory_bytes))

    return _apply


class LocalExecutor:
    """Runs each snippet in a fresh interpreter subprocess.

    Enforces the timeout and (best effort, POSIX only) the memory cap; this is
    the built-in executor the full primary test suite runs against. Code goes in
    via -c so tracebacks carry the stable filename "<string>" instead of a
    throwaway temp path (observations must be byte-stable under replay).
    """

    def __init__(self, python: str | None = None, enforce_memory: bool = True):
        self.python = python or sys.executable
        self.enforce_memory = enforce_memory

    def run(self, code: str, workdir: Path, limits: Limits) -> ExecutionResult:
        mem = limits.memory_bytes if self.enforce_memory else None
        started = time.monotonic()
        try:
            proc = subprocess.run(
                [self.python, "-u", "-c", code],
                cwd=str(workdir),
                capture_output=True,
                timeout=limits.timeout_s,
                preexec_fn=_rlimit_preexec(mem),
            )
            wall = time.monotonic() - started
            stdout, stderr = _decode(proc.stdout), _decode(proc.stderr)
            if proc.returncode == 0:
                status = STATUS_OK
            elif mem is not None and ("MemoryError" in stderr or proc.returncode == -9):
                status = STATUS_RESOURCE_KILL
            else:
                status = STATUS_ERROR
                if not stderr:
                    stderr = f"process exited with status {proc.returncode}"
        except subprocess.TimeoutExpired as exc:
            wall = time.monotonic() - started
            stdout = _decode(exc.stdout)
            stderr = _decode(exc.stderr) or f"[killed after {limits.timeout_s}s timeout]"
            status = STATUS_TIMEOUT
        return _truncate_result(
            ExecutionResult(stdout=stdout, stderr=stderr, exit_status=status, wall_time=wall),
            limits.output_bytes,
        )


class ShimExecutor:
    """Executes code through the external shim child process.

    The shim receives the code via a temp-file argument and writes one JSON
    result object as its final output line.
    """

    def __init__(self, shim_cmd: Sequence[str]):
        self.shim_cmd = list(shim_cmd)

    def run(self, code: str, workdir: Path, limits: Limits) -> ExecutionResult:
        with tempfile.NamedTemporaryFile(
            "w", suffix=".py", prefix="turn-", delete=False, encoding="utf-8"
        ) as fh:
            fh.write(code)
            code_path = fh.name
        cmd = self.shim_cmd + [
            code_path,
            "--workdir",
            str(workdir),
            "--timeout-s",
            str(limits.timeout_s),
            "--mem-bytes",
            str(limits.memory_bytes),
        ]
        started = time.monotonic()
        try:
            proc = subprocess.run(cmd, capture_output=True, timeout=limits.timeout_s + 30)
        except subprocess.TimeoutExpired:
            return ExecutionResult(
                stdout="",
                stderr=f"[shim unresponsive; killed after {limits.timeout_s + 30}s]",
                exit_status=STATUS_TIMEOUT,
                wall_time=time.monotonic() - started,
            )
        finally:
            try:
                os.unlink(code_path)
            except OSError:
                pass
        lines = _decode(proc.stdout).strip().splitlines()
        if not lines:
            raise ShimProtocolError(f"shim produced no output (stderr: {_decode(proc.stderr)!r})")
        try:
            payload = json.loads(lines[-1])
            result = ExecutionResult(
                stdout=payload["stdout"],
                stderr=payload["stderr"],
                exit_status=payload["status"],
                wall_time=float(payload["wall_time"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ShimProtocolError(f"unparseable shim result line: {lines[-1]!r}") from exc
        if result.exit_status not in (STATUS_OK, STATUS_ERROR, STATUS_TIMEOUT, STATUS_RESOURCE_KILL):
            raise ShimProtocolError(f"unknown shim status: {result.exit_status!r}")
        return _truncate_result(result, limits.output_bytes)


class ScriptedExecutor:
    """Canned execution results for tests; keyed by a callable over the code text."""

    def __init__(self, responder: Callable[[str], ExecutionResult]):
        self.responder = responder

    def run(self, code: str, workdir: Path, limits: Limits) -> ExecutionResult:
        return _truncate_result(self.responder(code), limits.output_bytes)


def _truncate_result(result: ExecutionResult, output_bytes: int) -> ExecutionResult:
    stdout, t_out = truncate_middle(result.stdout, output_bytes)
    stderr, t_err = truncate_middle(result.stderr, output_bytes)
    if not (t_out or t_err):
        return result
    return replace(result, stdout=stdout, stderr=stderr, truncated=True)


def execute_code(
    code: str, ws: Workspace, limits: Limits, executor: Executor | None = None
) -> ExecutionResult:
    """Run one code turn with the workspace root as working directory."""
    executor = executor or LocalExecutor()
    return executor.run(code, ws.root, limits)


def to_observation(result: ExecutionResult, budget: int) -> str:
    """Observation payload: stdout, then tagged stderr, truncated to `budget` chars."""
    if budget <= 0:
        raise ValueError("observation budget must be positive")
    parts: list[str] = []
    if result.stdout:
        parts.append(result.stdout)
    if result.stderr:
        parts.append(f"{STDERR_TAG}\n{result.stderr}")
    text = "\n".join(parts)
    if result.truncated and ELISION_MARKER not in text:
        text += ELISION_MARKER
    text, _ = truncate_middle(text, budget)
    return text


def stage_files(paths: Iterable[str | Path], root: str | Path) -> list[DataFileRef]:
    """Helper for tests and fixtures: copy loose files under `root` and return refs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    refs = []
    for p in paths:
        p = Path(p)
        shutil.copy2(p, root / p.name)
        refs.append(DataFileRef(path=p.name))
    return refs
