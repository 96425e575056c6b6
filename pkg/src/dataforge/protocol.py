"""Parser and renderer for the agent wire format, plus rule-based conformance checks.

The format is a line-oriented grammar over four headers (matched at line start,
case-sensitive, whitespace-tolerant after the colon) and triple-backtick code
fences. Rendering is canonical: parse(render(t)) == t.turns for any conformant
trajectory.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .core import (
    ForgeError,
    Question,
    Termination,
    Trajectory,
    Turn,
    TurnKind,
    validate_trajectory,
)

THOUGHT_HEADER = "## Thought:"
CODE_HEADER = "## Code:"
OBSERVATION_HEADER = "## Observation:"
FINAL_ANSWER_HEADER = "## Final Answer:"

FENCE = "```"
EMIT_FENCE_OPEN = "```python"

_COMMENT_OR_BLANK = re.compile(r"^\s*(#.*)?$")
_PRINT_LIKE = re.compile(r"\b(print|pprint)\s*\(|sys\.stdout\.write\s*\(")


class ProtocolError(ForgeError):
    pass


class MalformedMessage(ProtocolError):
    """The text contains no recognized header."""


class UnclosedFence(ProtocolError):
    """A code fence opens and never closes."""


class MalformedTrajectory(ProtocolError):
    """A trajectory violating core invariants was passed where a valid one is required."""


@dataclass(frozen=True)
class Segment:
    thought: str
    code: str | None = None


@dataclass(frozen=True)
class AgentMessage:
    """One parsed model completion: thought/code segments and an optional final answer."""

    segments: tuple[Segment, ...]
    final_answer: str | None = None

    def first_executable(self) -> tuple[str, str | None]:
        """Thought text up to (and including) the first code-bearing segment, plus that code.

        Segments after the first code block are the caller's to discard; only one
        code block is ever executed per message.
        """
        thoughts: list[str] = []
        for seg in self.segments:
            if seg.thought:
                thoughts.append(seg.thought)
            if seg.code is not None:
                return "\n\n".join(thoughts), seg.code
        return "\n\n".join(thoughts), None

    def joined_thoughts(self) -> str:
        return "\n\n".join(seg.thought for seg in self.segments if seg.thought)


class Violation(str, enum.Enum):
    MISSING_HEADERS = "missing_headers"
    UNCLOSED_FENCE = "unclosed_fence"
    NO_PRINT_IN_CODE = "no_print_in_code"
    PROVIDED_FILES_UNUSED = "provided_files_unused"
    NO_FINAL_ANSWER = "no_final_answer"
    EMPTY_CODE_RETURN = "empty_code_return"


@dataclass(frozen=True)
class ConformanceReport:
    violations: tuple[Violation, ...]

    @property
    def passed(self) -> bool:
        return not self.violations


# --- tokenizing ---------------------------------------------------------------


def _header_rest(line: str, header: str) -> str | None:
    """Payload of `line` if it starts with `header`, else None. Strips the
    whitespace that separates the colon from the payload."""
    if line.startswith(header):
        return line[len(header):].lstrip(" \t")
    return None


def _is_bare_fence(line: str) -> bool:
    return line.rstrip() == FENCE


def _any_header(line: str) -> bool:
    return line.startswith((THOUGHT_HEADER, CODE_HEADER, OBSERVATION_HEADER, FINAL_ANSWER_HEADER))


def _read_fenced_code(lines: list[str], i: int) -> tuple[str, int]:
    """Read a fenced block starting at the fence-open line `i`; returns (code, next_index)."""
    body: list[str] = []
    i += 1
    while i < len(lines):
        if _is_bare_fence(lines[i]):
            return "\n".join(body), i + 1
        body.append(lines[i])
        i += 1
    raise UnclosedFence("code fence opened without a closing ```")


# --- agent message parsing ----------------------------------------------------


def parse_agent_message(text: str) -> AgentMessage:
    """Parse a single model completion into segments and an optional final answer.

    Total on arbitrary text: returns an AgentMessage or raises MalformedMessage /
    UnclosedFence. Stray text that fits no slot (preamble before the first header,
    text after a closed fence, hallucinated observation blocks) is dropped; it has
    no representation in the message model.
    """
    lines = text.split("\n")
    segments: list[Segment] = []
    thought_lines: list[str] | None = None
    code: str | None = None
    in_segment = False

    def flush() -> None:
        nonlocal thought_lines, code, in_segment
        if in_segment:
            thought = "\n".join(thought_lines or []).strip()
            segments.append(Segment(thought=thought, code=code))
        thought_lines, code, in_segment = None, None, False

    i = 0
    while i < len(lines):
        line = lines[i]
        rest = _header_rest(line, FINAL_ANSWER_HEADER)
        if rest is not None:
            flush()
            tail = "\n".join([rest] + lines[i + 1:]).strip()
            return AgentMessage(segments=tuple(segments), final_answer=tail)
        rest = _header_rest(line, THOUGHT_HEADER)
        if rest is not None:
            flush()
            in_segment = True
            thought_lines = [rest]
            i += 1
            continue
        rest = _header_rest(line, CODE_HEADER)
        if rest is not None:
            if not in_segment:
                in_segment = True
                thought_lines = []
            # payload arrives in the fenced block that follows; inline rest is stray
            i += 1
            continue
        rest = _header_rest(line, OBSERVATION_HEADER)
        if rest is not None:
            # hallucinated observation inside a completion: skip its block
            flush()
            i += 1
            while i < len(lines) and not _any_header(lines[i]) and not lines[i].startswith(FENCE):
                i += 1
            continue
        if line.startswith(FENCE):
            if not in_segment:
                in_segment = True
                thought_lines = []
            if code is not None:
                flush()
                in_segment = True
                thought_lines = []
            code, i = _read_fenced_code(lines, i)
            continue
        if in_segment and code is None:
            thought_lines.append(line)  # type: ignore[union-attr]
        i += 1

    flush()
    if not segments:
        raise MalformedMessage("no recognized header in completion")
    return AgentMessage(segments=tuple(segments), final_answer=None)


# --- transcript rendering and parsing ------------------------------------------


def render_turn(turn: Turn) -> str:
    """Canonical text of one turn, in the exact header spelling of the wire format."""
    if turn.kind is TurnKind.AGENT:
        parts = [f"{THOUGHT_HEADER} {turn.thought}"]
        if turn.code is not None:
            parts.append(f"{CODE_HEADER}\n{EMIT_FENCE_OPEN}\n{turn.code}\n{FENCE}")
        return "\n".join(parts)
    if turn.kind is TurnKind.OBSERVATION:
        return f"{OBSERVATION_HEADER} {turn.body}"
    if turn.thought:
        return f"{THOUGHT_HEADER} {turn.thought}\n{FINAL_ANSWER_HEADER} {turn.body}"
    return f"{FINAL_ANSWER_HEADER} {turn.body}"


def render_trajectory(t: Trajectory) -> str:
    """Canonical transcript of a valid, non-empty trajectory."""
    if not t.turns:
        raise MalformedTrajectory("cannot render an empty trajectory")
    problems = validate_trajectory(t)
    if problems:
        raise MalformedTrajectory("; ".join(problems))
    return "\n\n".join(render_turn(turn) for turn in t.turns)


def parse_transcript(text: str) -> list[Turn]:
    """Inverse of render_trajectory at the turn level."""
    lines = text.split("\n")
    turns: list[Turn] = []
    pending_thought: list[str] | None = None
    pending_code: str | None = None

    def flush_agent() -> None:
        nonlocal pending_thought, pending_code
        if pending_thought is not None or pending_code is not None:
            thought = "\n".join(pending_thought or []).strip()
            turns.append(Turn(kind=TurnKind.AGENT, thought=thought, code=pending_code))
        pending_thought, pending_code = None, None

    i = 0
    while i < len(lines):
        line = lines[i]
        rest = _header_rest(line, FINAL_ANSWER_HEADER)
        if rest is not None:
            body = "\n".join([rest] + lines[i + 1:]).strip()
            thought = ""
            if pending_thought is not None and pending_code is None:
                thought = "\n".join(pending_thought).strip()
                pending_thought = None
            flush_agent()
            turns.append(Turn(kind=TurnKind.FINAL_ANSWER, thought=thought, body=body))
            return turns
        rest = _header_rest(line, THOUGHT_HEADER)
        if rest is not None:
            flush_agent()
            pending_thought = [rest]
            i += 1
            continue
        rest = _header_rest(line, OBSERVATION_HEADER)
        if rest is not None:
            flush_agent()
            body_lines = [rest]
            i += 1
            while i < len(lines) and not _any_header(lines[i]):
                body_lines.append(lines[i])
                i += 1
            turns.append(Turn(kind=TurnKind.OBSERVATION, body="\n".join(body_lines).strip()))
            continue
        if _header_rest(line, CODE_HEADER) is not None:
            if pending_thought is None:
                pending_thought = []
            i += 1
            continue
        if line.startswith(FENCE):
            if pending_thought is None:
                pending_thought = []
            pending_code, i = _read_fenced_code(lines, i)
            flush_agent()
            continue
        if pending_thought is not None and pending_code is None:
            pending_thought.append(line)
        i += 1

    flush_agent()
    if not turns:
        raise MalformedMessage("no recognized header in transcript")
    return turns


# --- conformance ----------------------------------------------------------------


def _code_is_empty(code: str) -> bool:
    return all(_COMMENT_OR_BLANK.match(line) for line in code.split("\n"))


def check_conformance(t: Trajectory, q: Question) -> ConformanceReport:
    """Rule-based format/content checks on a structurally valid trajectory.

    Pure: depends only on (t, q). Rules: every non-empty code block must print
    something; at least one provided file must be referenced by some code block;
    the episode must have ended in a final answer.
    """
    violations: list[Violation] = []
    model_turns = [x for x in t.turns if x.kind in (TurnKind.AGENT, TurnKind.FINAL_ANSWER)]
    if not model_turns:
        violations.append(Violation.MISSING_HEADERS)
    codes = t.code_blocks()
    if any(_code_is_empty(c) for c in codes):
        violations.append(Violation.EMPTY_CODE_RETURN)
    if any(not _code_is_empty(c) and not _PRINT_LIKE.search(c) for c in codes):
        violations.append(Violation.NO_PRINT_IN_CODE)
    if q.files:
        all_code = "\n".join(codes)
        if not any(f.basename in all_code for f in q.files):
            violations.append(Violation.PROVIDED_FILES_UNUSED)
    if t.termination is not Termination.FINAL_ANSWER:
        violations.append(Violation.NO_FINAL_ANSWER)
    return ConformanceReport(violations=tuple(violations))


def extract_reason_chain(turn: Turn) -> str:
    """The thought text of an agent turn, verbatim; code is never included."""
    if turn.kind is not TurnKind.AGENT:
        raise ValueError(f"reason chain requires an agent turn, got {turn.kind.value}")
    return turn.thought
