"""Reasoning-length variants: original, full-trace, and summarized middle turns.

Only the thoughts of middle agent turns are ever rewritten; first turn, final
answer, code blocks, and observations stay byte-identical.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Mapping, Protocol

from . import prompts
from .core import ForgeError, SamplingConfig, Trajectory, TurnKind
from .gateway import ChatMessage, Endpoint
from .protocol import extract_reason_chain

RECONSTRUCTION_HEADER = "## Reconstruction:"

SUMMARIZER_SAMPLING = SamplingConfig(
    temperature=0.0, top_p=1.0, per_turn_token_budget=1024, max_turns=1
)


class SummaryParseError(ForgeError):
    """Summarizer reply lacked the reconstruction header twice in a row."""


class EnrichmentError(ForgeError):
    """A summary was keyed to a turn that is not a middle turn."""


class TraceUnavailable(ForgeError):
    """Full-reasoning mode requested without a trace provider."""


class VariantMode(str, enum.Enum):
    ORIGINAL = "original"
    FULL = "full"
    SUMMARIZED = "summarized"


@dataclass(frozen=True)
class ReasoningVariant:
    mode: VariantMode
    source_model: str | None = None


class TraceProvider(Protocol):
    """Supplies full reasoning traces for middle turns in FULL mode."""

    def get_trace(self, t: Trajectory, turn_index: int) -> str | None: ...


def summarize_reasoning(chain: str, summarizer: Endpoint) -> str:
    """Condense one reasoning chain via the summarization prompt.

    The reply must carry the literal reconstruction header; one retry is allowed
    before SummaryParseError.
    """
    if not chain:
        raise ValueError("reasoning chain must be non-empty")
    prompt = prompts.summarization_prompt().format(reasoning_content=chain)
    messages = [ChatMessage(role="user", content=prompt)]
    for attempt in range(2):
        reply = summarizer.complete(messages, SUMMARIZER_SAMPLING)
        pos = reply.text.find(RECONSTRUCTION_HEADER)
        if pos >= 0:
            return reply.text[pos + len(RECONSTRUCTION_HEADER):].strip()
        if attempt == 0:
            messages = [
                ChatMessage(role="user", content=prompt),
                ChatMessage(role="assistant", content=reply.text),
                ChatMessage(
                    role="user",
                    content=f'Reply again, starting with the literal header "{RECONSTRUCTION_HEADER}".',
                ),
            ]
    raise SummaryParseError("summarizer reply lacked the reconstruction header twice")


def middle_turns(t: Trajectory) -> list[int]:
    """Indices (into t.turns) of agent turns strictly between the first agent
    turn and the final-answer (or, without one, the last agent) turn."""
    agent_positions = [i for i, turn in enumerate(t.turns) if turn.kind is TurnKind.AGENT]
    if not agent_positions:
        return []
    first = agent_positions[0]
    if t.turns[-1].kind is TurnKind.FINAL_ANSWER:
        upper = len(t.turns) - 1
    else:
        upper = agent_positions[-1]
    return [i for i in agent_positions if first < i < upper]


def insert_summary(t: Trajectory, summaries: Mapping[int, str]) -> Trajectory:
    """Replace the thought of each targeted middle turn; every other field of
    every turn is carried over unchanged."""
    allowed = set(middle_turns(t))
    bad = set(summaries) - allowed
    if bad:
        raise EnrichmentError(f"summary keys outside middle turns: {sorted(bad)}")
    new_turns = tuple(
        replace(turn, thought=summaries[i]) if i in summaries else turn
        for i, turn in enumerate(t.turns)
    )
    return replace(t, turns=new_turns)


def build_variant(
    t: Trajectory,
    v: ReasoningVariant,
    summarizer: Endpoint | None = None,
    trace_provider: TraceProvider | None = None,
) -> Trajectory:
    if v.mode is VariantMode.ORIGINAL:
        return t
    targets = middle_turns(t)
    if v.mode is VariantMode.FULL:
        if trace_provider is None:
            raise TraceUnavailable("full-reasoning mode requires a trace provider")
        traces: dict[int, str] = {}
        for i in targets:
            trace = trace_provider.get_trace(t, i)
            if trace is None:
                raise TraceUnavailable(f"no trace available for turn {i}")
            traces[i] = trace
        return insert_summary(t, traces)
    if summarizer is None:
        raise EnrichmentError("summarized mode requires a summarizer endpoint")
    summaries = {
        i: summarize_reasoning(extract_reason_chain(t.turns[i]), summarizer) for i in targets
    }
    return insert_summary(t, summaries)
