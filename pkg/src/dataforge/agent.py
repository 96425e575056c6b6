"""The multi-turn plan -> code -> execute -> observe loop producing trajectories."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import prompts
from .core import (
    DataFileRef,
    ForgeError,
    Question,
    SamplingConfig,
    Termination,
    Trajectory,
    Turn,
    TurnKind,
    trajectory_from_dict,
    trajectory_to_dict,
)
from .gateway import ChatMessage, Endpoint, GatewayError
from .protocol import OBSERVATION_HEADER, ProtocolError, parse_agent_message
from .sandbox import Executor, ExecutionResult, Limits, execute_code, prepare_workspace, to_observation


class GenerationExhausted(ForgeError):
    """Every candidate episode for a question failed."""


FORMAT_CORRECTIVE = (
    "Your last message violated the required format. Begin each step with "
    '"## Thought: " followed by your reasoning, include the corresponding code in a '
    '```python fenced block with print() output, or conclude with "## Final Answer: " '
    "followed by your answer. Please continue in the required format."
)

CONTINUE_COMPACT = (
    "Your last message was cut off by the per-turn token budget. Continue more "
    "compactly: keep the required format but restate only what is needed."
)


@dataclass(frozen=True)
class EpisodeConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    include_table_info: bool = False
    distractors: tuple[DataFileRef, ...] = ()
    limits: Limits = field(default_factory=Limits)
    system_prompt: str = "base"

    def __post_init__(self) -> None:
        object.__setattr__(self, "distractors", tuple(self.distractors))

    def to_dict(self) -> dict[str, Any]:
        return {
            "sampling": {
                "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p,
                "per_turn_token_budget": self.sampling.per_turn_token_budget,
                "max_turns": self.sampling.max_turns,
                "seed": self.sampling.seed,
            },
            "include_table_info": self.include_table_info,
            "distractors": [d.path for d in self.distractors],
            "limits": {
                "timeout_s": self.limits.timeout_s,
                "memory_bytes": self.limits.memory_bytes,
                "output_bytes": self.limits.output_bytes,
            },
            "system_prompt": self.system_prompt,
        }


def build_context(q: Question, cfg: EpisodeConfig) -> list[ChatMessage]:
    """System prompt plus the user message listing the question and its files.

    Distractor files are listed exactly like the real ones; schema summaries are
    appended only when include_table_info is on.
    """
    listed = tuple(q.files) + tuple(cfg.distractors)
    lines = [q.prompt]
    if listed:
        lines.append("")
        lines.append("Provided files:")
        for ref in listed:
            lines.append(f"- {ref.path}")
            if cfg.include_table_info and ref.schema_summary:
                for schema_line in ref.schema_summary.splitlines():
                    lines.append(f"  {schema_line}")
    return [
        ChatMessage(role="system", content=prompts.system_prompt(cfg.system_prompt)),
        ChatMessage(role="user", content="\n".join(lines)),
    ]


@dataclass(frozen=True)
class EpisodeResult:
    """A trajectory plus the runtime evidence that does not live on the trajectory."""

    trajectory: Trajectory
    executions: tuple[ExecutionResult, ...]
    raw_completions: tuple[str, ...]
    wall_time: float
    events: tuple[str, ...] = ()
    prompt_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return sum(self.trajectory.per_turn_tokens)


def _usable_parts(text: str) -> tuple[str | None, str | None, str | None]:
    """Parse a completion into (thought, code, final_answer); (None, None, None)
    means the message is unusable and needs a corrective round."""
    try:
        msg = parse_agent_message(text)
    except ProtocolError:
        return None, None, None
    if msg.final_answer is not None:
        return msg.joined_thoughts(), None, msg.final_answer
    thought, code = msg.first_executable()
    if code is None or not thought:
        return None, None, None
    return thought, code, None


def run_episode(
    q: Question,
    cfg: EpisodeConfig,
    actor: Endpoint,
    executor: Executor | None = None,
    corpus_root: str | Path = ".",
    workspaces_root: str | Path | None = None,
) -> EpisodeResult:
    """Drive one episode until final answer, max turns, or abort.

    The trajectory records only clean rounds: a malformed or code-less completion
    triggers one corrective observation in the conversation (not the trajectory);
    a second one aborts the episode. Budget-truncated completions are nudged to
    continue compactly without counting as a strike.
    """
    started = time.monotonic()
    messages = build_context(q, cfg)
    turns: list[Turn] = []
    per_turn_tokens: list[int] = []
    executions: list[ExecutionResult] = []
    raw: list[str] = []
    events: list[str] = []
    strikes = 0
    calls = 0
    prompt_tokens = 0
    termination: Termination | None = None

    ws = prepare_workspace(q, cfg.distractors, corpus_root, workspaces_root)
    try:
        while termination is None:
            if calls >= cfg.sampling.max_turns:
                termination = Termination.MAX_TURNS
                break
            try:
                completion = actor.complete(messages, cfg.sampling)
            except GatewayError as exc:
                events.append(f"gateway_error: {exc}")
                termination = Termination.GATEWAY_ERROR
                break
            calls += 1
            prompt_tokens += completion.prompt_tokens
            raw.append(completion.text)
            thought, code, final = _usable_parts(completion.text)

            if final is not None:
                turns.append(
                    Turn(kind=TurnKind.FINAL_ANSWER, thought=thought or "", body=final)
                )
                per_turn_tokens.append(completion.completion_tokens)
                termination = Termination.FINAL_ANSWER
                break

            if code is None:
                if completion.finish_reason == "length":
                    events.append("truncated_unusable_completion")
                    corrective = CONTINUE_COMPACT
                else:
                    strikes += 1
                    events.append("unusable_completion")
                    if strikes >= 2:
                        termination = Termination.EXECUTION_ABORT
                        break
                    corrective = FORMAT_CORRECTIVE
                messages.append(ChatMessage(role="assistant", content=completion.text))
                messages.append(
                    ChatMessage(role="user", content=f"{OBSERVATION_HEADER} {corrective}")
                )
                continue

            turns.append(Turn(kind=TurnKind.AGENT, thought=thought, code=code))
            per_turn_tokens.append(completion.completion_tokens)
            result = execute_code(code, ws, cfg.limits, executor)
            executions.append(result)
            obs = to_observation(result, cfg.limits.output_bytes)
            turns.append(Turn(kind=TurnKind.OBSERVATION, body=obs))
            messages.append(ChatMessage(role="assistant", content=completion.text))
            messages.append(ChatMessage(role="user", content=f"{OBSERVATION_HEADER} {obs}"))
    finally:
        ws.cleanup()

    trajectory = Trajectory(
        question_id=q.id,
        turns=tuple(turns),
        termination=termination,
        model_id=actor.model,
        sampling=cfg.sampling,
        per_turn_tokens=tuple(per_turn_tokens),
    )
    return EpisodeResult(
        trajectory=trajectory,
        executions=tuple(executions),
        raw_completions=tuple(raw),
        wall_time=time.monotonic() - started,
        events=tuple(events),
        prompt_tokens=prompt_tokens,
    )


def candidate_seed(base: int | None, index: int) -> int:
    return (base if base is not None else 0) * 1009 + index


def generate_candidates(
    q: Question,
    k: int,
    cfg: EpisodeConfig,
    actor: Endpoint,
    executor: Executor | None = None,
    corpus_root: str | Path = ".",
    workspaces_root: str | Path | None = None,
) -> list[EpisodeResult]:
    """k independent episodes, each with its own derived sampling seed and a
    fresh workspace. Candidates that fail outright (exceptions, or episodes cut
    off by gateway errors) are dropped with a logged cause; an empty result
    raises GenerationExhausted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    results: list[EpisodeResult] = []
    failures: list[str] = []
    for i in range(k):
        sampling = replace(cfg.sampling, seed=candidate_seed(cfg.sampling.seed, i))
        candidate_cfg = replace(cfg, sampling=sampling)
        try:
            ep = run_episode(q, candidate_cfg, actor, executor, corpus_root, workspaces_root)
        except ForgeError as exc:
            failures.append(f"candidate {i}: {exc}")
            continue
        if ep.trajectory.termination is Termination.GATEWAY_ERROR:
            failures.append(f"candidate {i}: {'; '.join(ep.events) or 'gateway error'}")
            continue
        results.append(ep)
    if not results:
        raise GenerationExhausted(f"all {k} candidates failed for {q.id}: {'; '.join(failures)}")
    return results


# --- persistence of generated candidates ----------------------------------------


def episode_to_dict(ep: EpisodeResult) -> dict[str, Any]:
    # wall time deliberately excluded: candidate files must be byte-stable under replay
    return {
        "trajectory": trajectory_to_dict(ep.trajectory),
        "executions": [
            {"exit_status": r.exit_status, "truncated": r.truncated} for r in ep.executions
        ],
        "events": list(ep.events),
    }


def episode_from_dict(d: dict[str, Any]) -> EpisodeResult:
    return EpisodeResult(
        trajectory=trajectory_from_dict(d["trajectory"]),
        executions=tuple(
            ExecutionResult(
                stdout="",
                stderr="",
                exit_status=r["exit_status"],
                wall_time=0.0,
                truncated=r.get("truncated", False),
            )
            for r in d.get("executions", ())
        ),
        raw_completions=(),
        wall_time=0.0,
        events=tuple(d.get("events", ())),
    )


def manifest_row(q: Question, ep: EpisodeResult, trajectory_file: str | None = None) -> dict[str, Any]:
    return {
        "question_id": q.id,
        "trajectory_file": trajectory_file,
        "termination": ep.trajectory.termination.value,
        "prompt_tokens": ep.prompt_tokens,
        "completion_tokens": ep.total_tokens,
        "wall_time_s": round(ep.wall_time, 3),
    }
