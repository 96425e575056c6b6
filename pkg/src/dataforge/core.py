"""Shared domain model: questions, turns, trajectories, and curation state.

Every other module consumes these types. All of them are immutable value
objects after construction and safe to share across workers.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath
from typing import Any, Iterable, Sequence


class ForgeError(Exception):
    """Base class for all errors raised by this package."""


class CorpusError(ForgeError):
    """A question corpus or referenced data file is invalid or missing."""


class FileFormat(str, enum.Enum):
    CSV = "csv"
    XLSX = "xlsx"
    OTHER = "other"


class TurnKind(str, enum.Enum):
    AGENT = "agent"
    OBSERVATION = "observation"
    FINAL_ANSWER = "final_answer"


class Termination(str, enum.Enum):
    FINAL_ANSWER = "final_answer"
    MAX_TURNS = "max_turns"
    GATEWAY_ERROR = "gateway_error"
    EXECUTION_ABORT = "execution_abort"


class TurnCategory(str, enum.Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    UNSOLVED = "unsolved"


def _is_safe_relative(path: str) -> bool:
    if not path or path.startswith(("/", "\\")):
        return False
    parts = PurePosixPath(path.replace("\\", "/")).parts
    return ".." not in parts and not PurePosixPath(path).is_absolute()


@dataclass(frozen=True)
class DataFileRef:
    """Reference to one staged data file, by workspace-relative path."""

    path: str
    format: FileFormat = FileFormat.OTHER
    schema_summary: str | None = None

    def __post_init__(self) -> None:
        if not _is_safe_relative(self.path):
            raise CorpusError(f"file path must be relative without traversal: {self.path!r}")

    @property
    def basename(self) -> str:
        return PurePosixPath(self.path).name


def guess_format(path: str) -> FileFormat:
    suffix = PurePosixPath(path).suffix.lower()
    if suffix == ".csv":
        return FileFormat.CSV
    if suffix in (".xlsx", ".xls"):
        return FileFormat.XLSX
    return FileFormat.OTHER


@dataclass(frozen=True)
class Question:
    """One analytical task: prompt, data files, and ground-truth answer."""

    id: str
    prompt: str
    files: tuple[DataFileRef, ...] = ()
    answer: str = ""
    source: str = ""
    domain_label: str | None = None
    difficulty_label: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "files", tuple(self.files))
        if not self.id:
            raise CorpusError("question id must be non-empty")
        if not self.prompt:
            raise CorpusError(f"question {self.id}: prompt must be non-empty")
        paths = [f.path for f in self.files]
        if len(set(paths)) != len(paths):
            raise CorpusError(f"question {self.id}: duplicate file paths")


@dataclass(frozen=True)
class Turn:
    """One trajectory element: a model step, an observation, or the final answer."""

    kind: TurnKind
    thought: str = ""
    code: str | None = None
    body: str = ""


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.6
    top_p: float = 1.0
    per_turn_token_budget: int = 2048
    max_turns: int = 10
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.per_turn_token_budget < 1:
            raise ValueError("per_turn_token_budget must be positive")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


GREEDY = SamplingConfig(temperature=0.0, top_p=1.0)


@dataclass(frozen=True)
class Trajectory:
    """Ordered record of one episode: agent turns, observations, final answer."""

    question_id: str
    turns: tuple[Turn, ...]
    termination: Termination
    model_id: str = ""
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    per_turn_tokens: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "per_turn_tokens", tuple(self.per_turn_tokens))

    @property
    def final_answer(self) -> str | None:
        if self.turns and self.turns[-1].kind is TurnKind.FINAL_ANSWER:
            return self.turns[-1].body
        return None

    def code_blocks(self) -> list[str]:
        return [t.code for t in self.turns if t.kind is TurnKind.AGENT and t.code is not None]


def validate_trajectory(t: Trajectory) -> list[str]:
    """Check every structural invariant; returns the list of violations (empty = valid)."""
    report: list[str] = []
    turns = t.turns
    for i, turn in enumerate(turns):
        if turn.kind is TurnKind.AGENT:
            if not turn.thought:
                report.append(f"turn {i}: agent turn has empty thought")
            if i + 1 < len(turns):
                if turns[i + 1].kind is not TurnKind.OBSERVATION:
                    report.append(f"turn {i}: missing observation after agent turn")
            else:
                report.append(f"turn {i}: missing observation after agent turn")
        elif turn.kind is TurnKind.OBSERVATION:
            if turn.thought or turn.code:
                report.append(f"turn {i}: observation carries thought or code")
            if i == 0 or turns[i - 1].kind is not TurnKind.AGENT:
                report.append(f"turn {i}: observation not preceded by agent turn")
        elif turn.kind is TurnKind.FINAL_ANSWER:
            if turn.code:
                report.append(f"turn {i}: final answer carries code")
            if i != len(turns) - 1:
                report.append(f"turn {i}: final answer not last")
    final_count = sum(1 for turn in turns if turn.kind is TurnKind.FINAL_ANSWER)
    if final_count > 1:
        report.append("more than one final answer turn")
    ends_final = bool(turns) and turns[-1].kind is TurnKind.FINAL_ANSWER
    if ends_final != (t.termination is Termination.FINAL_ANSWER):
        report.append("termination inconsistent with last turn kind")
    n_model_turns = sum(1 for turn in turns if turn.kind in (TurnKind.AGENT, TurnKind.FINAL_ANSWER))
    if len(t.per_turn_tokens) != n_model_turns:
        report.append(
            f"per_turn_tokens length {len(t.per_turn_tokens)} != model turn count {n_model_turns}"
        )
    if any(n < 0 for n in t.per_turn_tokens):
        report.append("negative per-turn token count")
    return report


def agent_turn_count(t: Trajectory) -> int:
    """Number of model-authored messages, the final-answer message included."""
    return sum(1 for turn in t.turns if turn.kind in (TurnKind.AGENT, TurnKind.FINAL_ANSWER))


@dataclass(frozen=True)
class JudgeVerdict:
    """Outcome of the correctness decision for one trajectory."""

    correct: bool
    method: str  # "exact" | "numeric" | "judge"
    rationale: str
    judge_model: str | None = None

    def __post_init__(self) -> None:
        if self.method not in ("exact", "numeric", "judge"):
            raise ValueError(f"unknown verdict method: {self.method}")
        if (self.method == "judge") != (self.judge_model is not None):
            raise ValueError("judge_model must be set exactly for judge verdicts")
        if self.method == "judge" and not self.rationale:
            raise ValueError("judge verdicts require a rationale")


CONFORMANT_UNKNOWN = "unknown"
CONFORMANT_PASS = "pass"
CONFORMANT_FAIL = "fail"


@dataclass(frozen=True)
class CurationRecord:
    """A trajectory plus the per-stage labels accumulated through the pipeline."""

    trajectory: Trajectory
    conformant: str = CONFORMANT_UNKNOWN
    conformant_reason: str | None = None
    verdict: JudgeVerdict | None = None
    turn_category: TurnCategory | None = None
    difficulty: Difficulty | None = None
    domain: str | None = None
    stage_log: tuple[tuple[str, str], ...] = ()

    def with_stage(self, stage: str, outcome: str, **changes: Any) -> CurationRecord:
        return replace(self, stage_log=self.stage_log + ((stage, outcome),), **changes)

    @property
    def passed_all_stages(self) -> bool:
        return (
            self.conformant == CONFORMANT_PASS
            and self.verdict is not None
            and self.verdict.correct
            and not any(outcome.startswith("fail") for _, outcome in self.stage_log)
        )


# --- serialization -----------------------------------------------------------
#
# Dict shapes below are the on-disk JSON contracts; key order is fixed so that
# emitted files are byte-reproducible.


def question_to_dict(q: Question) -> dict[str, Any]:
    d: dict[str, Any] = {
        "id": q.id,
        "question": q.prompt,
        "files": [_file_to_dict(f) for f in q.files],
        "answer": q.answer,
        "source": q.source,
    }
    if q.domain_label is not None:
        d["domain"] = q.domain_label
    if q.difficulty_label is not None:
        d["difficulty"] = q.difficulty_label
    return d


def _file_to_dict(f: DataFileRef) -> dict[str, Any]:
    d: dict[str, Any] = {"path": f.path, "format": f.format.value}
    if f.schema_summary is not None:
        d["schema_summary"] = f.schema_summary
    return d


def question_from_dict(d: dict[str, Any]) -> Question:
    try:
        files = tuple(
            DataFileRef(
                path=f["path"],
                format=FileFormat(f.get("format") or guess_format(f["path"]).value),
                schema_summary=f.get("schema_summary"),
            )
            for f in d.get("files", [])
        )
        return Question(
            id=str(d["id"]),
            prompt=d["question"],
            files=files,
            answer=str(d.get("answer", "")),
            source=str(d.get("source", "")),
            domain_label=d.get("domain"),
            difficulty_label=d.get("difficulty"),
        )
    except KeyError as exc:
        raise CorpusError(f"question record missing key {exc}") from exc


def load_questions(path: str | Path) -> list[Question]:
    """Read a JSON-Lines question corpus; ids must be unique."""
    questions: list[Question] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                q = question_from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON") from exc
            if q.id in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate question id {q.id!r}")
            seen.add(q.id)
            questions.append(q)
    return questions


def save_questions(questions: Iterable[Question], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(question_to_dict(q), ensure_ascii=False) + "\n")


def sampling_to_dict(s: SamplingConfig) -> dict[str, Any]:
    return {
        "temperature": s.temperature,
        "top_p": s.top_p,
        "per_turn_token_budget": s.per_turn_token_budget,
        "max_turns": s.max_turns,
        "seed": s.seed,
    }


def sampling_from_dict(d: dict[str, Any]) -> SamplingConfig:
    return SamplingConfig(
        temperature=d.get("temperature", 0.6),
        top_p=d.get("top_p", 1.0),
        per_turn_token_budget=d.get("per_turn_token_budget", 2048),
        max_turns=d.get("max_turns", 10),
        seed=d.get("seed"),
    )


def turn_to_dict(t: Turn) -> dict[str, Any]:
    return {"kind": t.kind.value, "thought": t.thought, "code": t.code, "body": t.body}


def turn_from_dict(d: dict[str, Any]) -> Turn:
    return Turn(
        kind=TurnKind(d["kind"]),
        thought=d.get("thought", ""),
        code=d.get("code"),
        body=d.get("body", ""),
    )


def trajectory_to_dict(t: Trajectory) -> dict[str, Any]:
    return {
        "question_id": t.question_id,
        "model_id": t.model_id,
        "termination": t.termination.value,
        "sampling": sampling_to_dict(t.sampling),
        "per_turn_tokens": list(t.per_turn_tokens),
        "turns": [turn_to_dict(turn) for turn in t.turns],
    }


def trajectory_from_dict(d: dict[str, Any]) -> Trajectory:
    return Trajectory(
        question_id=d["question_id"],
        turns=tuple(turn_from_dict(x) for x in d["turns"]),
        termination=Termination(d["termination"]),
        model_id=d.get("model_id", ""),
        sampling=sampling_from_dict(d.get("sampling", {})),
        per_turn_tokens=tuple(d.get("per_turn_tokens", ())),
    )


def verdict_to_dict(v: JudgeVerdict) -> dict[str, Any]:
    return {
        "correct": v.correct,
        "method": v.method,
        "rationale": v.rationale,
        "judge_model": v.judge_model,
    }


def verdict_from_dict(d: dict[str, Any]) -> JudgeVerdict:
    return JudgeVerdict(
        correct=d["correct"],
        method=d["method"],
        rationale=d.get("rationale", ""),
        judge_model=d.get("judge_model"),
    )


def record_to_dict(r: CurationRecord) -> dict[str, Any]:
    return {
        "trajectory": trajectory_to_dict(r.trajectory),
        "conformant": r.conformant,
        "conformant_reason": r.conformant_reason,
        "verdict": verdict_to_dict(r.verdict) if r.verdict else None,
        "turn_category": r.turn_category.value if r.turn_category else None,
        "difficulty": r.difficulty.value if r.difficulty else None,
        "domain": r.domain,
        "stage_log": [list(entry) for entry in r.stage_log],
    }


def record_from_dict(d: dict[str, Any]) -> CurationRecord:
    return CurationRecord(
        trajectory=trajectory_from_dict(d["trajectory"]),
        conformant=d.get("conformant", CONFORMANT_UNKNOWN),
        conformant_reason=d.get("conformant_reason"),
        verdict=verdict_from_dict(d["verdict"]) if d.get("verdict") else None,
        turn_category=TurnCategory(d["turn_category"]) if d.get("turn_category") else None,
        difficulty=Difficulty(d["difficulty"]) if d.get("difficulty") else None,
        domain=d.get("domain"),
        stage_log=tuple((s, o) for s, o in d.get("stage_log", [])),
    )


def load_records(path: str | Path) -> list[CurationRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_dict(json.loads(line)))
    return records


def save_records(records: Sequence[CurationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r), ensure_ascii=False) + "\n")
