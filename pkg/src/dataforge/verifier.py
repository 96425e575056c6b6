"""Correctness decisions against ground truth, plus error categorization.

Tier order is fixed: exact normalized match, then numeric tolerance match, then
an LLM judge. A deterministic hit never invokes the judge.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from . import prompts
from .core import JudgeVerdict, Question, SamplingConfig, Termination, Trajectory
from .gateway import ChatMessage, Endpoint
from .protocol import MalformedTrajectory, render_trajectory

DEFAULT_REL_TOL = 1e-6

JUDGE_SAMPLING = SamplingConfig(temperature=0.0, top_p=1.0, per_turn_token_budget=512, max_turns=1)

_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}\b)")
_VERDICT_LINE = re.compile(r"^\s*VERDICT\s*:\s*(CORRECT|INCORRECT)\b", re.IGNORECASE | re.MULTILINE)
_BARE_VERDICT = re.compile(r"^\s*(CORRECT|INCORRECT)\s*$", re.IGNORECASE | re.MULTILINE)
_REASON_LINE = re.compile(r"^\s*REASON\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_LABEL_LINE = re.compile(r"\b(CodeDefect|WrongHypothesis|PrematureTermination|DataMisread|FormatFailure|Other)\b")


class ErrorLabel(str, enum.Enum):
    CODE_DEFECT = "CodeDefect"
    WRONG_HYPOTHESIS = "WrongHypothesis"
    PREMATURE_TERMINATION = "PrematureTermination"
    DATA_MISREAD = "DataMisread"
    FORMAT_FAILURE = "FormatFailure"
    OTHER = "Other"


@dataclass(frozen=True)
class ErrorCategory:
    label: ErrorLabel
    evidence: str


def normalize_answer(text: str) -> str:
    """Trim, collapse whitespace, casefold, strip trailing periods and thousands
    separators; the deterministic tier absorbs the same noise the judge would."""
    s = " ".join(text.split()).casefold()
    s = _THOUSANDS.sub("", s)
    return s.rstrip(".").strip()


def parse_number(text: str) -> float | None:
    s = text.strip().rstrip(".")
    s = _THOUSANDS.sub("", s)
    if s.endswith("%"):
        s = s[:-1].strip()
    if s.startswith("$"):
        s = s[1:].strip()
    try:
        value = float(s)
    except ValueError:
        return None
    return value


def numeric_match(pred: str, ref: str, rel_tol: float = DEFAULT_REL_TOL) -> bool:
    """True iff both sides parse as numbers and agree to |p - r| <= tol * max(1, |r|)."""
    if rel_tol <= 0:
        raise ValueError("rel_tol must be > 0")
    p, r = parse_number(pred), parse_number(ref)
    if p is None or r is None:
        return False
    return abs(p - r) <= rel_tol * max(1.0, abs(r))


def verify_correctness(
    t: Trajectory,
    q: Question,
    judge: Endpoint | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
) -> JudgeVerdict:
    """Decide correctness of a trajectory's final answer against q.answer.

    No final answer is incorrect by rule. Gateway failures of the judge surface;
    a verdict is never fabricated.
    """
    if t.termination is not Termination.FINAL_ANSWER or t.final_answer is None:
        return JudgeVerdict(correct=False, method="exact", rationale="no final answer")
    pred, ref = t.final_answer, q.answer
    if normalize_answer(pred) == normalize_answer(ref):
        return JudgeVerdict(correct=True, method="exact", rationale="normalized strings equal")
    both_numeric = parse_number(pred) is not None and parse_number(ref) is not None
    if both_numeric and numeric_match(pred, ref, rel_tol):
        return JudgeVerdict(
            correct=True, method="numeric", rationale=f"within rel_tol={rel_tol}"
        )
    if judge is None:
        return JudgeVerdict(
            correct=False,
            method="numeric" if both_numeric else "exact",
            rationale="deterministic tiers failed; no judge configured",
        )
    prompt = prompts.judge_verdict_prompt().format(
        question=q.prompt, reference=ref, prediction=pred
    )
    reply = judge.complete([ChatMessage(role="user", content=prompt)], JUDGE_SAMPLING)
    verdict_match = _VERDICT_LINE.search(reply.text) or _BARE_VERDICT.search(reply.text)
    reason_match = _REASON_LINE.search(reply.text)
    rationale = (reason_match.group(1).strip() if reason_match else reply.text.strip()) or (
        "judge returned empty reply"
    )
    if verdict_match is None:
        return JudgeVerdict(
            correct=False,
            method="judge",
            rationale=f"unparseable judge reply: {rationale[:200]}",
            judge_model=judge.model,
        )
    return JudgeVerdict(
        correct=verdict_match.group(1).upper() == "CORRECT",
        method="judge",
        rationale=rationale,
        judge_model=judge.model,
    )


def _transcript_or_placeholder(t: Trajectory) -> str:
    try:
        return render_trajectory(t)
    except MalformedTrajectory:
        return "(no usable turns recorded)"


def categorize_error(t: Trajectory, q: Question, judge: Endpoint) -> ErrorCategory:
    """Ask the judge for one taxonomy label explaining an incorrect trajectory."""
    prompt = prompts.error_category_prompt().format(
        question=q.prompt,
        reference=q.answer,
        transcript=_transcript_or_placeholder(t),
    )
    reply = judge.complete([ChatMessage(role="user", content=prompt)], JUDGE_SAMPLING)
    match = _LABEL_LINE.search(reply.text)
    if match is None:
        return ErrorCategory(label=ErrorLabel.OTHER, evidence=reply.text.strip()[:500])
    return ErrorCategory(label=ErrorLabel(match.group(1)), evidence=reply.text.strip()[:500])
