"""Benchmark runs: accuracy, code-error rate, and interaction statistics.

Code-error rate is averaged per code turn (not per question); the convention is
recorded in the report metadata.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Sequence

from .agent import EpisodeConfig, EpisodeResult, run_episode
from .core import ForgeError, JudgeVerdict, Question, agent_turn_count, trajectory_to_dict
from .gateway import Endpoint
from .sandbox import Executor
from .verifier import verify_correctness

ERROR_RATE_CONVENTION = "per_code_turn"


@dataclass(frozen=True)
class QuestionArtifact:
    """Everything persisted for one evaluated question."""

    question: Question
    episode: EpisodeResult | None
    verdict: JudgeVerdict
    failure: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "question_id": self.question.id,
            "verdict": {
                "correct": self.verdict.correct,
                "method": self.verdict.method,
                "rationale": self.verdict.rationale,
                "judge_model": self.verdict.judge_model,
            },
            "failure": self.failure,
        }
        if self.episode is not None:
            d["trajectory"] = trajectory_to_dict(self.episode.trajectory)
            d["executions"] = [
                {
                    "exit_status": r.exit_status,
                    "wall_time_s": round(r.wall_time, 3),
                    "truncated": r.truncated,
                }
                for r in self.episode.executions
            ]
            d["events"] = list(self.episode.events)
        return d


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    code_error_rate: float
    avg_agent_turns: float
    avg_output_tokens: float
    n_questions: int
    per_domain: dict[str, float]
    config_echo: dict[str, Any]
    no_code_turns: bool = False
    error_rate_convention: str = ERROR_RATE_CONVENTION

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "code_error_rate": self.code_error_rate,
            "avg_agent_turns": self.avg_agent_turns,
            "avg_output_tokens": self.avg_output_tokens,
            "n_questions": self.n_questions,
            "per_domain": dict(sorted(self.per_domain.items())),
            "config_echo": self.config_echo,
            "no_code_turns": self.no_code_turns,
            "error_rate_convention": self.error_rate_convention,
        }


def compute_code_error_rate(episodes: Sequence[EpisodeResult]) -> tuple[float, bool]:
    """(# code executions with non-ok status) / (# code executions); no code
    turns at all yields (0.0, flagged=True)."""
    total = sum(len(ep.executions) for ep in episodes)
    if total == 0:
        return 0.0, True
    errors = sum(1 for ep in episodes for r in ep.executions if r.counts_as_code_error)
    return float(Fraction(errors, total)), False


def interaction_stats(episodes: Sequence[EpisodeResult]) -> dict[str, float]:
    """Arithmetic means (exact rational, then float) of agent turn counts and
    per-episode output token sums."""
    if not episodes:
        return {"avg_agent_turns": 0.0, "avg_output_tokens": 0.0}
    n = len(episodes)
    turns = sum(agent_turn_count(ep.trajectory) for ep in episodes)
    tokens = sum(ep.total_tokens for ep in episodes)
    return {
        "avg_agent_turns": float(Fraction(turns, n)),
        "avg_output_tokens": float(Fraction(tokens, n)),
    }


def run_benchmark(
    corpus: Sequence[Question],
    cfg: EpisodeConfig,
    actor: Endpoint,
    judge: Endpoint | None = None,
    executor: Executor | None = None,
    corpus_root: str | Path = ".",
    workspaces_root: str | Path | None = None,
    artifacts_dir: str | Path | None = None,
    rel_tol: float = 1e-6,
    workers: int = 1,
    distractors_for: Callable[[Question], tuple] | None = None,
) -> tuple[EvalReport, list[QuestionArtifact]]:
    """One greedy episode per question; aborted or failed questions count as
    incorrect with their cause recorded, never excluded."""
    eval_cfg = replace(cfg, sampling=replace(cfg.sampling, temperature=0.0))

    def evaluate(q: Question) -> QuestionArtifact:
        q_cfg = (
            eval_cfg
            if distractors_for is None
            else replace(eval_cfg, distractors=distractors_for(q))
        )
        try:
            ep = run_episode(q, q_cfg, actor, executor, corpus_root, workspaces_root)
            verdict = verify_correctness(ep.trajectory, q, judge, rel_tol)
            return QuestionArtifact(question=q, episode=ep, verdict=verdict)
        except ForgeError as exc:
            return QuestionArtifact(
                question=q,
                episode=None,
                verdict=JudgeVerdict(
                    correct=False, method="exact", rationale=f"episode failed: {exc}"
                ),
                failure=f"{type(exc).__name__}: {exc}",
            )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            artifacts = list(pool.map(evaluate, corpus))
    else:
        artifacts = [evaluate(q) for q in corpus]

    if artifacts_dir is not None:
        artifacts_dir = Path(artifacts_dir)
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        for art in artifacts:
            with open(artifacts_dir / f"{art.question.id}.json", "w", encoding="utf-8") as fh:
                json.dump(art.to_dict(), fh, ensure_ascii=False, indent=2)

    report = build_report(artifacts, cfg)
    return report, artifacts


def build_report(artifacts: Sequence[QuestionArtifact], cfg: EpisodeConfig) -> EvalReport:
    """Reduce artifacts to an EvalReport; recomputable offline from persisted files."""
    n = len(artifacts)
    episodes = [a.episode for a in artifacts if a.episode is not None]
    correct = sum(1 for a in artifacts if a.verdict.correct)
    accuracy = float(Fraction(correct, n)) if n else 0.0
    error_rate, no_code = compute_code_error_rate(episodes)
    stats = interaction_stats(episodes)

    per_domain: dict[str, float] = {}
    by_domain: dict[str, list[QuestionArtifact]] = {}
    for a in artifacts:
        by_domain.setdefault(a.question.domain_label or "unlabeled", []).append(a)
    for domain, arts in by_domain.items():
        hits = sum(1 for a in arts if a.verdict.correct)
        per_domain[domain] = float(Fraction(hits, len(arts)))

    return EvalReport(
        accuracy=accuracy,
        code_error_rate=error_rate,
        avg_agent_turns=stats["avg_agent_turns"],
        avg_output_tokens=stats["avg_output_tokens"],
        n_questions=n,
        per_domain=per_domain,
        config_echo=cfg.to_dict(),
        no_code_turns=no_code,
    )


def report_csv_row(report: EvalReport, model: str, label: str = "") -> str:
    """One summary row for table assembly."""
    return ",".join(
        [
            model,
            label,
            f"{report.accuracy:.4f}",
            f"{report.code_error_rate:.4f}",
            f"{report.avg_agent_turns:.3f}",
            f"{report.avg_output_tokens:.1f}",
            str(report.n_questions),
        ]
    )
