"""Conversion of curated records into role-tagged training records, dedup, and
corpus statistics."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .agent import EpisodeConfig, build_context
from .core import (
    CONFORMANT_PASS,
    CurationRecord,
    ForgeError,
    Question,
    TurnKind,
    agent_turn_count,
)
from .protocol import OBSERVATION_HEADER, render_turn

PIPELINE_VERSION = "0.1.0"

TOKEN_BUCKETS = (512, 1024, 2048, 4096, 8192)


class EmitError(ForgeError):
    """Record did not pass all stages or lacks required labels."""


@dataclass(frozen=True)
class TrainingMessage:
    role: str  # system | user | assistant | tool
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"unknown training role: {self.role}")


@dataclass(frozen=True)
class TrainingRecord:
    messages: tuple[TrainingMessage, ...]
    meta: dict[str, Any]

    def content_hash(self) -> str:
        blob = json.dumps(
            [[m.role, m.content] for m in self.messages],
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def to_training_record(
    r: CurationRecord,
    q: Question,
    episode_cfg: EpisodeConfig | None = None,
    variant: str = "original",
) -> TrainingRecord:
    """Render one fully curated record as a fine-tuning unit.

    System message is the generation prompt, the user message reproduces the
    question context, agent turns become assistant messages, observations become
    tool messages.
    """
    if r.conformant != CONFORMANT_PASS or r.verdict is None or not r.verdict.correct:
        raise EmitError(
            f"record for {r.trajectory.question_id} did not pass all stages "
            f"(conformant={r.conformant}, verdict={r.verdict})"
        )
    if r.turn_category is None:
        raise EmitError(f"record for {r.trajectory.question_id} lacks a turn category label")
    cfg = episode_cfg or EpisodeConfig()
    system, user = build_context(q, cfg)
    messages: list[TrainingMessage] = [
        TrainingMessage(role="system", content=system.content),
        TrainingMessage(role="user", content=user.content),
    ]
    for turn in r.trajectory.turns:
        if turn.kind is TurnKind.OBSERVATION:
            messages.append(
                TrainingMessage(role="tool", content=f"{OBSERVATION_HEADER} {turn.body}")
            )
        else:
            messages.append(TrainingMessage(role="assistant", content=render_turn(turn)))
    meta = {
        "question_id": q.id,
        "source": q.source,
        "turn_category": r.turn_category.value,
        "difficulty": r.difficulty.value if r.difficulty else None,
        "domain": r.domain,
        "variant": variant,
        "pipeline_version": PIPELINE_VERSION,
        "total_tokens": sum(r.trajectory.per_turn_tokens),
    }
    return TrainingRecord(messages=tuple(messages), meta=meta)


def training_record_to_dict(rec: TrainingRecord) -> dict[str, Any]:
    return {
        "messages": [{"role": m.role, "content": m.content} for m in rec.messages],
        "meta": rec.meta,
    }


def training_record_from_dict(d: dict[str, Any]) -> TrainingRecord:
    return TrainingRecord(
        messages=tuple(TrainingMessage(role=m["role"], content=m["content"]) for m in d["messages"]),
        meta=dict(d["meta"]),
    )


def emit_jsonl(records: Sequence[TrainingRecord], path: str | Path) -> dict[str, Any]:
    """Write one UTF-8 JSON object per line with fixed key order; duplicates
    (same question id and content hash) are dropped and counted. Returns the
    manifest: count, dup count, file sha256, per-label histograms."""
    path = Path(path)
    seen: set[tuple[str, str]] = set()
    kept: list[TrainingRecord] = []
    dup_count = 0
    for rec in records:
        key = (str(rec.meta.get("question_id")), rec.content_hash())
        if key in seen:
            dup_count += 1
            continue
        seen.add(key)
        kept.append(rec)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in kept:
            fh.write(json.dumps(training_record_to_dict(rec), ensure_ascii=False) + "\n")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return {
        "count": len(kept),
        "dup_count": dup_count,
        "sha256": digest,
        "histograms": {
            "turn_category": _meta_histogram(kept, "turn_category"),
            "difficulty": _meta_histogram(kept, "difficulty"),
            "domain": _meta_histogram(kept, "domain"),
        },
    }


def load_training_records(path: str | Path) -> list[TrainingRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(training_record_from_dict(json.loads(line)))
    return records


def _meta_histogram(records: Iterable[TrainingRecord], key: str) -> dict[str, int]:
    counts = Counter(str(rec.meta.get(key)) for rec in records)
    return dict(sorted(counts.items()))


def token_bucket(total: int) -> str:
    lower = 0
    for edge in TOKEN_BUCKETS:
        if total < edge:
            return f"{lower}-{edge - 1}"
        lower = edge
    return f"{TOKEN_BUCKETS[-1]}+"


def corpus_stats(records: Sequence[CurationRecord]) -> dict[str, Any]:
    """Exhaustive label counts plus turn-count and token-total histograms; every
    histogram sums to the record count."""
    by_category = Counter(r.turn_category.value if r.turn_category else "none" for r in records)
    by_difficulty = Counter(r.difficulty.value if r.difficulty else "none" for r in records)
    by_domain = Counter(r.domain or "none" for r in records)
    turn_hist = Counter(str(agent_turn_count(r.trajectory)) for r in records)
    token_hist = Counter(token_bucket(sum(r.trajectory.per_turn_tokens)) for r in records)
    return {
        "count": len(records),
        "turn_category": dict(sorted(by_category.items())),
        "difficulty": dict(sorted(by_difficulty.items())),
        "domain": dict(sorted(by_domain.items())),
        "turn_count_histogram": dict(sorted(turn_hist.items(), key=lambda kv: int(kv[0]))),
        "token_total_histogram": dict(sorted(token_hist.items())),
    }


def training_corpus_stats(records: Sequence[TrainingRecord]) -> dict[str, Any]:
    """Same bookkeeping computed from an emitted corpus file."""
    turn_counts = [sum(1 for m in r.messages if m.role == "assistant") for r in records]
    token_totals = [int(r.meta.get("total_tokens") or 0) for r in records]
    return {
        "count": len(records),
        "turn_category": _meta_histogram(records, "turn_category"),
        "difficulty": _meta_histogram(records, "difficulty"),
        "domain": _meta_histogram(records, "domain"),
        "turn_count_histogram": dict(
            sorted(Counter(str(n) for n in turn_counts).items(), key=lambda kv: int(kv[0]))
        ),
        "token_total_histogram": dict(sorted(Counter(token_bucket(t) for t in token_totals).items())),
    }
