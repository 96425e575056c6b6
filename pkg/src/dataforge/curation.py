"""Selection machinery: turn-length buckets, difficulty ladder, domain taxonomy,
balanced sampling, and the staged curation pipeline."""

from __future__ import annotations

import json
import random
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from . import prompts
from .agent import EpisodeConfig, EpisodeResult, generate_candidates, run_episode
from .core import (
    CONFORMANT_FAIL,
    CONFORMANT_PASS,
    CurationRecord,
    Difficulty,
    ForgeError,
    Question,
    TurnCategory,
    agent_turn_count,
)
from .enrichment import ReasoningVariant, TraceProvider, VariantMode, build_variant
from .gateway import ChatMessage, Endpoint, GatewayError
from .protocol import check_conformance
from .sandbox import Executor
from .verifier import JUDGE_SAMPLING, verify_correctness


class CurationError(ForgeError):
    pass


class TaxonomyDiverged(ForgeError):
    """Taxonomy building kept proposing new categories past the pass cap."""


UNCLASSIFIED = "unclassified"

_CATEGORY_LINE = re.compile(r"^\s*CATEGORY\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)
_NEW_CATEGORY_LINE = re.compile(
    r"^\s*NEW\s+CATEGORY\s*:\s*(.+?)\s*(?:--|—|:)\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE
)
_LABEL_LINE = re.compile(r"^\s*LABEL\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


# --- turn-length buckets ---------------------------------------------------------


def classify_turn_length(t) -> TurnCategory:
    """Bucket by agent turn count: <=3 short, 4-5 medium, >=6 long.

    A single-turn episode lands in short; the buckets must partition all n >= 1.
    """
    n = agent_turn_count(t)
    if n <= 3:
        return TurnCategory.SHORT
    if n <= 5:
        return TurnCategory.MEDIUM
    return TurnCategory.LONG


TURN_BUCKETS: dict[str, frozenset[TurnCategory]] = {
    "short": frozenset({TurnCategory.SHORT}),
    "medium": frozenset({TurnCategory.MEDIUM}),
    "long": frozenset({TurnCategory.LONG}),
    "mixed": frozenset({TurnCategory.SHORT, TurnCategory.MEDIUM, TurnCategory.LONG}),
    "all": frozenset({TurnCategory.SHORT, TurnCategory.MEDIUM, TurnCategory.LONG}),
}


# --- difficulty ladder -----------------------------------------------------------


@dataclass(frozen=True)
class SolverTier:
    name: str
    endpoint: Endpoint


@dataclass(frozen=True)
class SolverLadder:
    """Solver endpoints ordered weakest to strongest."""

    tiers: tuple[SolverTier, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiers", tuple(self.tiers))
        if not self.tiers:
            raise ValueError("a solver ladder needs at least one tier")


_TIER_LABELS = (Difficulty.EASY, Difficulty.MEDIUM, Difficulty.HARD)


def _greedy(cfg: EpisodeConfig) -> EpisodeConfig:
    return replace(cfg, sampling=replace(cfg.sampling, temperature=0.0, seed=None))


def probe_difficulty(
    q: Question,
    ladder: SolverLadder,
    cfg: EpisodeConfig,
    judge: Endpoint | None = None,
    executor: Executor | None = None,
    corpus_root: str | Path = ".",
    workspaces_root: str | Path | None = None,
    log: list[str] | None = None,
) -> Difficulty:
    """Label by the first (weakest) tier whose greedy episode is verified correct.

    Gateway failure makes a tier inconclusive (logged) rather than wrong; the
    label is computed over conclusive tiers only.
    """
    greedy_cfg = _greedy(cfg)
    for index, tier in enumerate(ladder.tiers):
        try:
            ep = run_episode(q, greedy_cfg, tier.endpoint, executor, corpus_root, workspaces_root)
            verdict = verify_correctness(ep.trajectory, q, judge)
        except GatewayError as exc:
            if log is not None:
                log.append(f"{q.id}: tier {tier.name} inconclusive: {exc}")
            continue
        if verdict.correct:
            return _TIER_LABELS[min(index, len(_TIER_LABELS) - 1)]
    return Difficulty.UNSOLVED


def is_low_complexity(
    q: Question,
    baseline: Endpoint,
    cfg: EpisodeConfig,
    judge: Endpoint | None = None,
    executor: Executor | None = None,
    corpus_root: str | Path = ".",
    workspaces_root: str | Path | None = None,
) -> bool:
    """True iff one greedy baseline episode solves the question. Gateway failures
    surface; a question is never silently marked hard."""
    ep = run_episode(q, _greedy(cfg), baseline, executor, corpus_root, workspaces_root)
    return verify_correctness(ep.trajectory, q, judge).correct


# --- domain taxonomy --------------------------------------------------------------


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.strip().casefold()).strip("-") or "category"


@dataclass(frozen=True)
class TaxonomyCategory:
    id: str
    name: str
    description: str = ""


@dataclass(frozen=True)
class Taxonomy:
    categories: tuple[TaxonomyCategory, ...]
    version: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        names = [c.name.casefold() for c in self.categories]
        if len(set(names)) != len(names):
            raise ValueError("taxonomy category names must be unique")

    def listing(self) -> str:
        return "\n".join(f"- {c.name}: {c.description}" for c in self.categories)

    def match(self, text: str) -> str | None:
        """Category id for a (possibly noisy) name reply, or None."""
        needle = text.strip().strip(".").casefold()
        for c in self.categories:
            if needle == c.name.casefold() or needle == c.id:
                return c.id
        for c in self.categories:
            if c.name.casefold() in needle:
                return c.id
        return None


def default_taxonomy() -> Taxonomy:
    data = json.loads(prompts.load_asset("taxonomy_default.json"))
    return taxonomy_from_dict(data)


def taxonomy_from_dict(data: dict[str, Any]) -> Taxonomy:
    return Taxonomy(
        categories=tuple(
            TaxonomyCategory(id=c["id"], name=c["name"], description=c.get("description", ""))
            for c in data["categories"]
        ),
        version=data.get("version", "custom"),
    )


def taxonomy_to_dict(tax: Taxonomy) -> dict[str, Any]:
    return {
        "version": tax.version,
        "categories": [
            {"id": c.id, "name": c.name, "description": c.description} for c in tax.categories
        ],
    }


def load_taxonomy(path: str | Path) -> Taxonomy:
    with open(path, "r", encoding="utf-8") as fh:
        return taxonomy_from_dict(json.load(fh))


def save_taxonomy(tax: Taxonomy, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(taxonomy_to_dict(tax), fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def classify_domain(q: Question, tax: Taxonomy, judge: Endpoint) -> str:
    """One category id from the taxonomy; retries once, then the unclassified
    sentinel (which deliberately lies outside the taxonomy)."""
    if not tax.categories:
        raise ValueError("taxonomy must be non-empty")
    prompt = prompts.domain_prompt().format(categories=tax.listing(), question=q.prompt)
    for _ in range(2):
        reply = judge.complete([ChatMessage(role="user", content=prompt)], JUDGE_SAMPLING)
        m = _CATEGORY_LINE.search(reply.text)
        candidate = m.group(1) if m else reply.text
        matched = tax.match(candidate)
        if matched is not None:
            return matched
    return UNCLASSIFIED


def build_taxonomy(
    sample: Sequence[Question],
    judge: Endpoint,
    pass_cap: int = 5,
    seed_sample_size: int = 20,
    intermediate_path: str | Path | None = None,
) -> Taxonomy:
    """Three-stage taxonomy construction.

    Stage 1 labels a small sample without constraints to seed categories; stage 2
    iteratively classifies every question, letting the model propose categories
    for outliers, until a full pass proposes none; stage 3 freezes the result.
    Merge/split decisions stay human: the working set is written to
    intermediate_path after every pass for editing between runs.
    """
    if not sample:
        raise ValueError("sample must be non-empty")
    categories: dict[str, TaxonomyCategory] = {}

    def add(name: str, description: str) -> bool:
        cid = _slug(name)
        if cid in categories or not cid:
            return False
        categories[cid] = TaxonomyCategory(id=cid, name=name.strip(), description=description)
        return True

    for q in sample[:seed_sample_size]:
        prompt = prompts.domain_seed_prompt().format(question=q.prompt)
        reply = judge.complete([ChatMessage(role="user", content=prompt)], JUDGE_SAMPLING)
        m = _LABEL_LINE.search(reply.text)
        if m:
            add(m.group(1), "(proposed during seeding; edit before freezing)")

    def dump(version: str) -> Taxonomy:
        tax = Taxonomy(categories=tuple(categories.values()), version=version)
        if intermediate_path is not None:
            save_taxonomy(tax, intermediate_path)
        return tax

    for pass_no in range(1, pass_cap + 1):
        working = dump(f"pass-{pass_no}")
        proposals = 0
        for q in sample:
            prompt = prompts.domain_proposal_prompt().format(
                categories=working.listing() or "- (none yet)", question=q.prompt
            )
            reply = judge.complete([ChatMessage(role="user", content=prompt)], JUDGE_SAMPLING)
            m = _NEW_CATEGORY_LINE.search(reply.text)
            if m and add(m.group(1), m.group(2)):
                proposals += 1
                working = Taxonomy(categories=tuple(categories.values()), version=working.version)
        if proposals == 0:
            return dump(f"built-{len(categories)}")
    raise TaxonomyDiverged(f"still proposing new categories after {pass_cap} passes")


# --- balanced sampling -------------------------------------------------------------


def water_filling_cap(domain_counts: dict[str, int], target_n: int) -> int:
    """Smallest per-domain cap whose capped total reaches target_n."""
    total = sum(domain_counts.values())
    if target_n > total:
        raise CurationError(f"target {target_n} exceeds corpus size {total}")
    cap = 1
    while sum(min(n, cap) for n in domain_counts.values()) < target_n:
        cap += 1
    return cap


def _largest_remainder(targets: dict[Any, float], total: int, counts: dict[Any, int]) -> dict[Any, int]:
    """Round fractional targets to integers summing to `total`, capped by counts."""
    floors = {k: min(int(v), counts[k]) for k, v in targets.items()}
    remaining = total - sum(floors.values())
    order = sorted(
        targets,
        key=lambda k: (-(targets[k] - int(targets[k])), str(k)),
    )
    result = dict(floors)
    i = 0
    while remaining > 0 and i < 10 * len(order) + 10:
        for k in order:
            if remaining == 0:
                break
            if result[k] < counts[k]:
                result[k] += 1
                remaining -= 1
        i += 1
    return result


def _difficulty_key(r: CurationRecord) -> str:
    return r.difficulty.value if r.difficulty else "none"


def sample_balanced(
    records: Sequence[CurationRecord],
    target_n: int,
    mode: str = "balanced",
    seed: int = 0,
) -> list[CurationRecord]:
    """Subsample to target_n.

    original: difficulty-stratified uniform subsample, preserving the empirical
    domain frequencies in expectation.

    balanced: water-filling — the smallest per-domain cap reaching target_n;
    domains below the cap are kept whole, domains at or above it are uniformly
    subsampled; overshoot is trimmed one record each from the at-or-above-cap
    domains in lexicographic id order. Within each domain the pick is stratified
    by difficulty, then a repair pass keeps global difficulty marginals within
    one record of their fractional targets.
    """
    if mode not in ("original", "balanced"):
        raise ValueError(f"unknown sampling mode: {mode}")
    if target_n > len(records):
        raise CurationError(f"target {target_n} exceeds corpus size {len(records)}")
    unlabeled = [i for i, r in enumerate(records) if r.domain is None]
    if unlabeled:
        raise CurationError(f"{len(unlabeled)} records lack a domain label")
    rng = random.Random(seed)
    indexed = list(enumerate(records))

    if mode == "original":
        by_diff: dict[str, list[int]] = {}
        for i, r in indexed:
            by_diff.setdefault(_difficulty_key(r), []).append(i)
        counts = {f: len(v) for f, v in by_diff.items()}
        frac = {f: target_n * counts[f] / len(records) for f in counts}
        quotas = _largest_remainder(frac, target_n, counts)
        chosen: list[int] = []
        for f in sorted(by_diff):
            chosen.extend(rng.sample(by_diff[f], quotas[f]))
        chosen.sort()
        return [records[i] for i in chosen]

    by_domain: dict[str, list[int]] = {}
    for i, r in indexed:
        by_domain.setdefault(r.domain, []).append(i)  # type: ignore[arg-type]
    domain_counts = {d: len(v) for d, v in by_domain.items()}
    cap = water_filling_cap(domain_counts, target_n)
    quotas = {d: min(n, cap) for d, n in domain_counts.items()}
    overshoot = sum(quotas.values()) - target_n
    trimmable = sorted(d for d, n in domain_counts.items() if n >= cap)
    for d in trimmable[:overshoot]:
        quotas[d] -= 1

    # per-domain difficulty cells
    cells: dict[str, dict[str, list[int]]] = {}
    for d, idxs in by_domain.items():
        cells[d] = {}
        for i in idxs:
            cells[d].setdefault(_difficulty_key(records[i]), []).append(i)

    diff_keys = sorted({f for dd in cells.values() for f in dd})
    frac_target = {f: 0.0 for f in diff_keys}
    alloc: dict[str, dict[str, int]] = {}
    for d in sorted(cells):
        n_d = domain_counts[d]
        cell_counts = {f: len(v) for f, v in cells[d].items()}
        frac = {f: quotas[d] * cell_counts[f] / n_d for f in cell_counts}
        alloc[d] = _largest_remainder(frac, quotas[d], cell_counts)
        for f, v in frac.items():
            frac_target[f] += v

    # repair: nudge global difficulty marginals to within +/-1 of fractional targets
    def marginal(f: str) -> int:
        return sum(a.get(f, 0) for a in alloc.values())

    for _ in range(4 * len(diff_keys) * max(1, len(alloc))):
        devs = {f: marginal(f) - frac_target[f] for f in diff_keys}
        hi = max(diff_keys, key=lambda f: devs[f])
        lo = min(diff_keys, key=lambda f: devs[f])
        if devs[hi] <= 1.0 + 1e-9 and devs[lo] >= -1.0 - 1e-9:
            break
        moved = False
        for d in sorted(alloc):
            have = alloc[d].get(hi, 0)
            room = len(cells[d].get(lo, [])) - alloc[d].get(lo, 0)
            if have > 0 and room > 0:
                alloc[d][hi] = have - 1
                alloc[d][lo] = alloc[d].get(lo, 0) + 1
                moved = True
                break
        if not moved:
            break

    chosen = []
    for d in sorted(alloc):
        for f in sorted(alloc[d]):
            take = alloc[d][f]
            pool = cells[d][f]
            chosen.extend(pool if take >= len(pool) else rng.sample(pool, take))
    chosen.sort()
    return [records[i] for i in chosen]


# --- pipeline ---------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything run_pipeline needs; endpoints are optional and their stages
    degrade to pass-through when unset."""

    actor: Endpoint
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    distractors_for: Callable[[Question], tuple] | None = None
    k: int = 3
    judge: Endpoint | None = None
    baseline: Endpoint | None = None
    ladder: SolverLadder | None = None
    difficulty_keep: frozenset[Difficulty] | None = None
    taxonomy: Taxonomy | None = None
    domain_judge: Endpoint | None = None
    summarizer: Endpoint | None = None
    trace_provider: TraceProvider | None = None
    variant: VariantMode = VariantMode.SUMMARIZED
    turn_bucket: str = "medium"
    sampling_mode: str | None = None
    sampling_target: int | None = None
    seed: int = 0
    rel_tol: float = 1e-6
    executor: Executor | None = None
    corpus_root: str | Path = "."
    workspaces_root: str | Path | None = None
    workers: int = 1


STAGES = (
    "generated",
    "correct",
    "conformant",
    "complexity",
    "turn_bucket",
    "difficulty",
    "domain",
    "enriched",
    "sampled",
)


class StageReport:
    """Per-stage survivor counts with drop reasons; counts are monotone."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.survivors = Counter()
        self.dropped: dict[str, Counter] = {s: Counter() for s in STAGES}
        self.quarantined: list[dict[str, str]] = []
        self.flags = Counter()

    def survive(self, stage: str, n: int = 1) -> None:
        with self._lock:
            self.survivors[stage] += n

    def drop(self, stage: str, reason: str, n: int = 1) -> None:
        with self._lock:
            self.dropped[stage][reason] += n

    def quarantine(self, question_id: str, cause: str) -> None:
        with self._lock:
            self.quarantined.append({"question_id": question_id, "cause": cause})

    def flag(self, name: str, n: int = 1) -> None:
        with self._lock:
            self.flags[name] += n

    def to_dict(self) -> dict[str, Any]:
        return {
            "stages": [
                {
                    "name": s,
                    "survivors": self.survivors.get(s, 0),
                    "dropped": dict(sorted(self.dropped[s].items())),
                }
                for s in STAGES
            ],
            "quarantined": self.quarantined,
            "flags": dict(sorted(self.flags.items())),
        }


def episode_config_for(cfg: PipelineConfig, q: Question) -> EpisodeConfig:
    if cfg.distractors_for is None:
        return cfg.episode
    return replace(cfg.episode, distractors=cfg.distractors_for(q))


def curate_candidates(
    q: Question,
    episodes: Sequence[EpisodeResult],
    cfg: PipelineConfig,
    report: StageReport,
) -> list[CurationRecord]:
    """Run one question's candidates through every selection stage in order."""
    episode_cfg = episode_config_for(cfg, q)
    records: list[CurationRecord] = []
    for ep in episodes:
        report.survive("generated")
        records.append(CurationRecord(trajectory=ep.trajectory))

    # correctness (rejection sampling)
    survivors: list[CurationRecord] = []
    for rec in records:
        verdict = verify_correctness(rec.trajectory, q, cfg.judge, cfg.rel_tol)
        rec = rec.with_stage("correct", "pass" if verdict.correct else "fail", verdict=verdict)
        if verdict.correct:
            report.survive("correct")
            survivors.append(rec)
        else:
            report.drop("correct", verdict.method)
    records, survivors = survivors, []
    if not records:
        return []

    # format conformance
    for rec in records:
        conf = check_conformance(rec.trajectory, q)
        if conf.passed:
            rec = rec.with_stage("conformant", "pass", conformant=CONFORMANT_PASS)
            report.survive("conformant")
            survivors.append(rec)
        else:
            reason = ",".join(v.value for v in conf.violations)
            rec = rec.with_stage(
                "conformant", "fail", conformant=CONFORMANT_FAIL, conformant_reason=reason
            )
            for v in conf.violations:
                report.drop("conformant", v.value)
    records, survivors = survivors, []
    if not records:
        return []

    # baseline complexity (one probe per question)
    if cfg.baseline is not None:
        solvable = is_low_complexity(
            q, cfg.baseline, episode_cfg, cfg.judge, cfg.executor,
            cfg.corpus_root, cfg.workspaces_root,
        )
        if solvable:
            report.drop("complexity", "baseline_solvable", n=len(records))
            return []
    report.survive("complexity", len(records))

    # turn-length bucket
    allowed = TURN_BUCKETS[cfg.turn_bucket]
    for rec in records:
        category = classify_turn_length(rec.trajectory)
        if agent_turn_count(rec.trajectory) == 1:
            report.flag("single_turn_mapped_to_short")
        rec = replace(rec, turn_category=category)
        if category in allowed:
            rec = rec.with_stage("turn_bucket", "pass")
            report.survive("turn_bucket")
            survivors.append(rec)
        else:
            report.drop("turn_bucket", category.value)
    records, survivors = survivors, []
    if not records:
        return []

    # difficulty ladder (optional)
    if cfg.ladder is not None:
        label = probe_difficulty(
            q, cfg.ladder, episode_cfg, cfg.judge, cfg.executor,
            cfg.corpus_root, cfg.workspaces_root,
        )
        keep = cfg.difficulty_keep is None or label in cfg.difficulty_keep
        for rec in records:
            rec = replace(rec, difficulty=label)
            if keep:
                rec = rec.with_stage("difficulty", "pass")
                survivors.append(rec)
            else:
                report.drop("difficulty", label.value)
        records, survivors = survivors, []
        report.survive("difficulty", len(records))
        if not records:
            return []
    else:
        report.survive("difficulty", len(records))

    # domain classification (optional)
    if cfg.taxonomy is not None and (cfg.domain_judge or cfg.judge) is not None:
        domain = classify_domain(q, cfg.taxonomy, cfg.domain_judge or cfg.judge)
        if domain == UNCLASSIFIED:
            report.flag("unclassified_domain")
        records = [replace(rec, domain=domain).with_stage("domain", "pass") for rec in records]
    report.survive("domain", len(records))

    # enrichment
    for rec in records:
        try:
            enriched = build_variant(
                rec.trajectory,
                ReasoningVariant(mode=cfg.variant),
                summarizer=cfg.summarizer,
                trace_provider=cfg.trace_provider,
            )
        except ForgeError as exc:
            report.drop("enriched", type(exc).__name__)
            continue
        report.survive("enriched")
        survivors.append(replace(rec, trajectory=enriched).with_stage("enriched", "pass"))
    return survivors


def run_pipeline(
    questions: Sequence[Question],
    cfg: PipelineConfig,
    candidates: dict[str, list[EpisodeResult]] | None = None,
) -> tuple[list[CurationRecord], dict[str, Any]]:
    """Generate (unless pre-generated candidates are given), then filter, label,
    enrich, and optionally subsample. Per-question failures quarantine the
    question and the pipeline proceeds."""
    report = StageReport()

    def process(q: Question) -> list[CurationRecord]:
        try:
            if candidates is not None:
                eps = candidates.get(q.id, [])
            else:
                eps = generate_candidates(
                    q, cfg.k, episode_config_for(cfg, q), cfg.actor, cfg.executor,
                    cfg.corpus_root, cfg.workspaces_root,
                )
            return curate_candidates(q, eps, cfg, report)
        except ForgeError as exc:
            report.quarantine(q.id, f"{type(exc).__name__}: {exc}")
            return []

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            per_question = list(pool.map(process, questions))
    else:
        per_question = [process(q) for q in questions]

    selected = [rec for batch in per_question for rec in batch]

    if cfg.sampling_mode and cfg.sampling_target is not None:
        selected = sample_balanced(selected, cfg.sampling_target, cfg.sampling_mode, cfg.seed)
    report.survive("sampled", len(selected))
    return selected, report.to_dict()
