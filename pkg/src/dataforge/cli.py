"""`forge`: one entry point for generation, curation, enrichment, emission,
evaluation, taxonomy building, and corpus statistics."""

from __future__ import annotations

import json
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Iterator

import click

from . import prompts
from .agent import (
    EpisodeConfig,
    episode_from_dict,
    episode_to_dict,
    generate_candidates,
    manifest_row,
)
from .config import (
    ConfigError,
    EndpointFactory,
    RunConfig,
    build_distractors,
    write_run_manifest,
)
from .core import (
    Difficulty,
    ForgeError,
    SamplingConfig,
    load_questions,
    load_records,
    save_records,
)
from .curation import (
    PipelineConfig,
    SolverLadder,
    SolverTier,
    build_taxonomy,
    default_taxonomy,
    episode_config_for,
    load_taxonomy,
    run_pipeline,
    save_taxonomy,
)
from .emitter import (
    emit_jsonl,
    load_training_records,
    to_training_record,
    training_corpus_stats,
)
from .enrichment import ReasoningVariant, VariantMode, build_variant
from .evaluation import report_csv_row, run_benchmark
from .sandbox import LocalExecutor, ShimExecutor

DIFFICULTY_POLICIES: dict[str, frozenset[Difficulty] | None] = {
    "easy": frozenset({Difficulty.EASY}),
    "medium": frozenset({Difficulty.MEDIUM}),
    "hard": frozenset({Difficulty.HARD}),
    "medium+hard": frozenset({Difficulty.MEDIUM, Difficulty.HARD}),
    "all": None,
}


@contextmanager
def staged_outputs(**finals: str | Path) -> Iterator[dict[str, Path]]:
    """Write outputs to .partial paths; rename into place only on success."""
    partials = {name: Path(f"{p}.partial") for name, p in finals.items()}
    for p in partials.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    yield partials
    for name, partial in partials.items():
        partial.replace(Path(finals[name]))


def _fail(message: str) -> None:
    raise click.ClickException(message)


class Context:
    def __init__(self, config: str | None, seed: int | None, replay: str | None, record: str | None):
        self.config = RunConfig.load(config)
        self.seed = seed
        gw = self.config.gateway_options()
        self.factory = EndpointFactory(
            replay=replay,
            record=record,
            max_concurrency=int(gw.get("max_concurrency", 4)),
        )
        prompts.clear_overrides()
        for name, path in self.config.data.get("prompts", {}).items():
            prompts.set_override(f"{name}.txt", Path(path).read_text(encoding="utf-8"))

    def sampling(self, budget: int | None) -> SamplingConfig:
        s = self.config.sampling()
        changes: dict[str, Any] = {}
        if budget is not None:
            changes["per_turn_token_budget"] = budget
        if self.seed is not None:
            changes["seed"] = self.seed
        if changes:
            s = replace(s, **changes)
        return s

    def episode_config(self, budget: int | None, with_table_info: bool) -> EpisodeConfig:
        return EpisodeConfig(
            sampling=self.sampling(budget),
            include_table_info=with_table_info or bool(self.config.pipeline().get("table_info")),
            limits=self.config.limits(),
            system_prompt=str(self.config.pipeline().get("system_prompt", "base")),
        )

    def executor(self):
        section = self.config.data.get("executor", {})
        kind = section.get("kind", "local")
        if kind == "local":
            return LocalExecutor()
        if kind == "shim":
            cmd = section.get("shim_cmd") or [sys.executable, "-m", "shim"]
            return ShimExecutor(cmd)
        raise ConfigError(f"unknown executor kind: {kind!r}")

    def paths(self) -> dict[str, Any]:
        return self.config.paths()

    def questions(self, override: str | None):
        path = override or self.paths().get("questions")
        if not path:
            _fail("no question corpus given: pass --questions or set [paths].questions")
        return load_questions(path), Path(path)

    def corpus_root(self) -> Path:
        return Path(self.paths().get("corpus_root", "."))

    def workspaces_root(self) -> Path | None:
        root = self.paths().get("workspace_root")
        return Path(root) if root else None

    def endpoint(self, role: str, required: bool = False):
        spec = self.config.endpoint_spec(role)
        if spec is None:
            if required:
                _fail(f"endpoint {role!r} is not configured; add [endpoints.{role}] to the config")
            return None
        return self.factory.endpoint(spec)

    def ladder(self) -> SolverLadder | None:
        specs = self.config.solver_tier_specs()
        if not specs:
            return None
        return SolverLadder(
            tiers=tuple(SolverTier(name=s.name, endpoint=self.factory.endpoint(s)) for s in specs)
        )

    def taxonomy(self):
        path = self.paths().get("taxonomy")
        return load_taxonomy(path) if path else default_taxonomy()

    def pipeline_config(
        self,
        questions,
        budget: int | None,
        with_table_info: bool,
        distractors: int,
        k: int | None,
        turn_bucket: str | None,
        difficulty: str | None,
        variant: str | None,
        sampling_mode: str | None,
        target: int | None,
    ) -> PipelineConfig:
        pl = self.config.pipeline()
        episode = self.episode_config(budget, with_table_info)
        n_distract = distractors if distractors else int(pl.get("distractors", 0))
        resolver = (
            (lambda q: build_distractors(questions, q, n_distract)) if n_distract else None
        )
        chosen_difficulty = difficulty or str(pl.get("difficulty", "all"))
        if chosen_difficulty not in DIFFICULTY_POLICIES:
            _fail(f"unknown difficulty policy: {chosen_difficulty}")
        mode = sampling_mode or pl.get("sampling_mode")
        judge = self.endpoint("judge")
        return PipelineConfig(
            actor=self.endpoint("actor", required=True),
            episode=episode,
            distractors_for=resolver,
            k=k or int(pl.get("k", 3)),
            judge=judge,
            baseline=self.endpoint("baseline"),
            ladder=self.ladder(),
            difficulty_keep=DIFFICULTY_POLICIES[chosen_difficulty],
            taxonomy=self.taxonomy() if judge is not None else None,
            domain_judge=self.endpoint("domain_judge"),
            summarizer=self.endpoint("summarizer"),
            variant=VariantMode(variant or pl.get("variant", "summarized")),
            turn_bucket=turn_bucket or str(pl.get("turn_bucket", "medium")),
            sampling_mode=mode,
            sampling_target=target if target is not None else pl.get("sampling_target"),
            seed=self.seed if self.seed is not None else int(pl.get("seed", 0)),
            executor=self.executor(),
            corpus_root=self.corpus_root(),
            workspaces_root=self.workspaces_root(),
            workers=int(pl.get("workers", 1)),
        )


def common_options(f):
    f = click.option("--config", "config_path", type=click.Path(), default=None,
                     help="TOML run config")(f)
    f = click.option("--seed", type=int, default=None, help="seed for every stochastic choice")(f)
    f = click.option("--replay", type=click.Path(), default=None,
                     help="serve completions from this replay store")(f)
    f = click.option("--record", type=click.Path(), default=None,
                     help="record completions into this store")(f)
    return f


@click.group()
def main() -> None:
    """Synthesize, curate, and evaluate multi-turn data-analysis trajectories."""


@main.command()
@common_options
@click.option("--questions", type=click.Path(), default=None)
@click.option("--k", type=int, default=None, help="candidates per question")
@click.option("--budget", type=int, default=None, help="per-turn token budget")
@click.option("--with-table-info", is_flag=True, default=False)
@click.option("--distractors", type=int, default=0)
@click.option("--out", type=click.Path(), default="out", help="output directory")
def generate(config_path, seed, replay, record, questions, k, budget, with_table_info,
             distractors, out) -> None:
    """Generate k candidate trajectories per question."""
    ctx = Context(config_path, seed, replay, record)
    qs, qpath = ctx.questions(questions)
    actor = ctx.endpoint("actor", required=True)
    episode = ctx.episode_config(budget, with_table_info)
    executor = ctx.executor()
    k = k or int(ctx.config.pipeline().get("k", 3))
    out = Path(out)
    candidates_path = out / "candidates.jsonl"
    log_path = out / "generate.log.jsonl"
    with staged_outputs(candidates=candidates_path, log=log_path) as tmp:
        with open(tmp["candidates"], "w", encoding="utf-8") as cand_fh, open(
            tmp["log"], "w", encoding="utf-8"
        ) as log_fh:
            for q in qs:
                cfg = episode
                if distractors:
                    cfg = replace(episode, distractors=build_distractors(qs, q, distractors))
                try:
                    eps = generate_candidates(
                        q, k, cfg, actor, executor, ctx.corpus_root(), ctx.workspaces_root()
                    )
                except ForgeError as exc:
                    log_fh.write(json.dumps({"question_id": q.id, "error": str(exc)}) + "\n")
                    continue
                for i, ep in enumerate(eps):
                    row = {"question_id": q.id, "candidate_index": i, **episode_to_dict(ep)}
                    cand_fh.write(json.dumps(row, ensure_ascii=False) + "\n")
                    log_fh.write(json.dumps(manifest_row(q, ep), ensure_ascii=False) + "\n")
    write_run_manifest(
        out / "generate.manifest.json", "generate", ctx.config,
        inputs={"questions": qpath}, outputs={"candidates": candidates_path}, seed=seed,
        extra={"usage": ctx.factory.usage.snapshot()},
    )
    click.echo(f"wrote {candidates_path}")


def _load_candidates(path: str | Path):
    grouped: dict[str, list] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            grouped.setdefault(row["question_id"], []).append(episode_from_dict(row))
    return grouped


@main.command()
@common_options
@click.option("--questions", type=click.Path(), default=None)
@click.option("--candidates", "candidates_path", type=click.Path(), default=None,
              help="pre-generated candidates (from `forge generate`)")
@click.option("--k", type=int, default=None)
@click.option("--budget", type=int, default=None)
@click.option("--with-table-info", is_flag=True, default=False)
@click.option("--distractors", type=int, default=0)
@click.option("--turn-bucket", type=click.Choice(["short", "medium", "long", "mixed", "all"]),
              default=None)
@click.option("--difficulty", type=click.Choice(list(DIFFICULTY_POLICIES)), default=None)
@click.option("--variant", type=click.Choice([v.value for v in VariantMode]), default=None)
@click.option("--sampling", "sampling_mode", type=click.Choice(["original", "balanced"]),
              default=None)
@click.option("--target", type=int, default=None, help="subsample size for --sampling")
@click.option("--out", type=click.Path(), default="out")
def curate(config_path, seed, replay, record, questions, candidates_path, k, budget,
           with_table_info, distractors, turn_bucket, difficulty, variant, sampling_mode,
           target, out) -> None:
    """Filter, label, enrich, and subsample candidate trajectories."""
    ctx = Context(config_path, seed, replay, record)
    qs, qpath = ctx.questions(questions)
    cfg = ctx.pipeline_config(qs, budget, with_table_info, distractors, k, turn_bucket,
                              difficulty, variant, sampling_mode, target)
    candidates = _load_candidates(candidates_path) if candidates_path else None
    records, report = run_pipeline(qs, cfg, candidates)
    out = Path(out)
    records_path = out / "records.jsonl"
    report_path = out / "stage_report.json"
    with staged_outputs(records=records_path, report=report_path) as tmp:
        save_records(records, tmp["records"])
        with open(tmp["report"], "w", encoding="utf-8") as fh:
            json.dump(report, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    inputs = {"questions": qpath}
    if candidates_path:
        inputs["candidates"] = Path(candidates_path)
    write_run_manifest(
        out / "curate.manifest.json", "curate", ctx.config,
        inputs=inputs, outputs={"records": records_path, "stage_report": report_path}, seed=seed,
        extra={"usage": ctx.factory.usage.snapshot()},
    )
    click.echo(f"curated {len(records)} records -> {records_path}")


@main.command()
@common_options
@click.option("--records", "records_path", type=click.Path(), required=True)
@click.option("--variant", type=click.Choice([v.value for v in VariantMode]),
              default="summarized")
@click.option("--out", type=click.Path(), default="out")
def enrich(config_path, seed, replay, record, records_path, variant, out) -> None:
    """Build reasoning-length variants for already-curated records."""
    ctx = Context(config_path, seed, replay, record)
    summarizer = ctx.endpoint("summarizer")
    if variant == "summarized" and summarizer is None:
        _fail("summarized variant needs [endpoints.summarizer] in the config")
    records = load_records(records_path)
    mode = ReasoningVariant(mode=VariantMode(variant))
    enriched = []
    for rec in records:
        new_t = build_variant(rec.trajectory, mode, summarizer=summarizer)
        enriched.append(replace(rec, trajectory=new_t).with_stage("enriched", "pass"))
    out = Path(out)
    enriched_path = out / "enriched.jsonl"
    with staged_outputs(enriched=enriched_path) as tmp:
        save_records(enriched, tmp["enriched"])
    write_run_manifest(
        out / "enrich.manifest.json", "enrich", ctx.config,
        inputs={"records": Path(records_path)}, outputs={"enriched": enriched_path}, seed=seed,
        extra={"usage": ctx.factory.usage.snapshot(), "variant": variant},
    )
    click.echo(f"enriched {len(enriched)} records -> {enriched_path}")


@main.command()
@common_options
@click.option("--records", "records_path", type=click.Path(), required=True)
@click.option("--questions", type=click.Path(), default=None)
@click.option("--variant", type=click.Choice([v.value for v in VariantMode]), default=None,
              help="variant label stored in record metadata")
@click.option("--with-table-info", is_flag=True, default=False)
@click.option("--distractors", type=int, default=0)
@click.option("--out", type=click.Path(), default="out")
def emit(config_path, seed, replay, record, records_path, questions, variant,
         with_table_info, distractors, out) -> None:
    """Emit the fine-tuning corpus (JSONL plus sidecar manifest)."""
    ctx = Context(config_path, seed, replay, record)
    qs, qpath = ctx.questions(questions)
    by_id = {q.id: q for q in qs}
    records = load_records(records_path)
    episode = ctx.episode_config(None, with_table_info)
    variant = variant or str(ctx.config.pipeline().get("variant", "summarized"))
    training = []
    for rec in records:
        q = by_id.get(rec.trajectory.question_id)
        if q is None:
            _fail(f"record references unknown question {rec.trajectory.question_id!r}")
        cfg = episode
        if distractors:
            cfg = replace(episode, distractors=build_distractors(qs, q, distractors))
        training.append(to_training_record(rec, q, cfg, variant=variant))
    out = Path(out)
    corpus_path = out / "corpus.jsonl"
    manifest_path = out / "manifest.json"
    with staged_outputs(corpus=corpus_path) as tmp:
        corpus_manifest = emit_jsonl(training, tmp["corpus"])
    write_run_manifest(
        manifest_path, "emit", ctx.config,
        inputs={"records": Path(records_path), "questions": qpath},
        outputs={"corpus": corpus_path}, seed=seed,
        extra={"corpus": corpus_manifest},
    )
    click.echo(f"emitted {corpus_manifest['count']} records -> {corpus_path}")


@main.command()
@common_options
@click.option("--questions", type=click.Path(), default=None)
@click.option("--candidates", "candidates_path", type=click.Path(), default=None)
@click.option("--k", type=int, default=None)
@click.option("--budget", type=int, default=None)
@click.option("--with-table-info", is_flag=True, default=False)
@click.option("--distractors", type=int, default=0)
@click.option("--turn-bucket", type=click.Choice(["short", "medium", "long", "mixed", "all"]),
              default=None)
@click.option("--difficulty", type=click.Choice(list(DIFFICULTY_POLICIES)), default=None)
@click.option("--variant", type=click.Choice([v.value for v in VariantMode]), default=None)
@click.option("--sampling", "sampling_mode", type=click.Choice(["original", "balanced"]),
              default=None)
@click.option("--target", type=int, default=None)
@click.option("--out", type=click.Path(), default="out")
def pipeline(config_path, seed, replay, record, questions, candidates_path, k, budget,
             with_table_info, distractors, turn_bucket, difficulty, variant, sampling_mode,
             target, out) -> None:
    """One-shot pipeline: generate, curate, enrich, and emit in a single run."""
    ctx = Context(config_path, seed, replay, record)
    qs, qpath = ctx.questions(questions)
    cfg = ctx.pipeline_config(qs, budget, with_table_info, distractors, k, turn_bucket,
                              difficulty, variant, sampling_mode, target)
    candidates = _load_candidates(candidates_path) if candidates_path else None
    records, report = run_pipeline(qs, cfg, candidates)
    by_id = {q.id: q for q in qs}
    training = []
    for rec in records:
        q = by_id[rec.trajectory.question_id]
        episode = episode_config_for(cfg, q)
        training.append(to_training_record(rec, q, episode, variant=cfg.variant.value))
    out = Path(out)
    corpus_path = out / "corpus.jsonl"
    records_path = out / "records.jsonl"
    report_path = out / "stage_report.json"
    with staged_outputs(corpus=corpus_path, records=records_path, report=report_path) as tmp:
        corpus_manifest = emit_jsonl(training, tmp["corpus"])
        save_records(records, tmp["records"])
        with open(tmp["report"], "w", encoding="utf-8") as fh:
            json.dump(report, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    write_run_manifest(
        out / "manifest.json", "pipeline", ctx.config,
        inputs={"questions": qpath},
        outputs={"corpus": corpus_path, "records": records_path, "stage_report": report_path},
        seed=seed, extra={"corpus": corpus_manifest, "usage": ctx.factory.usage.snapshot()},
    )
    click.echo(f"pipeline complete: {corpus_manifest['count']} training records -> {corpus_path}")


@main.command(name="eval")
@common_options
@click.option("--questions", type=click.Path(), default=None)
@click.option("--budget", type=int, default=None)
@click.option("--with-table-info", is_flag=True, default=False)
@click.option("--distractors", type=int, default=0)
@click.option("--csv", "csv_path", type=click.Path(), default=None,
              help="append a summary row to this CSV")
@click.option("--label", type=str, default="", help="config label for the CSV row")
@click.option("--out", type=click.Path(), default="out")
def eval_cmd(config_path, seed, replay, record, questions, budget, with_table_info,
             distractors, csv_path, label, out) -> None:
    """Run a benchmark corpus: accuracy, code-error rate, interaction stats."""
    ctx = Context(config_path, seed, replay, record)
    qs, qpath = ctx.questions(questions)
    actor = ctx.endpoint("actor", required=True)
    judge = ctx.endpoint("judge")
    episode = ctx.episode_config(budget, with_table_info)
    resolver = (lambda q: build_distractors(qs, q, distractors)) if distractors else None
    out = Path(out)
    report, _ = run_benchmark(
        qs, episode, actor, judge,
        executor=ctx.executor(),
        corpus_root=ctx.corpus_root(),
        workspaces_root=ctx.workspaces_root(),
        artifacts_dir=out / "artifacts",
        workers=int(ctx.config.pipeline().get("workers", 1)),
        distractors_for=resolver,
    )
    report_path = out / "report.json"
    with staged_outputs(report=report_path) as tmp:
        with open(tmp["report"], "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2)
            fh.write("\n")
    write_run_manifest(
        out / "eval.manifest.json", "eval", ctx.config,
        inputs={"questions": qpath}, outputs={"report": report_path}, seed=seed,
        extra={"usage": ctx.factory.usage.snapshot()},
    )
    if csv_path:
        with open(csv_path, "a", encoding="utf-8") as fh:
            fh.write(report_csv_row(report, actor.model, label) + "\n")
    click.echo(f"{'accuracy':<20}{report.accuracy:.4f}")
    click.echo(f"{'code error rate':<20}{report.code_error_rate:.4f}")
    click.echo(f"{'avg agent turns':<20}{report.avg_agent_turns:.3f}")
    click.echo(f"{'avg output tokens':<20}{report.avg_output_tokens:.1f}")
    click.echo(f"{'questions':<20}{report.n_questions}")


@main.command()
@common_options
@click.option("--build", is_flag=True, default=False,
              help="build a fresh taxonomy from a question sample (default: ship the built-in one)")
@click.option("--questions", type=click.Path(), default=None)
@click.option("--sample", type=int, default=50, help="sample size for stage-1 seeding")
@click.option("--pass-cap", type=int, default=5)
@click.option("--out", type=click.Path(), default="taxonomy.json")
def taxonomy(config_path, seed, replay, record, build, questions, sample, pass_cap, out) -> None:
    """Write the domain taxonomy (built-in ten categories, or freshly built)."""
    ctx = Context(config_path, seed, replay, record)
    if not build:
        save_taxonomy(default_taxonomy(), out)
        click.echo(f"wrote default taxonomy -> {out}")
        return
    qs, _ = ctx.questions(questions)
    judge = ctx.endpoint("judge", required=True)
    tax = build_taxonomy(
        qs[:sample] if sample else qs, judge, pass_cap=pass_cap,
        intermediate_path=Path(str(out) + ".working"),
    )
    save_taxonomy(tax, out)
    click.echo(f"built taxonomy with {len(tax.categories)} categories -> {out}")


@main.command()
@click.argument("corpus", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def stats(corpus, out) -> None:
    """Histogram statistics of an emitted training corpus."""
    records = load_training_records(corpus)
    payload = json.dumps(training_corpus_stats(records), ensure_ascii=False, indent=2)
    if out:
        Path(out).write_text(payload + "\n", encoding="utf-8")
        click.echo(f"wrote {out}")
    else:
        click.echo(payload)


def run() -> None:
    try:
        main(standalone_mode=True)
    except ForgeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run()
