"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
"""

from __future__ import annotations

import functools
import json
import os
import random
import time
from collections import Counter
from fractions import Fraction

import pytest
from click.testing import CliRunner

import dataforge.config as config_module
from dataforge.agent import EpisodeConfig
from dataforge.cli import main as cli_main
from dataforge.core import (
    Difficulty,
    SamplingConfig,
    TurnCategory,
    agent_turn_count,
    save_questions,
)
from dataforge.curation import (
    PipelineConfig,
    classify_turn_length,
    probe_difficulty,
    run_pipeline,
    sample_balanced,
    water_filling_cap,
)
from dataforge.enrichment import ReasoningVariant, VariantMode, build_variant
from dataforge.evaluation import run_benchmark
from dataforge.gateway import Endpoint, RecordBackend, ReplayBackend, ScriptedBackend
from dataforge.protocol import parse_transcript, render_trajectory
from dataforge.sandbox import Limits, LocalExecutor, execute_code, prepare_workspace
from helpers import (
    ScriptedActor,
    comparing_judge,
    echo_summarizer,
    final_text,
    make_question,
    make_script,
    make_trajectory,
    marker_executor,
    ok_executor,
    random_conformant_trajectory,
    scripted_endpoint,
    write_corpus_files,
)
from test_cli import CONFIG_TOML, build_world
from test_curation import make_corpus, oracle_check_balanced


def criterion(name: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"FAIL: {name}")
                raise
            print(f"PASS: {name}")
            return result

        return wrapper

    return decorate


# --- criterion 1: parser round-trip ------------------------------------------------


@criterion("parser round-trip on 1000 random conformant trajectories (< 5 s)")
def test_parser_round_trip_1000():
    rng = random.Random(2024)
    started = time.monotonic()
    checked = 0
    while checked < 1000:
        t = random_conformant_trajectory(rng, question_id=f"rt{checked}")
        if not t.turns:
            continue
        assert parse_transcript(render_trajectory(t)) == list(t.turns)
        checked += 1
    elapsed = time.monotonic() - started
    assert elapsed < 5.0, f"round-trip took {elapsed:.2f}s"


# --- criterion 2: Algorithm-1 staged fixture ---------------------------------------

# planted per-candidate properties: (turns, correct?, flaw)
FIXTURE_PLAN: dict[str, dict] = {
    "f01": {"baseline": False, "candidates": [(4, True, None), (5, True, None), (3, True, None)]},
    "f02": {"baseline": True, "candidates": [(4, True, None), (4, True, None), (2, False, None)]},
    "f03": {"baseline": False, "candidates": [(2, True, None), (3, True, None), (2, False, None)]},
    "f04": {"baseline": False, "candidates": [(6, True, None), (7, True, None), (4, False, None)]},
    "f05": {"baseline": False, "candidates": [(4, True, "no_print"), (5, True, None), (4, False, None)]},
    "f06": {"baseline": False, "candidates": [(4, True, "no_file"), (4, False, None), (5, False, None)]},
    "f07": {"baseline": False, "candidates": [(4, False, None), (5, False, None), (6, False, None)]},
    "f08": {"baseline": False, "candidates": [(5, True, None), (4, True, None), (4, True, None)]},
    "f09": {"baseline": True, "candidates": [(5, True, None), (2, False, None), (7, True, None)]},
    "f10": {"baseline": False, "candidates": [(2, True, None), (2, True, None), (3, True, None)]},
    "f11": {"baseline": False, "candidates": [(4, True, None), (5, False, None), (4, True, "empty_code")]},
    "f12": {"baseline": False, "candidates": [(5, True, None), (5, True, None), (5, True, None)]},
}

# hand-enumerated stage survivors for the plan above
EXPECTED_SURVIVORS = {
    "generated": 36,
    "correct": 25,
    "conformant": 22,
    "complexity": 18,
    "turn_bucket": 10,
    "difficulty": 10,
    "domain": 10,
    "enriched": 10,
    "sampled": 10,
}
EXPECTED_PER_QUESTION = {"f01": 2, "f05": 1, "f08": 3, "f11": 1, "f12": 3}
EXPECTED_TURNS = {"f01": [4, 5], "f05": [5], "f08": [4, 4, 5], "f11": [4], "f12": [5, 5, 5]}


def build_fixture():
    questions, scripts, baseline_greedy = [], {}, {}
    for qid, plan in FIXTURE_PLAN.items():
        q = make_question(qid, answer=f"ans-{qid}")
        questions.append(q)
        candidates = []
        for ci, (turns, correct, flaw) in enumerate(plan["candidates"]):
            candidates.append(
                make_script(
                    turns,
                    q.answer if correct else "definitely wrong",
                    with_print=flaw != "no_print",
                    use_file=flaw != "no_file",
                    empty_code=flaw == "empty_code",
                    salt=f"{qid}-c{ci}",
                )
            )
        scripts[qid] = candidates
        baseline_greedy[("base-model", qid)] = (
            make_script(2, q.answer) if plan["baseline"] else [final_text("no idea")]
        )
    return questions, scripts, baseline_greedy


def fixture_pipeline_config(actor, judge, baseline, summarizer, tmp_path, corpus) -> PipelineConfig:
    return PipelineConfig(
        actor=actor,
        episode=EpisodeConfig(
            sampling=SamplingConfig(temperature=0.6, max_turns=12, seed=0),
            limits=Limits(timeout_s=5, output_bytes=2000),
        ),
        k=3,
        judge=judge,
        baseline=baseline,
        summarizer=summarizer,
        variant=VariantMode.SUMMARIZED,
        turn_bucket="medium",
        executor=ok_executor(),
        corpus_root=corpus,
        workspaces_root=tmp_path / "ws",
    )


@criterion("Algorithm-1 fixture: 12 questions x 3 candidates, exact staged survivor set (< 30 s)")
def test_algorithm1_fixture(tmp_path):
    started = time.monotonic()
    corpus = tmp_path / "corpus"
    write_corpus_files(corpus)
    questions, scripts, baseline_greedy = build_fixture()
    actor_logic = ScriptedActor(questions, candidate_scripts=scripts,
                                greedy_scripts=baseline_greedy)

    def world(model, messages, cfg):
        if model == "sum-model":
            return echo_summarizer(model, messages, cfg)
        if model == "judge-model":
            return comparing_judge(model, messages, cfg)
        return actor_logic(model, messages, cfg)

    store = tmp_path / "store.jsonl"

    def endpoints(backend_for):
        return dict(
            actor=Endpoint(backend_for("actor-model"), model="actor-model"),
            judge=Endpoint(backend_for("judge-model"), model="judge-model"),
            baseline=Endpoint(backend_for("base-model"), model="base-model"),
            summarizer=Endpoint(backend_for("sum-model"), model="sum-model"),
        )

    # pass 1: record the scripted world
    recorder = RecordBackend(ScriptedBackend(world), store)
    eps = endpoints(lambda model: recorder)
    cfg = fixture_pipeline_config(eps["actor"], eps["judge"], eps["baseline"],
                                  eps["summarizer"], tmp_path, corpus)
    records_rec, report_rec = run_pipeline(questions, cfg)

    # pass 2: replay backend, as the criterion demands
    replayer = ReplayBackend(store)
    eps = endpoints(lambda model: replayer)
    cfg = fixture_pipeline_config(eps["actor"], eps["judge"], eps["baseline"],
                                  eps["summarizer"], tmp_path, corpus)
    records, report = run_pipeline(questions, cfg)

    assert report == report_rec
    survivors = {s["name"]: s["survivors"] for s in report["stages"]}
    assert survivors == EXPECTED_SURVIVORS, survivors
    assert report["quarantined"] == []

    per_question = Counter(r.trajectory.question_id for r in records)
    assert dict(per_question) == EXPECTED_PER_QUESTION
    turns = {}
    for r in records:
        turns.setdefault(r.trajectory.question_id, []).append(agent_turn_count(r.trajectory))
    assert {k: sorted(v) for k, v in turns.items()} == EXPECTED_TURNS
    assert all(r.passed_all_stages for r in records)
    assert [r.trajectory for r in records] == [r.trajectory for r in records_rec]

    elapsed = time.monotonic() - started
    assert elapsed < 30.0, f"fixture took {elapsed:.2f}s"


# --- criterion 3: turn classification boundaries -----------------------------------


@criterion("turn classification boundaries for n = 1..12 (zero tolerance)")
def test_turn_classification_boundaries():
    expected = {
        1: TurnCategory.SHORT, 2: TurnCategory.SHORT, 3: TurnCategory.SHORT,
        4: TurnCategory.MEDIUM, 5: TurnCategory.MEDIUM,
        6: TurnCategory.LONG, 7: TurnCategory.LONG, 8: TurnCategory.LONG,
        9: TurnCategory.LONG, 10: TurnCategory.LONG, 11: TurnCategory.LONG,
        12: TurnCategory.LONG,
    }
    for n, want in expected.items():
        got = classify_turn_length(make_trajectory(n))
        assert got is want, f"n={n}: got {got}, want {want}"


# --- criterion 4: enrichment invariance --------------------------------------------


@criterion("enrichment invariance on 200 fuzzed trajectories (100%)")
def test_enrichment_invariance_200():
    rng = random.Random(777)
    summarizer = scripted_endpoint(echo_summarizer, model="sum-model")
    checked = 0
    while checked < 200:
        t = random_conformant_trajectory(rng, question_id=f"en{checked}")
        if not t.turns:
            continue
        out = build_variant(t, ReasoningVariant(VariantMode.SUMMARIZED), summarizer=summarizer)
        from dataforge.enrichment import middle_turns

        middles = set(middle_turns(t))
        assert agent_turn_count(out) == agent_turn_count(t)
        assert classify_turn_length(out) is classify_turn_length(t)
        for i, (old, new) in enumerate(zip(t.turns, out.turns)):
            assert new.code == old.code, f"code changed at turn {i}"
            assert new.body == old.body, f"body changed at turn {i}"
            assert new.kind == old.kind
            if i not in middles:
                assert new == old, f"non-middle turn {i} changed"
        assert out.final_answer == t.final_answer
        checked += 1


# --- criterion 5: balanced sampling vs exhaustive-cap oracle ------------------------


@criterion("balanced sampling on 50 random corpora vs exhaustive-cap-search oracle")
def test_balanced_sampling_50_corpora():
    rng = random.Random(4242)
    for trial in range(50):
        records = make_corpus(rng, rng.randint(2, 9), rng.randint(8, 150))
        target = rng.randint(1, len(records))
        out = sample_balanced(records, target, "balanced", seed=trial)
        oracle_check_balanced(records, out, target)


# --- criterion 6: difficulty ladder ------------------------------------------------


@criterion("difficulty ladder labels on a 20-question fixture (zero tolerance)")
def test_difficulty_ladder_20(tmp_path):
    corpus = tmp_path / "corpus"
    write_corpus_files(corpus)
    plan = {}
    for i in range(20):
        plan[f"d{i:02d}"] = i % 4  # 0 = unsolved, 1..3 = weakest solving tier
    questions = [make_question(qid, answer=f"ans-{qid}") for qid in plan]
    tiers = []
    from dataforge.curation import SolverLadder, SolverTier

    for tier_index, model in enumerate(["tier1-model", "tier2-model", "tier3-model"], start=1):
        greedy = {}
        for q in questions:
            solved_at = plan[q.id]
            if solved_at and solved_at <= tier_index:
                greedy[(model, q.id)] = make_script(2, q.answer)
            else:
                greedy[(model, q.id)] = [final_text("cannot solve")]
        tiers.append(
            SolverTier(
                name=f"tier{tier_index}",
                endpoint=scripted_endpoint(ScriptedActor(questions, greedy_scripts=greedy),
                                           model=model),
            )
        )
    ladder = SolverLadder(tiers=tuple(tiers))
    cfg = EpisodeConfig(sampling=SamplingConfig(max_turns=6), limits=Limits(timeout_s=5))
    label_map = {0: Difficulty.UNSOLVED, 1: Difficulty.EASY, 2: Difficulty.MEDIUM,
                 3: Difficulty.HARD}
    for q in questions:
        got = probe_difficulty(q, ladder, cfg, executor=ok_executor(), corpus_root=corpus,
                               workspaces_root=tmp_path / "ws")
        assert got is label_map[plan[q.id]], f"{q.id}: got {got}"


# --- criterion 7: eval arithmetic golden fixture -----------------------------------

EVAL_PLAN = {
    # qid: (n_turns, correct?, exec statuses)
    "e1": (3, True, ["ok", "ok"]),
    "e2": (4, True, ["ok", "error", "ok"]),
    "e3": (2, False, ["timeout"]),
    "e4": (5, True, ["ok", "ok", "ok", "ok"]),
    "e5": (3, False, ["error", "ok"]),
    "e6": (4, True, ["ok", "ok", "resource_kill"]),
    "e7": (2, True, ["ok"]),
    "e8": (5, True, ["ok", "ok", "error", "ok"]),
}


@criterion("eval arithmetic: accuracy 6/8, hand-counted code-error rate, exact means")
def test_eval_arithmetic_golden(tmp_path):
    corpus = tmp_path / "corpus"
    write_corpus_files(corpus)
    questions = [make_question(qid, answer=f"ans-{qid}") for qid in EVAL_PLAN]
    greedy = {}
    for qid, (n_turns, correct, statuses) in EVAL_PLAN.items():
        answer = f"ans-{qid}" if correct else "mistaken"
        greedy[("eval-model", qid)] = make_script(n_turns, answer, exec_markers=statuses)
    actor = scripted_endpoint(ScriptedActor(questions, greedy_scripts=greedy),
                              model="eval-model")
    cfg = EpisodeConfig(sampling=SamplingConfig(max_turns=8), limits=Limits(timeout_s=5))
    report, artifacts = run_benchmark(
        questions, cfg, actor, executor=marker_executor(), corpus_root=corpus,
        workspaces_root=tmp_path / "ws",
    )
    assert report.n_questions == 8
    assert report.accuracy == float(Fraction(6, 8)) == 0.75
    # hand count: 20 code executions, 5 non-ok
    assert report.code_error_rate == float(Fraction(5, 20))
    expected_turns = Fraction(sum(p[0] for p in EVAL_PLAN.values()), 8)
    assert report.avg_agent_turns == float(expected_turns) == 3.5
    episodes = [a.episode for a in artifacts if a.episode]
    expected_tokens = Fraction(sum(sum(e.trajectory.per_turn_tokens) for e in episodes), 8)
    assert report.avg_output_tokens == float(expected_tokens)


# --- criterion 8: determinism -------------------------------------------------------


@criterion("determinism: identical seed + replay store give byte-identical corpus and manifests")
def test_pipeline_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    questions, world = build_world()
    save_questions(questions, tmp_path / "questions.jsonl")
    write_corpus_files(tmp_path / "corpus")
    (tmp_path / "config.toml").write_text(CONFIG_TOML, encoding="utf-8")

    runner = CliRunner()
    with monkeypatch.context() as m:
        m.setattr(config_module, "HttpBackend",
                  lambda base_url, api_key="": ScriptedBackend(world))
        res = runner.invoke(cli_main, ["pipeline", "--config", "config.toml", "--seed", "11",
                                       "--record", "store.jsonl", "--out", "rec"],
                            catch_exceptions=False)
        assert res.exit_code == 0, res.output

    byte_snapshots = []
    for _ in range(2):
        res = runner.invoke(cli_main, ["pipeline", "--config", "config.toml", "--seed", "11",
                                       "--replay", "store.jsonl", "--out", "final"],
                            catch_exceptions=False)
        assert res.exit_code == 0, res.output
        byte_snapshots.append(
            (
                (tmp_path / "final/corpus.jsonl").read_bytes(),
                (tmp_path / "final/manifest.json").read_bytes(),
                (tmp_path / "final/records.jsonl").read_bytes(),
                (tmp_path / "final/stage_report.json").read_bytes(),
            )
        )
    assert byte_snapshots[0] == byte_snapshots[1]
    assert len(byte_snapshots[0][0]) > 0


# --- criterion 9: sandbox contract with the stub executor ---------------------------


@criterion("sandbox contract: capture, ordering, errors, 5s timeout +2s grace, isolation")
def test_sandbox_contract(tmp_path):
    corpus = tmp_path / "corpus"
    write_corpus_files(corpus)
    limits = Limits(timeout_s=5.0, output_bytes=4000)
    executor = LocalExecutor()

    q = make_question("sbx")
    ws = prepare_workspace(q, corpus_root=corpus, workspaces_root=tmp_path / "ws")

    r = execute_code('print("MEAN: 4.5")', ws, limits, executor)
    assert r.exit_status == "ok" and "MEAN: 4.5" in r.stdout

    r = execute_code("\n".join(f'print("row {i}")' for i in range(10)), ws, limits, executor)
    assert r.stdout.strip().splitlines() == [f"row {i}" for i in range(10)]

    r = execute_code("raise RuntimeError('boom')", ws, limits, executor)
    assert r.exit_status == "error" and "RuntimeError" in r.stderr

    started = time.monotonic()
    r = execute_code("while True:\n    pass", ws, limits, executor)
    elapsed = time.monotonic() - started
    assert r.exit_status == "timeout"
    assert r.wall_time >= 5.0
    assert elapsed < 7.0, f"timeout enforcement took {elapsed:.2f}s"

    q2 = make_question("sbx2")
    ws2 = prepare_workspace(q2, corpus_root=corpus, workspaces_root=tmp_path / "ws")
    execute_code("open('sentinel.txt', 'w').write('leak')", ws, limits, executor)
    r = execute_code("import os; print(sorted(os.listdir('.')))", ws2, limits, executor)
    assert "sentinel" not in r.stdout
    ws.cleanup()
    ws2.cleanup()


# --- criterion 11: optional live smoke ----------------------------------------------


@pytest.mark.skipif(
    not os.environ.get("FORGE_API_BASE"),
    reason="live smoke needs FORGE_API_BASE (optional criterion)",
)
@criterion("live smoke: one episode against a reachable endpoint")
def test_live_smoke(tmp_path):
    from dataforge.agent import run_episode
    from dataforge.config import EndpointFactory, EndpointSpec
    from dataforge.core import DataFileRef, Question

    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "toy.csv").write_text("name,score\nada,3\ngrace,5\n", encoding="utf-8")
    q = Question(
        id="smoke",
        prompt="What is the sum of the score column in toy.csv? Reply with the number only.",
        files=(DataFileRef("toy.csv"),),
        answer="8",
        source="smoke",
    )
    factory = EndpointFactory()
    actor = factory.endpoint(EndpointSpec(name="actor", model="${FORGE_MODEL}",
                                          base_url="${FORGE_API_BASE}",
                                          api_key="${FORGE_API_KEY}"))
    cfg = EpisodeConfig(sampling=SamplingConfig(temperature=0.0, max_turns=8),
                        limits=Limits(timeout_s=60))
    ep = run_episode(q, cfg, actor, LocalExecutor(), corpus, tmp_path / "ws")
    assert ep.trajectory.termination.value == "final_answer"
    assert agent_turn_count(ep.trajectory) >= 2
    manifest = tmp_path / "manifest.jsonl"
    from dataforge.agent import manifest_row

    manifest.write_text(json.dumps(manifest_row(q, ep)) + "\n", encoding="utf-8")
    assert manifest.exists()


def test_water_filling_cap_consistency():
    # sanity anchor for the oracle itself
    assert water_filling_cap({"a": 100, "b": 10, "c": 5}, 30) == 15
    assert water_filling_cap({"a": 50, "b": 50}, 50) == 25
