"""Shared test machinery: compact trajectory builders and scripted backends."""

from __future__ import annotations

import re

from dataforge.core import (
    DataFileRef,
    Question,
    SamplingConfig,
    Termination,
    Trajectory,
    Turn,
    TurnKind,
)
from dataforge.gateway import ChatMessage, Endpoint, ScriptedBackend
from dataforge.sandbox import ExecutionResult, ScriptedExecutor

OK_RESULT = ExecutionResult(stdout="OK", stderr="", exit_status="ok", wall_time=0.01)


def agent_turn(thought: str, code: str | None = None) -> Turn:
    return Turn(kind=TurnKind.AGENT, thought=thought, code=code)


def obs_turn(body: str) -> Turn:
    return Turn(kind=TurnKind.OBSERVATION, body=body)


def final_turn(body: str, thought: str = "") -> Turn:
    return Turn(kind=TurnKind.FINAL_ANSWER, thought=thought, body=body)


def make_trajectory(
    n_agent_turns: int,
    answer: str = "42",
    question_id: str = "q",
    code: str = 'print("x")',
    with_final: bool = True,
    tokens_per_turn: int = 100,
) -> Trajectory:
    """n_agent_turns counts every model message, the final answer included."""
    turns: list[Turn] = []
    n_code_turns = n_agent_turns - 1 if with_final else n_agent_turns
    for i in range(n_code_turns):
        turns.append(agent_turn(f"step {i + 1}", code))
        turns.append(obs_turn(f"output {i + 1}"))
    if with_final:
        turns.append(final_turn(answer))
    return Trajectory(
        question_id=question_id,
        turns=tuple(turns),
        termination=Termination.FINAL_ANSWER if with_final else Termination.MAX_TURNS,
        model_id="test-model",
        sampling=SamplingConfig(),
        per_turn_tokens=tuple([tokens_per_turn] * n_agent_turns),
    )


def agent_text(thought: str, code: str) -> str:
    return f"## Thought: {thought}\n## Code:\n```python\n{code}\n```"


def final_text(answer: str, thought: str | None = None) -> str:
    if thought:
        return f"## Thought: {thought}\n## Final Answer: {answer}"
    return f"## Final Answer: {answer}"


def make_script(
    n_turns: int,
    answer: str,
    filename: str = "sales.csv",
    with_print: bool = True,
    use_file: bool = True,
    empty_code: bool = False,
    salt: str = "",
    exec_markers: list[str] | None = None,
) -> list[str]:
    """Completion texts for an episode with n_turns model messages (final included).

    exec_markers plants one `# exec:<status>` comment per code turn so a
    scripted executor can reproduce a chosen execution outcome.
    """
    target = filename if use_file else "inline_data"
    messages = []
    for i in range(n_turns - 1):
        if empty_code:
            code = "# placeholder only\n# nothing to execute"
        elif with_print:
            code = f'df = load("{target}")\nprint(df.step{i + 1}())'
        else:
            code = f'df = load("{target}")\nresult = df.step{i + 1}()'
        if exec_markers:
            code = f"# exec:{exec_markers[i]}\n{code}"
        thought = f"work on step {i + 1} of the analysis"
        if salt:
            thought = f"{thought} [{salt}]"
        messages.append(agent_text(thought, code))
    messages.append(final_text(answer, thought="wrap up the analysis"))
    return messages


def make_question(
    qid: str,
    answer: str = "42",
    filename: str = "sales.csv",
    prompt: str | None = None,
    **kwargs,
) -> Question:
    return Question(
        id=qid,
        prompt=prompt or f"[{qid}] What is the aggregate statistic in {filename}?",
        files=(DataFileRef(path=filename),),
        answer=answer,
        source="fixture",
        **kwargs,
    )


class ScriptedActor:
    """Serves per-question scripts.

    Candidate episodes (temperature > 0) pick the script list by the derived
    sampling seed; greedy probes (temperature == 0) use a per-model greedy
    script. Turn position = number of assistant messages so far.
    """

    def __init__(
        self,
        questions: list[Question],
        candidate_scripts: dict[str, list[list[str]]] | None = None,
        greedy_scripts: dict[tuple[str, str], list[str]] | None = None,
    ):
        self.by_prompt = {q.prompt: q.id for q in questions}
        self.candidate_scripts = candidate_scripts or {}
        self.greedy_scripts = greedy_scripts or {}

    def question_id(self, messages: list[ChatMessage]) -> str:
        user = next(m for m in messages if m.role == "user")
        for prompt, qid in self.by_prompt.items():
            if user.content.startswith(prompt):
                return qid
        raise AssertionError(f"no scripted question matches: {user.content[:80]!r}")

    def __call__(self, model: str, messages: list[ChatMessage], cfg: SamplingConfig) -> str:
        qid = self.question_id(messages)
        turn = sum(1 for m in messages if m.role == "assistant")
        if cfg.temperature == 0:
            script = self.greedy_scripts.get((model, qid))
            if script is None:
                return final_text("i do not know")
        else:
            candidate = (cfg.seed or 0) % 1009
            script = self.candidate_scripts[qid][candidate]
        if turn >= len(script):
            return final_text("fallback answer")
        return script[turn]


def scripted_endpoint(responder, model: str = "scripted-model", name: str = "") -> Endpoint:
    return Endpoint(backend=ScriptedBackend(responder), model=model, name=name or model)


def echo_summarizer(model: str, messages: list[ChatMessage], cfg: SamplingConfig) -> str:
    """Deterministic summarizer: reconstruction echoes a digest of the chain."""
    content = messages[0].content
    marker = "Here is the reasoning content:"
    chain = content.split(marker, 1)[-1].strip()
    return f"## Reconstruction: condensed: {chain[:48]}"


_JUDGE_PARTS = re.compile(
    r"Reference answer:\n(.*?)\n\nPredicted answer:\n(.*?)\n\nDecide whether", re.DOTALL
)


def comparing_judge(model: str, messages: list[ChatMessage], cfg: SamplingConfig) -> str:
    """Scripted judge: agrees iff the prediction textually contains or equals
    the reference; classifies every domain question as Data Profiling."""
    content = messages[-1].content
    if "Categories:" in content:
        return "CATEGORY: Data Profiling"
    if "Classify the primary failure mode" in content:
        return "LABEL: WrongHypothesis"
    m = _JUDGE_PARTS.search(content)
    if not m:
        return "VERDICT: INCORRECT\nREASON: malformed judge request"
    ref, pred = m.group(1).strip(), m.group(2).strip()
    ok = ref and (ref == pred or ref in pred or pred in ref)
    return f"VERDICT: {'CORRECT' if ok else 'INCORRECT'}\nREASON: scripted comparison"


def ok_executor() -> ScriptedExecutor:
    return ScriptedExecutor(lambda code: OK_RESULT)


def record_with_labels(domain: str, difficulty, qid: str = "q", n: int = 4):
    from dataforge.core import CurationRecord

    return CurationRecord(
        trajectory=make_trajectory(n, question_id=qid),
        domain=domain,
        difficulty=difficulty,
    )


_EXEC_MARKER = re.compile(r"# exec:(\w+)")


def marker_executor() -> ScriptedExecutor:
    """Honors the `# exec:<status>` markers planted by make_script."""

    def respond(code: str) -> ExecutionResult:
        m = _EXEC_MARKER.search(code)
        status = m.group(1) if m else "ok"
        if status == "ok":
            return ExecutionResult(stdout="OK", stderr="", exit_status="ok", wall_time=0.01)
        return ExecutionResult(
            stdout="", stderr=f"planted {status}", exit_status=status, wall_time=0.01
        )

    return ScriptedExecutor(respond)


def write_corpus_files(root, filenames=("sales.csv",)) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for name in filenames:
        (root / name).write_text("id,value\n1,4\n2,5\n", encoding="utf-8")


# --- random conformant trajectories for round-trip properties ---------------------

_WORDS = (
    "load", "the", "csv", "aggregate", "monthly", "totals", "compare", "groups",
    "inspect", "columns", "then", "join", "tables", "filter", "rows", "regression",
    "check", "variance", "compute", "median", "trend", "pivot", "outliers",
)

_TRICKY_INLINE = (
    "use ```python fences",
    "the header ## Thought: appears mid-line here",
    "watch for ## Final Answer: tokens inline",
    "prices rose 3,141.59 (~5%)",
)


def _words(rng, lo=3, hi=9) -> str:
    return " ".join(rng.choice(_WORDS) for _ in range(rng.randint(lo, hi)))


def random_text_block(rng, allow_header_lines: bool = False) -> str:
    lines = []
    for _ in range(rng.randint(1, 4)):
        roll = rng.random()
        if roll < 0.15:
            lines.append(rng.choice(_TRICKY_INLINE))
        elif roll < 0.25 and allow_header_lines:
            lines.append("## Results: " + _words(rng, 2, 4))
        elif roll < 0.3:
            lines.append("")  # internal blank line
        else:
            lines.append(_words(rng))
    text = "\n".join(lines).strip()
    return text or "analysis step"


def random_code(rng) -> str:
    lines = []
    for _ in range(rng.randint(1, 5)):
        roll = rng.random()
        if roll < 0.2:
            lines.append(f"# {_words(rng, 2, 5)}")
        elif roll < 0.35:
            lines.append(f"    value = frame['{rng.choice(_WORDS)}'].sum()")
        elif roll < 0.45:
            lines.append("")
        else:
            lines.append(f"print('{rng.choice(_WORDS)}:', {rng.randint(0, 99)})")
    lines.append(f"print('done', {rng.randint(0, 9)})")
    return "\n".join(lines)


def random_conformant_trajectory(rng, question_id: str = "q") -> Trajectory:
    """Random trajectory within the canonical wire format's round-trip domain:
    stripped thoughts/bodies, no line-start headers outside code, no bare fence
    lines inside code."""
    n_rounds = rng.randint(0, 5)
    with_final = rng.random() < 0.85 or n_rounds == 0
    turns: list[Turn] = []
    for _ in range(n_rounds):
        code = random_code(rng) if rng.random() < 0.9 else None
        turns.append(Turn(kind=TurnKind.AGENT, thought=random_text_block(rng), code=code))
        turns.append(Turn(kind=TurnKind.OBSERVATION, body=random_text_block(rng, True)))
    if with_final:
        thought = random_text_block(rng) if rng.random() < 0.4 else ""
        turns.append(Turn(kind=TurnKind.FINAL_ANSWER, thought=thought,
                          body=random_text_block(rng, True)))
    n_model = sum(1 for t in turns if t.kind in (TurnKind.AGENT, TurnKind.FINAL_ANSWER))
    return Trajectory(
        question_id=question_id,
        turns=tuple(turns),
        termination=Termination.FINAL_ANSWER if with_final else Termination.MAX_TURNS,
        model_id="gen",
        sampling=SamplingConfig(seed=rng.randint(0, 10**6)),
        per_turn_tokens=tuple(rng.randint(0, 4096) for _ in range(n_model)),
    )
