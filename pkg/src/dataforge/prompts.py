"""Text assets: system prompt, summarization and judge templates.

Defaults ship as package data; a run config may override any template through
set_override (the CLI wires its [prompts] section here).
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

_OVERRIDES: dict[str, str] = {}


def set_override(name: str, text: str) -> None:
    _OVERRIDES[name] = text


def clear_overrides() -> None:
    _OVERRIDES.clear()


@lru_cache(maxsize=None)
def _load_default(name: str) -> str:
    return resources.files("dataforge").joinpath("assets", name).read_text(encoding="utf-8")


def load_asset(name: str) -> str:
    if name in _OVERRIDES:
        return _OVERRIDES[name]
    return _load_default(name)


def base_prompt() -> str:
    return load_asset("base_prompt.txt")


def summarization_prompt() -> str:
    return load_asset("summarization_prompt.txt")


def judge_verdict_prompt() -> str:
    return load_asset("judge_verdict_prompt.txt")


def error_category_prompt() -> str:
    return load_asset("error_category_prompt.txt")


def domain_prompt() -> str:
    return load_asset("domain_prompt.txt")


def domain_proposal_prompt() -> str:
    return load_asset("domain_proposal_prompt.txt")


def domain_seed_prompt() -> str:
    return load_asset("domain_seed_prompt.txt")


_SYSTEM_PROMPTS = {"base": base_prompt}


def system_prompt(template_id: str) -> str:
    """System prompt text for a template id; only "base" ships by default."""
    try:
        return _SYSTEM_PROMPTS[template_id]()
    except KeyError:
        raise KeyError(f"unknown system prompt template: {template_id!r}") from None


def register_system_prompt(template_id: str, text: str) -> None:
    _SYSTEM_PROMPTS[template_id] = lambda: text
