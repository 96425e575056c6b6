"""Run configuration: one declarative TOML file, env-var interpolation for
secrets, flags override file values."""

from __future__ import annotations

import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import ForgeError, SamplingConfig
from .gateway import (
    ENV_API_BASE,
    ENV_API_KEY,
    ENV_MODEL,
    Backend,
    Endpoint,
    HttpBackend,
    RecordBackend,
    ReplayBackend,
    RetryPolicy,
    UsageMeter,
)
from .sandbox import Limits

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ForgeError):
    pass


def expand_env(value: str, context: str = "") -> str:
    def sub(match: re.Match[str]) -> str:
        var = match.group(1)
        if var not in os.environ:
            where = f" (required by {context})" if context else ""
            raise ConfigError(
                f"environment variable {var} is not set{where}; export it or run with --replay"
            )
        return os.environ[var]

    return _ENV_REF.sub(sub, value)


@dataclass(frozen=True)
class EndpointSpec:
    """Raw endpoint description; ${VARS} stay unexpanded until an HTTP backend
    is actually built, so replay runs never need secrets."""

    name: str
    model: str
    base_url: str | None = None
    api_key: str | None = None


class RunConfig:
    """Parsed config file with defaults; see README for the schema."""

    def __init__(self, data: dict[str, Any] | None = None, path: Path | None = None):
        self.data = data or {}
        self.path = path

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls({})
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                return cls(tomllib.load(fh), path=path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    def _section(self, name: str) -> dict[str, Any]:
        value = self.data.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section [{name}] must be a table")
        return value

    def sampling(self) -> SamplingConfig:
        s = self._section("sampling")
        return SamplingConfig(
            temperature=float(s.get("temperature", 0.6)),
            top_p=float(s.get("top_p", 1.0)),
            per_turn_token_budget=int(s.get("per_turn_token_budget", 2048)),
            max_turns=int(s.get("max_turns", 10)),
            seed=s.get("seed"),
        )

    def limits(self) -> Limits:
        s = self._section("limits")
        return Limits(
            timeout_s=float(s.get("timeout_s", 120.0)),
            memory_bytes=int(s.get("memory_bytes", 2 * 1024**3)),
            output_bytes=int(s.get("output_bytes", 4000)),
        )

    def pipeline(self) -> dict[str, Any]:
        return self._section("pipeline")

    def paths(self) -> dict[str, Any]:
        return self._section("paths")

    def gateway_options(self) -> dict[str, Any]:
        return self._section("gateway")

    def endpoint_spec(self, role: str) -> EndpointSpec | None:
        endpoints = self._section("endpoints")
        entry = endpoints.get(role)
        if entry is None:
            if role == "actor":
                # actor falls back to the well-known env vars
                return EndpointSpec(
                    name="actor",
                    model=f"${{{ENV_MODEL}}}",
                    base_url=f"${{{ENV_API_BASE}}}",
                    api_key=f"${{{ENV_API_KEY}}}",
                )
            return None
        return EndpointSpec(
            name=role,
            model=str(entry.get("model", "")),
            base_url=entry.get("base_url"),
            api_key=entry.get("api_key"),
        )

    def solver_tier_specs(self) -> list[EndpointSpec]:
        endpoints = self._section("endpoints")
        tiers = endpoints.get("solver_tiers", [])
        return [
            EndpointSpec(
                name=str(t.get("name", f"tier-{i + 1}")),
                model=str(t.get("model", "")),
                base_url=t.get("base_url"),
                api_key=t.get("api_key"),
            )
            for i, t in enumerate(tiers)
        ]

    def snapshot(self) -> dict[str, Any]:
        """Config as written (secrets redacted), for run manifests."""
        return _redact(self.data)


def _redact(value: Any) -> Any:
    if isinstance(value, dict):
        return {
            k: "***" if ("key" in k.lower() or "secret" in k.lower()) else _redact(v)
            for k, v in value.items()
        }
    if isinstance(value, list):
        return [_redact(v) for v in value]
    return value


class EndpointFactory:
    """Builds endpoints against replay, record, or live HTTP backends."""

    def __init__(
        self,
        replay: str | Path | None = None,
        record: str | Path | None = None,
        retry: RetryPolicy | None = None,
        max_concurrency: int = 4,
    ):
        self.replay_store = Path(replay) if replay else None
        self.record_store = Path(record) if record else None
        self.retry = retry or RetryPolicy()
        self.max_concurrency = max_concurrency
        self.usage = UsageMeter()
        self._replay_backend: ReplayBackend | None = None
        if self.replay_store is not None:
            self._replay_backend = ReplayBackend(self.replay_store)

    def _backend_for(self, spec: EndpointSpec) -> Backend:
        if self._replay_backend is not None:
            return self._replay_backend
        if spec.base_url is None:
            raise ConfigError(
                f"endpoint {spec.name!r} has no base_url configured and no --replay store given"
            )
        http = HttpBackend(
            base_url=expand_env(spec.base_url, f"endpoint {spec.name}"),
            api_key=expand_env(spec.api_key or "", f"endpoint {spec.name}"),
        )
        if self.record_store is not None:
            return RecordBackend(http, self.record_store)
        return http

    def endpoint(self, spec: EndpointSpec) -> Endpoint:
        model = expand_env(spec.model, f"endpoint {spec.name}")
        if not model:
            raise ConfigError(f"endpoint {spec.name!r} has no model configured")
        return Endpoint(
            backend=self._backend_for(spec),
            model=model,
            name=spec.name,
            retry=self.retry,
            max_concurrency=self.max_concurrency,
            usage=self.usage,
        )

    def optional_endpoint(self, spec: EndpointSpec | None) -> Endpoint | None:
        return self.endpoint(spec) if spec is not None else None


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(
    path: str | Path,
    command: str,
    config: RunConfig,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Provenance manifest: config snapshot plus content hashes of every input
    and output file. Deliberately contains nothing volatile."""
    manifest: dict[str, Any] = {
        "command": command,
        "seed": seed,
        "config": config.snapshot(),
        "inputs": {
            name: {"path": str(p), "sha256": file_sha256(p)} for name, p in sorted(inputs.items())
        },
        "outputs": {
            name: {"path": str(p), "sha256": file_sha256(p)} for name, p in sorted(outputs.items())
        },
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, ensure_ascii=False, indent=2, sort_keys=False)
        fh.write("\n")


def build_distractors(questions: Sequence, q, count: int) -> tuple:
    """First `count` data files of other questions, in corpus order, skipping
    path collisions with the question's own files."""
    if count <= 0:
        return ()
    own = {f.path for f in q.files}
    picked = []
    seen = set(own)
    for other in questions:
        if other.id == q.id:
            continue
        for ref in other.files:
            if ref.path in seen:
                continue
            picked.append(ref)
            seen.add(ref.path)
            if len(picked) >= count:
                return tuple(picked)
    return tuple(picked)
