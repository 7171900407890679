"""Pipeline configuration: one JSON file snapshots every knob.

Validation is all-at-once: every violation in the file is reported in a
single ConfigInvalid, and unknown keys come back with a closest-known-key
suggestion so typos are cheap to fix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .curator import DEFAULT_REFUSAL_PHRASES, QualityRules
from .embed_index import ChunkPolicy
from .gateway import EndpointProfile


class ConfigInvalid(Exception):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in errors))
        self.errors = errors


@dataclass(frozen=True)
class GenerationSettings:
    min_entries: int = 60
    max_entries: int = 100
    ask_count: int = 10
    retry_budget: int = 30
    temperature: float = 0.7
    max_output_tokens: int = 1024


@dataclass(frozen=True)
class CurationSettings:
    near_dup_threshold: float = 0.8
    min_instruction_chars: int = 12
    min_output_chars: int = 24
    refusal_phrases: tuple[str, ...] = DEFAULT_REFUSAL_PHRASES

    def quality_rules(self) -> QualityRules:
        return QualityRules(
            min_instruction_chars=self.min_instruction_chars,
            min_output_chars=self.min_output_chars,
            refusal_phrases=self.refusal_phrases,
        )


@dataclass(frozen=True)
class EvalSettings:
    n_questions: int = 80


ENDPOINT_ROLES = ("generator", "embedder", "judge", "candidate_a", "candidate_b")


@dataclass
class PipelineConfig:
    tei_path: Path
    taxonomy_path: Path
    workspace: Path
    seed: int = 0
    retrieval_k: int = 4
    dataset_format: str = "figure2"
    chunking: ChunkPolicy = field(default_factory=ChunkPolicy)
    generation: GenerationSettings = field(default_factory=GenerationSettings)
    curation: CurationSettings = field(default_factory=CurationSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    endpoints: dict[str, EndpointProfile] = field(default_factory=dict)

    def snapshot(self) -> dict:
        """Semantic knobs only (no filesystem paths): safe to embed in
        artifacts that must be byte-identical across workspaces."""
        return {
            "seed": self.seed,
            "retrieval_k": self.retrieval_k,
            "dataset_format": self.dataset_format,
            "chunking": {
                "max_tokens": self.chunking.max_tokens,
                "overlap_tokens": self.chunking.overlap_tokens,
            },
            "generation": {
                "min_entries": self.generation.min_entries,
                "max_entries": self.generation.max_entries,
                "ask_count": self.generation.ask_count,
                "retry_budget": self.generation.retry_budget,
                "temperature": self.generation.temperature,
                "max_output_tokens": self.generation.max_output_tokens,
            },
            "curation": {
                "near_dup_threshold": self.curation.near_dup_threshold,
                "min_instruction_chars": self.curation.min_instruction_chars,
                "min_output_chars": self.curation.min_output_chars,
                "refusal_phrases": list(self.curation.refusal_phrases),
            },
            "eval": {"n_questions": self.eval.n_questions},
            "endpoints": {
                role: {"model": p.model, "base_url": p.base_url}
                for role, p in sorted(self.endpoints.items())
            },
        }


def levenshtein(a: str, b: str) -> int:
    """Plain edit distance, used only for typo suggestions."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb))
            )
        previous = current
    return previous[-1]


def suggest_key(unknown: str, known: list[str]) -> str | None:
    if not known:
        return None
    return min(known, key=lambda k: (levenshtein(unknown, k), k))


_TOP_KEYS = [
    "tei_path",
    "taxonomy_path",
    "workspace",
    "seed",
    "retrieval_k",
    "dataset_format",
    "chunking",
    "generation",
    "curation",
    "eval",
    "endpoints",
]
_CHUNKING_KEYS = ["max_tokens", "overlap_tokens"]
_GENERATION_KEYS = [
    "min_entries",
    "max_entries",
    "ask_count",
    "retry_budget",
    "temperature",
    "max_output_tokens",
]
_CURATION_KEYS = [
    "near_dup_threshold",
    "min_instruction_chars",
    "min_output_chars",
    "refusal_phrases",
]
_EVAL_KEYS = ["n_questions"]
_ENDPOINT_KEYS = [
    "base_url",
    "model",
    "credential_ref",
    "timeout",
    "max_attempts",
    "max_concurrent",
]


class _Checker:
    def __init__(self) -> None:
        self.errors: list[str] = []

    def unknown_keys(self, obj: dict, known: list[str], where: str) -> None:
        for key in sorted(set(obj) - set(known)):
            suggestion = suggest_key(key, known)
            hint = f" (did you mean '{suggestion}'?)" if suggestion else ""
            self.errors.append(f"{where}: unknown key '{key}'{hint}")

    def require(self, obj: dict, key: str, where: str) -> bool:
        if key not in obj:
            self.errors.append(f"{where}: missing required key '{key}'")
            return False
        return True

    def typed(self, obj: dict, key: str, types, where: str, default=None):
        if key not in obj:
            return default
        value = obj[key]
        if isinstance(value, bool) and bool not in (
            types if isinstance(types, tuple) else (types,)
        ):
            self.errors.append(f"{where}.{key}: expected {_type_name(types)}, got a boolean")
            return default
        if not isinstance(value, types):
            self.errors.append(
                f"{where}.{key}: expected {_type_name(types)}, got {type(value).__name__}"
            )
            return default
        return value

    def check(self, condition: bool, message: str) -> bool:
        if not condition:
            self.errors.append(message)
        return condition


def _type_name(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


def validate_config(raw: bytes | str, base_dir: str | Path = ".") -> PipelineConfig:
    """Parse and validate config bytes; raises ConfigInvalid listing every
    violation found, not just the first."""
    base = Path(base_dir)
    checker = _Checker()
    try:
        data = json.loads(raw if isinstance(raw, str) else raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigInvalid([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigInvalid(["config must be a JSON object"])

    checker.unknown_keys(data, _TOP_KEYS, "config")

    paths: dict[str, Path] = {}
    for key in ("tei_path", "taxonomy_path", "workspace"):
        if checker.require(data, key, "config"):
            value = checker.typed(data, key, str, "config")
            if value is not None:
                resolved = base / value
                if key != "workspace" and not resolved.is_file():
                    checker.errors.append(f"config.{key}: file not found: {resolved}")
                paths[key] = resolved

    seed = checker.typed(data, "seed", int, "config", default=0)
    retrieval_k = checker.typed(data, "retrieval_k", int, "config", default=4)
    if retrieval_k is not None:
        checker.check(retrieval_k > 0, "config.retrieval_k: must be positive")
    dataset_format = checker.typed(data, "dataset_format", str, "config", default="figure2")
    if dataset_format is not None:
        checker.check(
            dataset_format in ("figure2", "alpaca"),
            "config.dataset_format: must be 'figure2' or 'alpaca'",
        )

    chunking_obj = checker.typed(data, "chunking", dict, "config", default={})
    chunking = ChunkPolicy()
    if chunking_obj is not None:
        checker.unknown_keys(chunking_obj, _CHUNKING_KEYS, "config.chunking")
        max_tokens = checker.typed(chunking_obj, "max_tokens", int, "config.chunking", default=256)
        overlap = checker.typed(
            chunking_obj, "overlap_tokens", int, "config.chunking", default=32
        )
        ok = checker.check(
            max_tokens is None or max_tokens > 0, "config.chunking.max_tokens: must be positive"
        )
        ok &= checker.check(
            overlap is None or overlap >= 0, "config.chunking.overlap_tokens: must be >= 0"
        )
        if ok and max_tokens is not None and overlap is not None:
            if not checker.check(
                overlap < max_tokens,
                "config.chunking: overlap_tokens must be smaller than max_tokens",
            ):
                pass
            else:
                chunking = ChunkPolicy(max_tokens=max_tokens, overlap_tokens=overlap)

    generation_obj = checker.typed(data, "generation", dict, "config", default={})
    generation = GenerationSettings()
    if generation_obj is not None:
        checker.unknown_keys(generation_obj, _GENERATION_KEYS, "config.generation")
        values = {
            "min_entries": checker.typed(
                generation_obj, "min_entries", int, "config.generation", default=60
            ),
            "max_entries": checker.typed(
                generation_obj, "max_entries", int, "config.generation", default=100
            ),
            "ask_count": checker.typed(
                generation_obj, "ask_count", int, "config.generation", default=10
            ),
            "retry_budget": checker.typed(
                generation_obj, "retry_budget", int, "config.generation", default=30
            ),
            "temperature": checker.typed(
                generation_obj, "temperature", (int, float), "config.generation", default=0.7
            ),
            "max_output_tokens": checker.typed(
                generation_obj, "max_output_tokens", int, "config.generation", default=1024
            ),
        }
        if all(v is not None for v in values.values()):
            ok = checker.check(
                values["min_entries"] >= 1, "config.generation.min_entries: must be >= 1"
            )
            ok &= checker.check(
                values["max_entries"] >= values["min_entries"],
                "config.generation.max_entries: must be >= min_entries",
            )
            ok &= checker.check(
                values["ask_count"] >= 1, "config.generation.ask_count: must be >= 1"
            )
            ok &= checker.check(
                values["retry_budget"] >= 1, "config.generation.retry_budget: must be >= 1"
            )
            ok &= checker.check(
                values["temperature"] >= 0, "config.generation.temperature: must be >= 0"
            )
            ok &= checker.check(
                values["max_output_tokens"] >= 1,
                "config.generation.max_output_tokens: must be >= 1",
            )
            if ok:
                generation = GenerationSettings(
                    min_entries=values["min_entries"],
                    max_entries=values["max_entries"],
                    ask_count=values["ask_count"],
                    retry_budget=values["retry_budget"],
                    temperature=float(values["temperature"]),
                    max_output_tokens=values["max_output_tokens"],
                )

    curation_obj = checker.typed(data, "curation", dict, "config", default={})
    curation = CurationSettings()
    if curation_obj is not None:
        checker.unknown_keys(curation_obj, _CURATION_KEYS, "config.curation")
        threshold = checker.typed(
            curation_obj, "near_dup_threshold", (int, float), "config.curation", default=0.8
        )
        min_instruction = checker.typed(
            curation_obj, "min_instruction_chars", int, "config.curation", default=12
        )
        min_output = checker.typed(
            curation_obj, "min_output_chars", int, "config.curation", default=24
        )
        refusals = checker.typed(
            curation_obj,
            "refusal_phrases",
            list,
            "config.curation",
            default=list(DEFAULT_REFUSAL_PHRASES),
        )
        ok = checker.check(
            threshold is None or 0 < threshold <= 1,
            "config.curation.near_dup_threshold: must be in (0, 1]",
        )
        ok &= checker.check(
            min_instruction is None or min_instruction >= 0,
            "config.curation.min_instruction_chars: must be >= 0",
        )
        ok &= checker.check(
            min_output is None or min_output >= 0,
            "config.curation.min_output_chars: must be >= 0",
        )
        if refusals is not None and not all(isinstance(p, str) for p in refusals):
            checker.errors.append("config.curation.refusal_phrases: must be a list of strings")
            ok = False
        if ok and None not in (threshold, min_instruction, min_output, refusals):
            curation = CurationSettings(
                near_dup_threshold=float(threshold),
                min_instruction_chars=min_instruction,
                min_output_chars=min_output,
                refusal_phrases=tuple(refusals),
            )

    eval_obj = checker.typed(data, "eval", dict, "config", default={})
    eval_settings = EvalSettings()
    if eval_obj is not None:
        checker.unknown_keys(eval_obj, _EVAL_KEYS, "config.eval")
        n_questions = checker.typed(eval_obj, "n_questions", int, "config.eval", default=80)
        if n_questions is not None and checker.check(
            n_questions > 0, "config.eval.n_questions: must be positive"
        ):
            eval_settings = EvalSettings(n_questions=n_questions)

    endpoints_obj = checker.typed(data, "endpoints", dict, "config", default={})
    endpoints: dict[str, EndpointProfile] = {}
    if endpoints_obj is not None:
        checker.unknown_keys(endpoints_obj, list(ENDPOINT_ROLES), "config.endpoints")
        for role in ENDPOINT_ROLES:
            if role not in endpoints_obj:
                continue
            where = f"config.endpoints.{role}"
            profile_obj = checker.typed(endpoints_obj, role, dict, "config.endpoints")
            if profile_obj is None:
                continue
            checker.unknown_keys(profile_obj, _ENDPOINT_KEYS, where)
            ok = checker.require(profile_obj, "base_url", where)
            ok &= checker.require(profile_obj, "model", where)
            base_url = checker.typed(profile_obj, "base_url", str, where)
            model = checker.typed(profile_obj, "model", str, where)
            ok &= checker.check(
                base_url is None or bool(base_url), f"{where}.base_url: must be non-empty"
            )
            ok &= checker.check(
                model is None or bool(model), f"{where}.model: must be non-empty"
            )
            credential_ref = checker.typed(profile_obj, "credential_ref", str, where, default="")
            timeout = checker.typed(profile_obj, "timeout", (int, float), where, default=30.0)
            max_attempts = checker.typed(profile_obj, "max_attempts", int, where, default=4)
            max_concurrent = checker.typed(profile_obj, "max_concurrent", int, where, default=4)
            ok &= checker.check(
                timeout is None or timeout > 0, f"{where}.timeout: must be positive"
            )
            ok &= checker.check(
                max_attempts is None or max_attempts >= 1, f"{where}.max_attempts: must be >= 1"
            )
            ok &= checker.check(
                max_concurrent is None or max_concurrent >= 1,
                f"{where}.max_concurrent: must be >= 1",
            )
            if ok and base_url and model:
                endpoints[role] = EndpointProfile(
                    base_url=base_url,
                    model=model,
                    credential_ref=credential_ref or "",
                    timeout=float(timeout),
                    max_attempts=max_attempts,
                    max_concurrent=max_concurrent,
                )

    if checker.errors:
        raise ConfigInvalid(checker.errors)
    return PipelineConfig(
        tei_path=paths["tei_path"],
        taxonomy_path=paths["taxonomy_path"],
        workspace=paths["workspace"],
        seed=seed,
        retrieval_k=retrieval_k,
        dataset_format=dataset_format,
        chunking=chunking,
        generation=generation,
        curation=curation,
        eval=eval_settings,
        endpoints=endpoints,
    )


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigInvalid([f"cannot read config file: {exc}"]) from exc
    return validate_config(raw, base_dir=path.parent)
