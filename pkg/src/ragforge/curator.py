"""Deduplicate, filter, and balance raw entries, then export the dataset,
its manifest, and a fine-tuning hyperparameter config.

Stages are pure functions over immutable lists: each returns the surviving
entries in their original relative order with the status advanced. Exact
dedup keys on a normalized instruction; near dedup drops any entry whose
instruction shingles overlap an earlier survivor's at or above the Jaccard
threshold.
"""

from __future__ import annotations

import json
import math
import string
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

from .qa_generator import QAEntry, advance_status
from .util import write_atomic


class UnknownCategory(Exception):
    pass


class IoFailure(Exception):
    pass


class TaxonomyInvalid(Exception):
    pass


@dataclass(frozen=True)
class CategorySpec:
    name: str
    target_count: int
    target_percent: float
    toc_headings: tuple[str, ...] = ()


def load_taxonomy(path: str | Path) -> list[CategorySpec]:
    """Read a taxonomy config: {"total_target": N, "categories": [...]}.

    Per-category target counts are round(target_percent * total_target / 100);
    percents must sum to 100 within 0.01.
    """
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        total_target = obj["total_target"]
        raw_categories = obj["categories"]
    except (KeyError, TypeError) as exc:
        raise TaxonomyInvalid("taxonomy needs 'total_target' and 'categories'") from exc
    if not isinstance(total_target, int) or total_target < 0:
        raise TaxonomyInvalid("total_target must be a non-negative integer")
    specs = []
    for i, cat in enumerate(raw_categories):
        try:
            name = cat["name"]
            percent = float(cat["target_percent"])
            headings = tuple(cat.get("toc_headings", ()))
        except (KeyError, TypeError) as exc:
            raise TaxonomyInvalid(f"categories[{i}] is malformed") from exc
        specs.append(
            CategorySpec(
                name=name,
                target_count=math.floor(percent * total_target / 100 + 0.5),
                target_percent=percent,
                toc_headings=headings,
            )
        )
    total_percent = sum(s.target_percent for s in specs)
    if abs(total_percent - 100.0) > 0.01:
        raise TaxonomyInvalid(f"target percents sum to {total_percent}, expected 100")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise TaxonomyInvalid("category names must be unique")
    return specs


_TRAILING_PUNCT = set(string.punctuation)


def normalize_instruction(text: str) -> str:
    """Lowercase, collapse whitespace, and strip trailing punctuation."""
    text = " ".join(text.lower().split())
    while text and text[-1] in _TRAILING_PUNCT:
        text = text[:-1]
    return text.rstrip()


def instruction_shingles(text: str) -> frozenset[tuple[str, ...]]:
    """3-gram word shingles of the normalized instruction.

    Instructions shorter than three words contribute a single shingle of all
    their words; an empty normalized instruction has no shingles.
    """
    tokens = normalize_instruction(text).split()
    if not tokens:
        return frozenset()
    if len(tokens) < 3:
        return frozenset({tuple(tokens)})
    return frozenset(tuple(tokens[i : i + 3]) for i in range(len(tokens) - 2))


def shingle_jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def _check_statuses(entries: list[QAEntry], allowed: tuple[str, ...], op: str) -> None:
    for entry in entries:
        if entry.status not in allowed:
            raise ValueError(f"{op} expects entries with status in {allowed}, got {entry.status!r}")


def exact_dedup(entries: list[QAEntry]) -> list[QAEntry]:
    """Drop entries whose normalized instruction duplicates an earlier one."""
    _check_statuses(entries, ("raw", "deduped"), "exact_dedup")
    seen: set[str] = set()
    kept = []
    for entry in entries:
        key = normalize_instruction(entry.instruction)
        if key in seen:
            continue
        seen.add(key)
        kept.append(advance_status(entry, "deduped"))
    return kept


def near_dedup(entries: list[QAEntry], threshold: float = 0.8) -> list[QAEntry]:
    """Greedy near-duplicate removal by instruction-shingle Jaccard.

    Each entry is compared against earlier survivors only; it is dropped when
    any similarity reaches the threshold. A shared-shingle inverted index
    prunes the comparisons without changing the outcome (disjoint shingle
    sets have similarity 0, below any valid threshold).
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    _check_statuses(entries, ("deduped",), "near_dedup")
    survivors: list[QAEntry] = []
    survivor_shingles: list[frozenset] = []
    by_shingle: dict[tuple, list[int]] = defaultdict(list)
    empty_survivor_exists = False
    for entry in entries:
        shingles = instruction_shingles(entry.instruction)
        if not shingles:
            # Two shingle-free instructions are treated as identical.
            if empty_survivor_exists:
                continue
            empty_survivor_exists = True
        else:
            candidates = sorted({i for sh in shingles for i in by_shingle.get(sh, ())})
            if any(
                shingle_jaccard(shingles, survivor_shingles[i]) >= threshold
                for i in candidates
            ):
                continue
        idx = len(survivors)
        survivors.append(entry)
        survivor_shingles.append(shingles)
        for sh in shingles:
            by_shingle[sh].append(idx)
    return survivors


DEFAULT_REFUSAL_PHRASES = (
    "as an ai",
    "as a language model",
    "i cannot help",
    "i can't help",
    "i am unable",
    "i'm unable",
    "i am sorry",
    "i'm sorry",
)


@dataclass(frozen=True)
class QualityRules:
    min_instruction_chars: int = 12
    min_output_chars: int = 24
    refusal_phrases: tuple[str, ...] = DEFAULT_REFUSAL_PHRASES


def quality_violation(entry: QAEntry, rules: QualityRules) -> str | None:
    """Name of the first rule the entry violates, or None if it is clean."""
    if len(entry.instruction) < rules.min_instruction_chars:
        return "min_instruction_chars"
    if len(entry.output) < rules.min_output_chars:
        return "min_output_chars"
    lowered = entry.output.lower()
    if any(phrase in lowered for phrase in rules.refusal_phrases):
        return "refusal_phrase"
    return None


def quality_filter(entries: list[QAEntry], rules: QualityRules = QualityRules()) -> list[QAEntry]:
    _check_statuses(entries, ("deduped", "filtered"), "quality_filter")
    return [
        advance_status(e, "filtered") for e in entries if quality_violation(e, rules) is None
    ]


def balance_categories(
    entries: list[QAEntry], taxonomy: list[CategorySpec]
) -> list[QAEntry]:
    """Keep the first target_count entries per category, grouped in taxonomy
    order. Undersupplied categories keep everything they have; the shortfall
    shows up in the manifest, not here."""
    _check_statuses(entries, ("filtered",), "balance_categories")
    by_name = {spec.name: spec for spec in taxonomy}
    grouped: dict[str, list[QAEntry]] = {spec.name: [] for spec in taxonomy}
    for entry in entries:
        if entry.category not in by_name:
            raise UnknownCategory(entry.category)
        grouped[entry.category].append(entry)
    accepted = []
    for spec in taxonomy:
        accepted.extend(
            advance_status(e, "accepted") for e in grouped[spec.name][: spec.target_count]
        )
    return accepted


@dataclass
class CurationResult:
    accepted: list[QAEntry]
    per_category: dict[str, dict[str, int]]
    filter_drops: dict[str, int]
    shortfalls: dict[str, int]


_STAGE_NAMES = ("raw", "after_exact_dedup", "after_near_dedup", "after_filter", "accepted")


def curate(
    raw_entries: list[QAEntry],
    taxonomy: list[CategorySpec],
    *,
    near_threshold: float = 0.8,
    rules: QualityRules = QualityRules(),
) -> CurationResult:
    """Run the full curation pipeline and record per-category stage counts."""
    stages = [raw_entries]
    stages.append(exact_dedup(stages[-1]))
    stages.append(near_dedup(stages[-1], near_threshold))

    filter_drops: dict[str, int] = {
        "min_instruction_chars": 0,
        "min_output_chars": 0,
        "refusal_phrase": 0,
    }
    for entry in stages[-1]:
        violated = quality_violation(entry, rules)
        if violated is not None:
            filter_drops[violated] += 1
    stages.append(quality_filter(stages[-1], rules))
    stages.append(balance_categories(stages[-1], taxonomy))

    per_category: dict[str, dict[str, int]] = {
        spec.name: dict.fromkeys(_STAGE_NAMES, 0) for spec in taxonomy
    }
    for stage_name, entries in zip(_STAGE_NAMES, stages):
        for entry in entries:
            if entry.category in per_category:
                per_category[entry.category][stage_name] += 1

    shortfalls = {}
    for spec in taxonomy:
        got = per_category[spec.name]["accepted"]
        if got < spec.target_count:
            shortfalls[spec.name] = spec.target_count - got
    return CurationResult(
        accepted=stages[-1],
        per_category=per_category,
        filter_drops=filter_drops,
        shortfalls=shortfalls,
    )


@dataclass
class DatasetManifest:
    per_category: dict[str, dict]
    totals: dict[str, int]
    filter_drops: dict[str, int]
    shortfalls: dict[str, int]
    word_count: int
    config_snapshot: dict

    def to_dict(self) -> dict:
        return {
            "totals": self.totals,
            "per_category": self.per_category,
            "filter_drops": self.filter_drops,
            "shortfalls": self.shortfalls,
            "word_count": self.word_count,
            "config": self.config_snapshot,
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def manifest_path_for(dataset_path: str | Path) -> Path:
    path = Path(dataset_path)
    return path.with_name(path.stem + ".manifest.json")


def dataset_word_count(entries: list[QAEntry]) -> int:
    return sum(len(e.instruction.split()) + len(e.output.split()) for e in entries)


def export_dataset(
    entries: list[QAEntry],
    path: str | Path,
    format_mode: str = "figure2",
    *,
    taxonomy: list[CategorySpec] | None = None,
    stage_counts: dict[str, dict[str, int]] | None = None,
    filter_drops: dict[str, int] | None = None,
    shortfalls: dict[str, int] | None = None,
    config_snapshot: dict | None = None,
) -> DatasetManifest:
    """Write the dataset as JSON lines plus a manifest file alongside it.

    figure2 mode emits exactly {"instruction", "output"}; alpaca mode adds
    an empty "input" field. Stage counts from curate() slot into the
    manifest; without them each stage defaults to the accepted counts.
    """
    if format_mode not in ("figure2", "alpaca"):
        raise ValueError(f"format_mode must be 'figure2' or 'alpaca', got {format_mode!r}")
    _check_statuses(entries, ("accepted",), "export_dataset")

    lines = []
    for entry in entries:
        if format_mode == "figure2":
            obj = {"instruction": entry.instruction, "output": entry.output}
        else:
            obj = {"instruction": entry.instruction, "input": "", "output": entry.output}
        lines.append(json.dumps(obj, ensure_ascii=False))
    payload = ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")

    accepted_by_category: dict[str, int] = {}
    category_order: list[str] = [s.name for s in taxonomy] if taxonomy else []
    for entry in entries:
        if entry.category not in accepted_by_category:
            accepted_by_category[entry.category] = 0
            if entry.category not in category_order:
                category_order.append(entry.category)
        accepted_by_category[entry.category] += 1

    total_accepted = len(entries)
    per_category: dict[str, dict] = {}
    for name in category_order:
        accepted = accepted_by_category.get(name, 0)
        counts = (
            dict(stage_counts[name])
            if stage_counts and name in stage_counts
            else dict.fromkeys(_STAGE_NAMES, accepted)
        )
        counts["achieved_percent"] = (
            100.0 * accepted / total_accepted if total_accepted else 0.0
        )
        if taxonomy:
            spec = next(s for s in taxonomy if s.name == name)
            counts["target_count"] = spec.target_count
            counts["target_percent"] = spec.target_percent
        per_category[name] = counts

    totals = {
        stage: sum(per_category[name].get(stage, 0) for name in per_category)
        for stage in _STAGE_NAMES
    }
    manifest = DatasetManifest(
        per_category=per_category,
        totals=totals,
        filter_drops=dict(filter_drops or {}),
        shortfalls=dict(shortfalls or {}),
        word_count=dataset_word_count(entries),
        config_snapshot=dict(config_snapshot or {}),
    )
    try:
        write_atomic(Path(path), payload)
        write_atomic(manifest_path_for(path), manifest.to_json_bytes())
    except OSError as exc:
        raise IoFailure(f"failed to write dataset to {path}: {exc}") from exc
    return manifest


_SCHEDULERS = ("cosine", "linear", "constant")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    lora_r: int = 16
    batch_size: int = 2
    epochs: int = 10
    gradient_accumulation: int = 8
    lr_scheduler: str = "cosine"

    def __post_init__(self) -> None:
        for name in ("learning_rate", "lora_r", "batch_size", "epochs", "gradient_accumulation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_scheduler not in _SCHEDULERS:
            raise ValueError(f"lr_scheduler must be one of {_SCHEDULERS}")


def emit_train_config(path: str | Path, **overrides) -> TrainConfig:
    """Write the fine-tuning hyperparameter file; overrides replace defaults."""
    config = TrainConfig(**overrides)
    obj = {
        "learning_rate": config.learning_rate,
        "lora_r": config.lora_r,
        "batch_size": config.batch_size,
        "epochs": config.epochs,
        "gradient_accumulation": config.gradient_accumulation,
        "lr_scheduler": config.lr_scheduler,
    }
    try:
        write_atomic(Path(path), (json.dumps(obj, indent=2) + "\n").encode("utf-8"))
    except OSError as exc:
        raise IoFailure(f"failed to write train config to {path}: {exc}") from exc
    return config


def load_train_config(path: str | Path) -> TrainConfig:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return TrainConfig(**obj)
