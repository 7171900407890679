"""End-to-end orchestration: ingest -> index -> generate -> curate -> eval.

Each stage reads its inputs from the workspace, writes its artifact
atomically (temp file + rename, so a failing stage never corrupts earlier
artifacts), and leaves a stage record with input/config hashes; re-running
a stage whose hashes are unchanged is skipped as up to date.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import PipelineConfig
from .curator import curate, emit_train_config, export_dataset, load_taxonomy
from .doc_ingest import load_structured, parse_tei, serialize_structured
from .embed_index import CorpusIndex, chunk_document, embed_and_index
from .gateway import EndpointProfile, HttpGateway
from .judge_harness import render_report_text, run_eval
from .offline import make_offline_gateway, offline_profiles
from .qa_generator import (
    build_retrieval_query,
    generate_category_batch,
    load_entries_jsonl,
    save_entries_jsonl,
)
from .util import write_atomic

logger = logging.getLogger(__name__)

STAGES = ("ingest", "index", "generate", "curate", "eval")


class StageFailed(Exception):
    def __init__(self, stage: str, reason: str) -> None:
        super().__init__(f"stage '{stage}' failed: {reason}")
        self.stage = stage
        self.reason = reason


@dataclass
class PipelineResult:
    statuses: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, list[Path]] = field(default_factory=dict)


def artifact_paths(workspace: Path) -> dict[str, list[Path]]:
    return {
        "ingest": [workspace / "structured.json"],
        "index": [workspace / "corpus.idx", workspace / "corpus.chunks.jsonl"],
        "generate": [workspace / "raw.jsonl"],
        "curate": [
            workspace / "dataset.jsonl",
            workspace / "dataset.manifest.json",
            workspace / "train_config.json",
        ],
        "eval": [workspace / "eval_report.json", workspace / "eval_report.txt"],
    }


def _hash_bytes(*parts: bytes) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part)
        digest.update(b"\x00")
    return digest.hexdigest()


def _hash_files(paths: list[Path]) -> str:
    return _hash_bytes(*(p.read_bytes() for p in paths))


def _config_hash(config: PipelineConfig, offline: bool) -> str:
    snapshot = dict(config.snapshot())
    snapshot["offline"] = offline
    return _hash_bytes(json.dumps(snapshot, sort_keys=True).encode("utf-8"))


def _stage_inputs(stage: str, config: PipelineConfig, workspace: Path) -> list[Path]:
    if stage == "ingest":
        return [config.tei_path]
    if stage == "index":
        return [workspace / "structured.json"]
    if stage == "generate":
        return [
            workspace / "structured.json",
            workspace / "corpus.idx",
            workspace / "corpus.chunks.jsonl",
            config.taxonomy_path,
        ]
    if stage == "curate":
        return [workspace / "raw.jsonl", config.taxonomy_path]
    if stage == "eval":
        return [workspace / "corpus.idx", workspace / "corpus.chunks.jsonl"]
    raise ValueError(f"unknown stage {stage!r}")


_PREREQUISITE_STAGE = {
    "index": "ingest",
    "generate": "index",
    "curate": "generate",
    "eval": "index",
}


def _check_prerequisites(stage: str, config: PipelineConfig, workspace: Path) -> list[Path]:
    inputs = _stage_inputs(stage, config, workspace)
    missing = [p for p in inputs if not p.is_file()]
    if missing:
        needed = _PREREQUISITE_STAGE.get(stage)
        hint = f" (run the '{needed}' stage first)" if needed else ""
        raise StageFailed(stage, f"missing prerequisite artifact(s) {[str(p) for p in missing]}{hint}")
    return inputs


def _record_path(workspace: Path, stage: str) -> Path:
    return workspace / "records" / f"{stage}.json"


def _write_record(
    workspace: Path, stage: str, inputs_hash: str, config_hash: str, duration: float
) -> None:
    record = {
        "stage": stage,
        "inputs_hash": inputs_hash,
        "config_hash": config_hash,
        "duration_s": round(duration, 6),
        "completed_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    write_atomic(
        _record_path(workspace, stage),
        (json.dumps(record, indent=2) + "\n").encode("utf-8"),
    )


def _up_to_date(
    workspace: Path, stage: str, inputs_hash: str, config_hash: str, outputs: list[Path]
) -> bool:
    record_file = _record_path(workspace, stage)
    if not record_file.is_file():
        return False
    try:
        record = json.loads(record_file.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return False
    return (
        record.get("inputs_hash") == inputs_hash
        and record.get("config_hash") == config_hash
        and all(p.is_file() for p in outputs)
    )


def _profile(config: PipelineConfig, role: str, offline: bool, stage: str) -> EndpointProfile:
    if offline:
        return offline_profiles()[role]
    profile = config.endpoints.get(role)
    if profile is None:
        raise StageFailed(stage, f"no '{role}' endpoint configured and not running offline")
    return profile


def category_generation_bounds(
    target_count: int, min_entries: int, max_entries: int
) -> tuple[int, int]:
    """Raw-entry bounds for one category: never aim below the accepted-count
    target, and leave headroom above it for dedup and filter losses."""
    lo = max(min_entries, target_count)
    hi = max(max_entries, lo, math.ceil(target_count * 1.25))
    return lo, hi


def _stage_ingest(config: PipelineConfig, workspace: Path, gateway) -> None:
    doc = parse_tei(config.tei_path.read_bytes())
    write_atomic(workspace / "structured.json", serialize_structured(doc))


def _stage_index(config: PipelineConfig, workspace: Path, gateway) -> None:
    doc = load_structured((workspace / "structured.json").read_bytes())
    chunks = chunk_document(doc, config.chunking)
    profile = _profile(config, "embedder", gateway.offline, "index")
    corpus = embed_and_index(chunks, gateway.gateway, profile)
    corpus.save(workspace / "corpus.idx")


def _stage_generate(config: PipelineConfig, workspace: Path, gateway) -> None:
    doc = load_structured((workspace / "structured.json").read_bytes())
    corpus = CorpusIndex.load(workspace / "corpus.idx")
    taxonomy = load_taxonomy(config.taxonomy_path)
    generator = _profile(config, "generator", gateway.offline, "generate")
    embedder = _profile(config, "embedder", gateway.offline, "generate")
    entries = []
    for spec in taxonomy:
        bounds = category_generation_bounds(
            spec.target_count, config.generation.min_entries, config.generation.max_entries
        )
        query = build_retrieval_query(doc, spec.name, spec.toc_headings)
        batch = generate_category_batch(
            spec.name,
            bounds,
            corpus,
            gateway.gateway,
            generator,
            embedder,
            retry_budget=config.generation.retry_budget,
            ask_count=config.generation.ask_count,
            k=config.retrieval_k,
            retrieval_query=query,
        )
        logger.info("generated %d raw entries for %s", len(batch), spec.name)
        entries.extend(batch)
    save_entries_jsonl(entries, workspace / "raw.jsonl")


def _stage_curate(config: PipelineConfig, workspace: Path, gateway) -> None:
    entries = load_entries_jsonl(workspace / "raw.jsonl")
    taxonomy = load_taxonomy(config.taxonomy_path)
    result = curate(
        entries,
        taxonomy,
        near_threshold=config.curation.near_dup_threshold,
        rules=config.curation.quality_rules(),
    )
    export_dataset(
        result.accepted,
        workspace / "dataset.jsonl",
        config.dataset_format,
        taxonomy=taxonomy,
        stage_counts=result.per_category,
        filter_drops=result.filter_drops,
        shortfalls=result.shortfalls,
        config_snapshot=config.snapshot(),
    )
    emit_train_config(workspace / "train_config.json")


def _stage_eval(config: PipelineConfig, workspace: Path, gateway) -> None:
    corpus = CorpusIndex.load(workspace / "corpus.idx")
    report = run_eval(
        corpus,
        config.eval.n_questions,
        config.seed,
        gateway.gateway,
        profile_a=_profile(config, "candidate_a", gateway.offline, "eval"),
        profile_b=_profile(config, "candidate_b", gateway.offline, "eval"),
        judge_profile=_profile(config, "judge", gateway.offline, "eval"),
        question_profile=_profile(config, "generator", gateway.offline, "eval"),
    )
    write_atomic(workspace / "eval_report.json", report.to_json_bytes())
    write_atomic(workspace / "eval_report.txt", render_report_text(report).encode("utf-8"))


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "index": _stage_index,
    "generate": _stage_generate,
    "curate": _stage_curate,
    "eval": _stage_eval,
}


@dataclass
class _GatewayHandle:
    gateway: object
    offline: bool


def run_pipeline(
    config: PipelineConfig,
    stages: list[str] | None = None,
    *,
    offline: bool = False,
    gateway=None,
) -> PipelineResult:
    """Run the requested stages in canonical order.

    Offline mode substitutes a deterministic stub for every endpoint, making
    runs reproducible byte for byte. Unknown stage names raise ValueError;
    missing prerequisites or endpoint profiles raise StageFailed; domain and
    gateway errors (including budget/retry exhaustion) propagate unwrapped
    so callers can tell the cases apart.
    """
    requested = list(stages) if stages is not None else list(STAGES)
    unknown = [s for s in requested if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stage(s) {unknown}; valid stages are {list(STAGES)}")
    ordered = [s for s in STAGES if s in requested]

    workspace = Path(config.workspace)
    workspace.mkdir(parents=True, exist_ok=True)
    handle = _GatewayHandle(
        gateway=gateway if gateway is not None else (
            make_offline_gateway() if offline else HttpGateway()
        ),
        offline=offline,
    )
    config_hash = _config_hash(config, offline)
    outputs_by_stage = artifact_paths(workspace)

    result = PipelineResult()
    for stage in ordered:
        inputs = _check_prerequisites(stage, config, workspace)
        inputs_hash = _hash_files(inputs)
        outputs = outputs_by_stage[stage]
        if _up_to_date(workspace, stage, inputs_hash, config_hash, outputs):
            logger.info("stage %s is up to date, skipping", stage)
            result.statuses[stage] = "skipped"
            result.artifacts[stage] = outputs
            continue
        started = time.monotonic()
        _STAGE_FNS[stage](config, workspace, handle)
        _write_record(workspace, stage, inputs_hash, config_hash, time.monotonic() - started)
        result.statuses[stage] = "ran"
        result.artifacts[stage] = outputs
        logger.info("stage %s completed", stage)
    return result
