"""Command-line interface.

Subcommands mirror the pipeline stages (ingest, index, generate, curate,
eval) plus `run` for the orchestrated flow. `--offline` swaps every
endpoint for the deterministic stub so everything works without network
access or credentials.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 endpoint
exhaustion (retry or generation budget ran out).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigInvalid, PipelineConfig, load_config
from .curator import curate, export_dataset, load_taxonomy
from .doc_ingest import load_structured, parse_tei, serialize_structured
from .embed_index import ChunkPolicy, CorpusIndex, chunk_document, embed_and_index
from .gateway import ExhaustedRetries, HttpGateway
from .judge_harness import render_report_text, run_eval
from .offline import make_offline_gateway, offline_profiles
from .pipeline import STAGES, StageFailed, run_pipeline
from .qa_generator import (
    BudgetExhausted,
    build_retrieval_query,
    generate_category_batch,
    load_entries_jsonl,
    save_entries_jsonl,
)
from .pipeline import category_generation_bounds
from .util import write_atomic

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_EXHAUSTED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragforge",
        description="Build balanced instruction datasets from structured documents "
        "via retrieval-augmented generation, and judge competing answer models.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse TEI XML into structured JSON")
    p_ingest.add_argument("--tei", required=True, type=Path)
    p_ingest.add_argument("--out", required=True, type=Path)

    p_index = sub.add_parser("index", help="chunk + embed a structured document")
    p_index.add_argument("--doc", required=True, type=Path)
    p_index.add_argument("--out", required=True, type=Path)
    p_index.add_argument("--max-tokens", type=int, default=256)
    p_index.add_argument("--overlap", type=int, default=32)
    p_index.add_argument("--config", type=Path)
    p_index.add_argument("--offline", action="store_true")

    p_generate = sub.add_parser("generate", help="generate raw QA entries per category")
    p_generate.add_argument("--index", required=True, type=Path)
    p_generate.add_argument("--categories", required=True, type=Path, help="taxonomy config")
    p_generate.add_argument("--out", required=True, type=Path)
    p_generate.add_argument("--doc", type=Path, help="structured JSON for retrieval queries")
    p_generate.add_argument("--config", type=Path)
    p_generate.add_argument("--offline", action="store_true")

    p_curate = sub.add_parser("curate", help="dedup, filter, balance, and export")
    p_curate.add_argument("--in", dest="raw", required=True, type=Path)
    p_curate.add_argument("--taxonomy", required=True, type=Path)
    p_curate.add_argument("--out", required=True, type=Path)
    p_curate.add_argument("--format", choices=("figure2", "alpaca"), default="figure2")

    p_eval = sub.add_parser("eval", help="judge two answer endpoints on sampled questions")
    p_eval.add_argument("--index", required=True, type=Path)
    p_eval.add_argument("--n", type=int, default=80)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--model-a", default="candidate_a", help="endpoint role in config")
    p_eval.add_argument("--model-b", default="candidate_b", help="endpoint role in config")
    p_eval.add_argument("--judge", default="judge", help="endpoint role in config")
    p_eval.add_argument("--out", required=True, type=Path)
    p_eval.add_argument("--config", type=Path)
    p_eval.add_argument("--offline", action="store_true")

    p_run = sub.add_parser("run", help="run the configured pipeline end to end")
    p_run.add_argument("--config", required=True, type=Path)
    p_run.add_argument("--offline", action="store_true")
    p_run.add_argument(
        "--stages",
        help=f"comma-separated subset of {','.join(STAGES)} (default: all)",
    )

    return parser


def _endpoints(args, roles: list[str]) -> tuple[object, dict]:
    """Gateway plus {role: profile} for the requested roles."""
    if args.offline:
        return make_offline_gateway(), offline_profiles()
    if not args.config:
        raise ConfigInvalid(
            [f"roles {roles} need endpoint profiles: pass --config or --offline"]
        )
    config = load_config(args.config)
    missing = [r for r in roles if r not in config.endpoints]
    if missing:
        raise ConfigInvalid([f"config has no endpoint profile for role '{r}'" for r in missing])
    return HttpGateway(), config.endpoints


def _cmd_ingest(args) -> int:
    doc = parse_tei(args.tei.read_bytes())
    write_atomic(args.out, serialize_structured(doc))
    print(f"wrote {args.out} ({len(doc.sections)} top-level sections)")
    return EXIT_OK


def _cmd_index(args) -> int:
    gateway, profiles = _endpoints(args, ["embedder"])
    doc = load_structured(args.doc.read_bytes())
    try:
        policy = ChunkPolicy(max_tokens=args.max_tokens, overlap_tokens=args.overlap)
    except ValueError as exc:
        raise ConfigInvalid([str(exc)]) from exc
    chunks = chunk_document(doc, policy)
    corpus = embed_and_index(chunks, gateway, profiles["embedder"])
    corpus.save(args.out)
    print(f"wrote {args.out} ({corpus.size} chunks)")
    return EXIT_OK


def _cmd_generate(args) -> int:
    gateway, profiles = _endpoints(args, ["generator", "embedder"])
    corpus = CorpusIndex.load(args.index)
    taxonomy = load_taxonomy(args.categories)
    doc = load_structured(args.doc.read_bytes()) if args.doc else None
    settings = load_config(args.config).generation if args.config else None
    min_entries = settings.min_entries if settings else 60
    max_entries = settings.max_entries if settings else 100
    entries = []
    for spec in taxonomy:
        bounds = category_generation_bounds(spec.target_count, min_entries, max_entries)
        query = (
            build_retrieval_query(doc, spec.name, spec.toc_headings)
            if doc
            else " ".join((spec.name,) + spec.toc_headings)
        )
        batch = generate_category_batch(
            spec.name,
            bounds,
            corpus,
            gateway,
            profiles["generator"],
            profiles["embedder"],
            retrieval_query=query,
            retry_budget=settings.retry_budget if settings else 30,
            ask_count=settings.ask_count if settings else 10,
        )
        entries.extend(batch)
        print(f"{spec.name}: {len(batch)} raw entries")
    save_entries_jsonl(entries, args.out)
    print(f"wrote {args.out} ({len(entries)} entries)")
    return EXIT_OK


def _cmd_curate(args) -> int:
    entries = load_entries_jsonl(args.raw)
    taxonomy = load_taxonomy(args.taxonomy)
    result = curate(entries, taxonomy)
    manifest = export_dataset(
        result.accepted,
        args.out,
        args.format,
        taxonomy=taxonomy,
        stage_counts=result.per_category,
        filter_drops=result.filter_drops,
        shortfalls=result.shortfalls,
    )
    print(
        f"wrote {args.out}: {manifest.totals['accepted']} accepted of "
        f"{manifest.totals['raw']} raw, {manifest.word_count} words"
    )
    if result.shortfalls:
        print(f"shortfalls: {result.shortfalls}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    roles = sorted({args.model_a, args.model_b, args.judge, "generator"})
    gateway, profiles = _endpoints(args, roles)
    corpus = CorpusIndex.load(args.index)
    report = run_eval(
        corpus,
        args.n,
        args.seed,
        gateway,
        profile_a=profiles[args.model_a],
        profile_b=profiles[args.model_b],
        judge_profile=profiles[args.judge],
        question_profile=profiles["generator"],
    )
    write_atomic(args.out, report.to_json_bytes())
    text_path = args.out.with_suffix(".txt")
    write_atomic(text_path, render_report_text(report).encode("utf-8"))
    print(render_report_text(report))
    print(f"wrote {args.out} and {text_path}")
    return EXIT_OK


def _cmd_run(args) -> int:
    config: PipelineConfig = load_config(args.config)
    stages = args.stages.split(",") if args.stages else None
    try:
        result = run_pipeline(config, stages, offline=args.offline)
    except ValueError as exc:
        raise ConfigInvalid([str(exc)]) from exc
    for stage, status in result.statuses.items():
        print(f"{stage}: {status}")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "index": _cmd_index,
    "generate": _cmd_generate,
    "curate": _cmd_curate,
    "eval": _cmd_eval,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return _COMMANDS[args.command](args)
    except ConfigInvalid as exc:
        for error in exc.errors:
            print(f"config error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except (BudgetExhausted, ExhaustedRetries) as exc:
        print(f"endpoint exhaustion: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # domain errors from individual stages
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
