"""Curation-stage tests: dedup against O(n^2) oracles, quality filtering with
planted faults, Table-style balancing, export formats, and the train config."""

from __future__ import annotations

import json
import random
import re
import string

import pytest

from conftest import make_entry
from ragforge.curator import (
    CategorySpec,
    QualityRules,
    TaxonomyInvalid,
    UnknownCategory,
    balance_categories,
    curate,
    dataset_word_count,
    emit_train_config,
    exact_dedup,
    export_dataset,
    instruction_shingles,
    load_taxonomy,
    load_train_config,
    manifest_path_for,
    near_dedup,
    normalize_instruction,
    quality_filter,
    shingle_jaccard,
)
from ragforge.qa_generator import load_entries_jsonl


# --- independent oracle implementations -------------------------------------

_PUNCT_TAIL = re.compile(r"[" + re.escape(string.punctuation) + r"\s]+$")


def oracle_normalize(text: str) -> str:
    collapsed = re.sub(r"\s+", " ", text.lower()).strip()
    return _PUNCT_TAIL.sub("", collapsed)


def oracle_exact_dedup(instructions: list[str]) -> list[int]:
    """O(n^2) pairwise duplicate scan; returns surviving indices."""
    kept: list[int] = []
    for j, text in enumerate(instructions):
        duplicate = False
        for i in kept:
            if oracle_normalize(instructions[i]) == oracle_normalize(text):
                duplicate = True
                break
        if not duplicate:
            kept.append(j)
    return kept


def oracle_shingles(text: str) -> frozenset:
    tokens = re.findall(r"\S+", oracle_normalize(text))
    if not tokens:
        return frozenset()
    if len(tokens) < 3:
        return frozenset({tuple(tokens)})
    return frozenset(tuple(tokens[i : i + 3]) for i in range(len(tokens) - 2))


def oracle_jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def oracle_near_dedup(instructions: list[str], threshold: float) -> list[int]:
    """Greedy pairwise near-dup scan without any candidate pruning."""
    kept: list[int] = []
    for j, text in enumerate(instructions):
        sh_j = oracle_shingles(text)
        if any(oracle_jaccard(oracle_shingles(instructions[i]), sh_j) >= threshold for i in kept):
            continue
        kept.append(j)
    return kept


class TestExactDedup:
    def test_case_and_punctuation_insensitive(self):
        entries = [make_entry("What is X?"), make_entry("what is x"), make_entry("What is Y?")]
        kept = exact_dedup(entries)
        assert [e.instruction for e in kept] == ["What is X?", "What is Y?"]
        assert all(e.status == "deduped" for e in kept)

    def test_empty_list(self):
        assert exact_dedup([]) == []

    def test_earliest_duplicate_kept_in_stable_order(self):
        entries = [make_entry(t) for t in ["b?", "a?", "B", "c?", "A!"]]
        assert [e.instruction for e in exact_dedup(entries)] == ["b?", "a?", "c?"]

    def test_500_entries_with_50_planted_dupes_match_oracle(self):
        rng = random.Random(42)
        instructions = [
            f"What does criterion {i} say about marker {rng.randrange(1000)}?"
            for i in range(450)
        ]
        # Plant 50 duplicates of earlier entries with cosmetic mutations.
        for i in range(50):
            source = instructions[rng.randrange(len(instructions))]
            mutated = source.upper() if i % 2 else source.rstrip("?") + "  ??"
            instructions.insert(rng.randrange(len(instructions)), mutated)
        assert len(instructions) == 500
        entries = [make_entry(t) for t in instructions]
        kept = exact_dedup(entries)
        expected = [instructions[i] for i in oracle_exact_dedup(instructions)]
        assert [e.instruction for e in kept] == expected

    def test_idempotent(self):
        entries = [make_entry(t) for t in ["q one?", "Q ONE", "q two?"]]
        once = exact_dedup(entries)
        assert exact_dedup(once) == once


def _long_sentence(seed: int, words: int = 20) -> str:
    rng = random.Random(seed)
    vocab = ["criterion", "duration", "onset", "severity", "pattern", "episode",
             "feature", "threshold", "clinical", "period", "distress", "functioning"]
    return " ".join(rng.choice(vocab) + str(rng.randrange(50)) for _ in range(words))


class TestNearDedup:
    def test_identical_pair_dropped(self):
        entries = [
            make_entry("alpha beta gamma delta", status="deduped"),
            make_entry("alpha beta gamma delta!", status="deduped"),
        ]
        assert len(near_dedup(entries, 0.8)) == 1

    def test_disjoint_instructions_both_kept(self):
        entries = [
            make_entry("alpha beta gamma delta", status="deduped"),
            make_entry("epsilon zeta eta theta", status="deduped"),
        ]
        assert len(near_dedup(entries, 0.05)) == 2

    def test_200_paraphrase_pairs_match_brute_force_oracle(self):
        rng = random.Random(7)
        instructions: list[str] = []
        for i in range(100):
            base = _long_sentence(i)
            instructions.append(base)
            instructions.append(base + " extra" + str(i))  # Jaccard 18/19 > 0.8
        for i in range(100):
            instructions.append(_long_sentence(1000 + i))  # unrelated filler
        rng.shuffle(instructions)
        entries = [make_entry(t, status="deduped") for t in instructions]
        kept = near_dedup(entries, 0.8)
        expected = [instructions[i] for i in oracle_near_dedup(instructions, 0.8)]
        assert [e.instruction for e in kept] == expected
        # The planted pairs actually sit above the threshold.
        sample = oracle_jaccard(
            oracle_shingles(_long_sentence(3)), oracle_shingles(_long_sentence(3) + " extra3")
        )
        assert sample >= 0.8

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            near_dedup([], threshold=0.0)
        with pytest.raises(ValueError):
            near_dedup([], threshold=1.5)

    def test_idempotent(self):
        entries = [
            make_entry(_long_sentence(i), status="deduped") for i in range(30)
        ] + [make_entry(_long_sentence(5) + " tail5", status="deduped")]
        once = near_dedup(entries, 0.8)
        assert near_dedup(once, 0.8) == once

    def test_shingle_jaccard_definition(self):
        assert shingle_jaccard(frozenset(), frozenset()) == 1.0
        assert shingle_jaccard(frozenset({("a",)}), frozenset()) == 0.0
        assert instruction_shingles("one two") == frozenset({("one", "two")})
        assert normalize_instruction("  What   IS x?? ") == "what is x"


class TestQualityFilter:
    def test_refusal_output_dropped(self):
        entries = [
            make_entry("A valid instruction?", output="As an AI, I cannot provide that information.", status="deduped")
        ]
        assert quality_filter(entries) == []

    def test_short_instruction_dropped(self):
        entries = [make_entry("Short", status="deduped")]
        assert quality_filter(entries, QualityRules(min_instruction_chars=12)) == []

    def test_planted_violations_are_exactly_the_drops(self):
        rng = random.Random(3)
        good = [
            make_entry(
                f"What does criterion {i} require for diagnosis?",
                output=f"Criterion {i} requires persistent features over a defined period.",
                status="deduped",
            )
            for i in range(90)
        ]
        bad = (
            [make_entry(f"x{i}?", status="deduped") for i in range(4)]
            + [make_entry(f"A valid question number {i}?", output="too short", status="deduped") for i in range(3)]
            + [
                make_entry(
                    f"Another valid question number {i}?",
                    output="I'm sorry, but as a language model I cannot answer.",
                    status="deduped",
                )
                for i in range(3)
            ]
        )
        entries = good + bad
        rng.shuffle(entries)
        kept = quality_filter(entries)
        assert len(kept) == 90
        kept_instructions = {e.instruction for e in kept}
        assert all(b.instruction not in kept_instructions for b in bad)
        assert all(e.status == "filtered" for e in kept)

    def test_refusal_match_is_case_insensitive(self):
        entry = make_entry(
            "A valid instruction here?", output="AS AN AI ASSISTANT I decline.", status="deduped"
        )
        assert quality_filter([entry]) == []


def _taxonomy() -> list[CategorySpec]:
    return [
        CategorySpec(name="Anxiety", target_count=80, target_percent=50.0),
        CategorySpec(name="Depressive", target_count=40, target_percent=25.0),
        CategorySpec(name="Misc.", target_count=40, target_percent=25.0),
    ]


def _filtered(category: str, n: int, start: int = 0):
    return [
        make_entry(
            f"Question {start + i} for {category}?",
            output=f"Answer {start + i} for {category} with enough words to pass.",
            category=category,
            status="filtered",
        )
        for i in range(n)
    ]


class TestBalance:
    def test_oversupply_truncated_to_target(self):
        kept = balance_categories(_filtered("Anxiety", 100), _taxonomy())
        assert len(kept) == 80
        assert all(e.status == "accepted" for e in kept)

    def test_undersupply_keeps_all(self):
        entries = _filtered("Depressive", 30)
        kept = balance_categories(entries, _taxonomy())
        assert len(kept) == 30

    def test_output_grouped_in_taxonomy_order(self):
        entries = _filtered("Misc.", 5) + _filtered("Anxiety", 5) + _filtered("Depressive", 5)
        kept = balance_categories(entries, _taxonomy())
        assert [e.category for e in kept] == ["Anxiety"] * 5 + ["Depressive"] * 5 + ["Misc."] * 5

    def test_unknown_category_raises(self):
        with pytest.raises(UnknownCategory):
            balance_categories(_filtered("Unlisted", 1), _taxonomy())


class TestCurate:
    def test_monotonic_counts_and_shortfalls(self):
        raw = (
            [make_entry(f"Anxiety question {i}?", category="Anxiety") for i in range(90)]
            + [make_entry("Anxiety question 0?", category="Anxiety")]  # exact dupe
            + [make_entry(f"Depressive question {i}?", category="Depressive") for i in range(20)]
            + [make_entry("tiny?", category="Misc.")]  # filtered out
            + [make_entry(f"Misc question {i}?", category="Misc.") for i in range(50)]
        )
        result = curate(raw, _taxonomy())
        for counts in result.per_category.values():
            assert (
                counts["raw"]
                >= counts["after_exact_dedup"]
                >= counts["after_near_dedup"]
                >= counts["after_filter"]
                >= counts["accepted"]
            )
        assert result.shortfalls["Depressive"] == 20
        assert "Anxiety" not in result.shortfalls
        assert result.filter_drops["min_instruction_chars"] == 1

    def test_order_stability_through_stages(self):
        raw = [make_entry(f"Stable question number {i}?", category="Anxiety") for i in range(40)]
        result = curate(raw, _taxonomy())
        kept = [e.instruction for e in result.accepted]
        assert kept == sorted(kept, key=lambda t: int(re.search(r"(\d+)", t).group(1)))


class TestExport:
    def test_figure2_mode_emits_exactly_two_keys(self, tmp_path):
        entries = [make_entry("One question?", category="Anxiety", status="accepted")]
        path = tmp_path / "dataset.jsonl"
        export_dataset(entries, path, "figure2", taxonomy=_taxonomy())
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        obj = json.loads(lines[0])
        assert list(obj.keys()) == ["instruction", "output"]

    def test_alpaca_mode_adds_empty_input(self, tmp_path):
        entries = [make_entry("One question?", category="Anxiety", status="accepted")]
        path = tmp_path / "dataset.jsonl"
        export_dataset(entries, path, "alpaca")
        obj = json.loads(path.read_text().splitlines()[0])
        assert list(obj.keys()) == ["instruction", "input", "output"]
        assert obj["input"] == ""

    def test_zero_entries_empty_file_zero_manifest(self, tmp_path):
        path = tmp_path / "dataset.jsonl"
        manifest = export_dataset([], path, "figure2", taxonomy=_taxonomy())
        assert path.read_bytes() == b""
        assert manifest.totals["accepted"] == 0
        assert manifest.word_count == 0
        assert manifest_path_for(path).is_file()

    def test_manifest_matches_independent_recount_of_file(self, tmp_path):
        entries = []
        for category, n in (("Anxiety", 12), ("Depressive", 8)):
            entries.extend(
                make_entry(
                    f"Question {i} for {category}?",
                    output=f"Answer {i} for {category} with several words.",
                    category=category,
                    status="accepted",
                )
                for i in range(n)
            )
        path = tmp_path / "dataset.jsonl"
        manifest = export_dataset(entries, path, "figure2", taxonomy=_taxonomy())
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        recount_words = sum(
            len(r["instruction"].split()) + len(r["output"].split()) for r in rows
        )
        assert manifest.word_count == recount_words == dataset_word_count(entries)
        assert manifest.totals["accepted"] == len(rows) == 20
        assert manifest.per_category["Anxiety"]["achieved_percent"] == 100.0 * 12 / 20

    def test_rejects_non_accepted_entries(self, tmp_path):
        with pytest.raises(ValueError):
            export_dataset([make_entry("Raw one?")], tmp_path / "d.jsonl", "figure2")

    def test_exported_file_loadable_as_entries_jsonl(self, tmp_path):
        # The raw.jsonl sibling format keeps full provenance.
        entries = [make_entry("One question?", status="accepted")]
        from ragforge.qa_generator import save_entries_jsonl

        path = tmp_path / "entries.jsonl"
        save_entries_jsonl(entries, path)
        assert load_entries_jsonl(path) == entries


class TestTrainConfig:
    def test_defaults_parse_back_exactly(self, tmp_path):
        path = tmp_path / "train_config.json"
        emit_train_config(path)
        config = load_train_config(path)
        assert config.learning_rate == 5e-5
        assert config.lora_r == 16
        assert config.batch_size == 2
        assert config.epochs == 10
        assert config.gradient_accumulation == 8
        assert config.lr_scheduler == "cosine"

    def test_override_changes_only_that_field(self, tmp_path):
        path = tmp_path / "train_config.json"
        emit_train_config(path, epochs=3)
        config = load_train_config(path)
        assert config.epochs == 3
        assert config.lora_r == 16

    def test_emit_twice_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        emit_train_config(a)
        emit_train_config(b)
        assert a.read_bytes() == b.read_bytes()

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            emit_train_config(tmp_path / "x.json", epochs=0)
        with pytest.raises(ValueError):
            emit_train_config(tmp_path / "x.json", lr_scheduler="exotic")


class TestTaxonomy:
    def test_shipped_taxonomy_targets(self, sample_data_dir):
        taxonomy = load_taxonomy(sample_data_dir / "dsm5_taxonomy.json")
        assert len(taxonomy) == 23
        by_percent = {}
        for spec in taxonomy:
            by_percent.setdefault(spec.target_percent, []).append(spec)
        assert len(by_percent[4.0]) == 20
        assert len(by_percent[2.0]) == 2
        assert len(by_percent[16.0]) == 1
        assert all(s.target_count == 80 for s in by_percent[4.0])
        assert all(s.target_count == 40 for s in by_percent[2.0])
        assert by_percent[16.0][0].target_count == 320
        assert sum(s.target_count for s in taxonomy) == 2000

    def test_percent_sum_enforced(self, tmp_path):
        bad = {"total_target": 100, "categories": [{"name": "a", "target_percent": 50}]}
        path = tmp_path / "tax.json"
        path.write_text(json.dumps(bad))
        with pytest.raises(TaxonomyInvalid):
            load_taxonomy(path)

    def test_duplicate_names_rejected(self, tmp_path):
        bad = {
            "total_target": 100,
            "categories": [
                {"name": "a", "target_percent": 50},
                {"name": "a", "target_percent": 50},
            ],
        }
        path = tmp_path / "tax.json"
        path.write_text(json.dumps(bad))
        with pytest.raises(TaxonomyInvalid):
            load_taxonomy(path)
