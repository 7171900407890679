"""Evaluate two answer endpoints with a judge endpoint.

Questions are sampled from corpus chunks with a seeded RNG, each candidate
answers every question, and the judge scores every answer independently on
a 1-10 scale (answers are never shown side by side, which removes position
bias by construction). Aggregation sums and tabulates the scores.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field

from .embed_index import CorpusIndex
from .curator import normalize_instruction
from .gateway import (
    ChatTurn,
    CompletionParams,
    DEFAULT_GENERATION_PARAMS,
    DEFAULT_JUDGE_PARAMS,
    EndpointProfile,
    GatewayError,
)
from .qa_generator import BudgetExhausted, condense_query

logger = logging.getLogger(__name__)


class InsufficientChunks(Exception):
    pass


class UnparsableJudgment(Exception):
    """Judge reply had no valid SCORE line even after one re-ask."""


QUESTION_MARKER = "Write one exam-style question"
JUDGE_MARKER = "final line of exactly: SCORE:"

_SCORE_RE = re.compile(r"^\s*SCORE:\s*(-?\d+)\s*$")


@dataclass(frozen=True)
class SampledQuestion:
    question_id: str
    question: str
    source_chunk_id: str


@dataclass(frozen=True)
class AnswerPair:
    question_id: str
    answer_a: str
    answer_b: str


@dataclass
class CollectedAnswers:
    pairs: list[AnswerPair]
    exclusions: list[dict]


@dataclass(frozen=True)
class JudgeRecord:
    question_id: str
    question: str
    answer_a: str
    answer_b: str
    score_a: int
    score_b: int
    judge_model: str
    rationale_a: str = ""
    rationale_b: str = ""

    def __post_init__(self) -> None:
        for label, score in (("a", self.score_a), ("b", self.score_b)):
            if not 1 <= score <= 10:
                raise ValueError(f"score_{label} must be in [1, 10], got {score}")
        if not (self.answer_a and self.answer_b):
            raise ValueError("both answers must be non-empty before scoring")


@dataclass
class EvalReport:
    n_questions: int
    total_a: int
    total_b: int
    mean_a: float
    mean_b: float
    wins_a: int
    wins_b: int
    ties: int
    per_question: list[dict]
    judge_model: str = ""
    exclusions: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "total_a": self.total_a,
            "total_b": self.total_b,
            "mean_a": self.mean_a,
            "mean_b": self.mean_b,
            "wins_a": self.wins_a,
            "wins_b": self.wins_b,
            "ties": self.ties,
            "judge_model": self.judge_model,
            "per_question": self.per_question,
            "exclusions": self.exclusions,
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_dict(), ensure_ascii=False, indent=2) + "\n").encode("utf-8")


def sample_questions(
    index: CorpusIndex,
    n: int,
    gateway,
    profile: EndpointProfile,
    seed: int,
    *,
    params: CompletionParams = DEFAULT_GENERATION_PARAMS,
    attempt_budget: int | None = None,
) -> list[SampledQuestion]:
    """Sample n chunks without replacement and draft one question per chunk.

    Each draft is condensed to a standalone question, questions are
    deduplicated on normalized text, and shortfalls draw further chunks
    until the attempt budget (default 3n) runs out.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if index.size < n:
        raise InsufficientChunks(f"index has {index.size} chunks, need {n}")
    budget = attempt_budget if attempt_budget is not None else 3 * n

    pool = list(index.chunks)
    random.Random(seed).shuffle(pool)

    questions: list[SampledQuestion] = []
    seen: set[str] = set()
    attempts = 0
    for chunk in pool:
        if len(questions) >= n:
            break
        if attempts >= budget:
            raise BudgetExhausted(
                f"question sampling got {len(questions)} of {n} within {budget} attempts",
                [],
            )
        attempts += 1
        draft_messages = [
            ChatTurn(
                "user",
                f"{QUESTION_MARKER} grounded strictly in the following source "
                f"passage. Reply with only the question.\n\nPassage:\n{chunk.text}",
            )
        ]
        draft = gateway.chat_complete(profile, draft_messages, params).text.strip()
        question = condense_query(
            [draft_messages[0], ChatTurn("assistant", draft)],
            draft,
            gateway,
            profile,
            params,
        )
        key = normalize_instruction(question)
        if not key or key in seen:
            continue
        seen.add(key)
        questions.append(
            SampledQuestion(
                question_id=f"q{len(questions) + 1:04d}",
                question=question,
                source_chunk_id=chunk.chunk_id,
            )
        )
    if len(questions) < n:
        raise BudgetExhausted(
            f"question sampling got {len(questions)} of {n} before the pool ran out", []
        )
    return questions


def collect_answers(
    questions: list[SampledQuestion],
    profile_a: EndpointProfile,
    profile_b: EndpointProfile,
    gateway,
    *,
    params: CompletionParams = DEFAULT_GENERATION_PARAMS,
) -> CollectedAnswers:
    """Ask both candidate endpoints every question.

    A question whose answer fails (after the gateway's own retries) on
    either side is excluded from scoring and noted; the error propagates
    only if every question fails.
    """
    if not questions:
        raise ValueError("questions must be non-empty")
    pairs: list[AnswerPair] = []
    exclusions: list[dict] = []
    last_error: GatewayError | None = None
    for question in questions:
        answers = {}
        failed = False
        for label, profile in (("a", profile_a), ("b", profile_b)):
            try:
                completion = gateway.chat_complete(
                    profile, [ChatTurn("user", question.question)], params
                )
                answers[label] = completion.text
            except GatewayError as exc:
                last_error = exc
                exclusions.append(
                    {"question_id": question.question_id, "side": label, "error": str(exc)}
                )
                failed = True
        if not failed:
            pairs.append(
                AnswerPair(
                    question_id=question.question_id,
                    answer_a=answers["a"],
                    answer_b=answers["b"],
                )
            )
    if not pairs and last_error is not None:
        raise last_error
    return CollectedAnswers(pairs=pairs, exclusions=exclusions)


@dataclass(frozen=True)
class Judgment:
    score: int
    rationale: str


def judge_messages(question: str, answer: str, context: str | None = None) -> list[ChatTurn]:
    reference = f"\nReference source:\n{context}\n" if context else ""
    user = (
        f"Question:\n{question}\n\nAnswer:\n{answer}\n{reference}\n"
        "Rate the answer for accuracy against the reference source, "
        "completeness, and clarity. Give a brief rationale, then end your "
        f"reply with a {JUDGE_MARKER} <integer from 1 to 10>"
    )
    return [
        ChatTurn("system", "You are an impartial examiner scoring one answer to one question."),
        ChatTurn("user", user),
    ]


def _parse_score(text: str) -> tuple[int, str] | None:
    lines = text.splitlines()
    for i in range(len(lines) - 1, -1, -1):
        match = _SCORE_RE.match(lines[i])
        if match:
            score = int(match.group(1))
            if 1 <= score <= 10:
                return score, "\n".join(lines[:i]).strip()
            return None
    return None


def score_answer(
    question: str,
    answer: str,
    judge: EndpointProfile,
    gateway,
    *,
    context: str | None = None,
    params: CompletionParams = DEFAULT_JUDGE_PARAMS,
) -> Judgment:
    """Score one answer 1-10 with the judge endpoint.

    The score is parsed strictly from a final "SCORE: <n>" line; a missing
    or out-of-range score triggers exactly one re-ask before giving up with
    UnparsableJudgment.
    """
    if not answer:
        raise ValueError("answer must be non-empty")
    messages = judge_messages(question, answer, context)
    reply = gateway.chat_complete(judge, messages, params).text
    parsed = _parse_score(reply)
    if parsed is None:
        retry_messages = messages + [
            ChatTurn("assistant", reply),
            ChatTurn(
                "user",
                'Your reply did not end with a valid score line. Reply again, ending '
                'with a final line of exactly: SCORE: <integer from 1 to 10>',
            ),
        ]
        reply = gateway.chat_complete(judge, retry_messages, params).text
        parsed = _parse_score(reply)
        if parsed is None:
            raise UnparsableJudgment(f"judge reply had no valid SCORE line: {reply[:120]!r}")
    score, rationale = parsed
    return Judgment(score=score, rationale=rationale)


def aggregate_scores(records: list[JudgeRecord]) -> EvalReport:
    """Totals, means, and win/tie/loss counts over judged records."""
    total_a = sum(r.score_a for r in records)
    total_b = sum(r.score_b for r in records)
    n = len(records)
    wins_a = sum(1 for r in records if r.score_a > r.score_b)
    wins_b = sum(1 for r in records if r.score_b > r.score_a)
    per_question = [
        {
            "question_id": r.question_id,
            "question": r.question,
            "score_a": r.score_a,
            "score_b": r.score_b,
        }
        for r in records
    ]
    return EvalReport(
        n_questions=n,
        total_a=total_a,
        total_b=total_b,
        mean_a=total_a / n if n else 0.0,
        mean_b=total_b / n if n else 0.0,
        wins_a=wins_a,
        wins_b=wins_b,
        ties=n - wins_a - wins_b,
        per_question=per_question,
        judge_model=records[0].judge_model if records else "",
    )


def render_report_text(report: EvalReport) -> str:
    lines = [
        f"{'question':<10} {'model A':>8} {'model B':>8}",
        "-" * 28,
    ]
    for row in report.per_question:
        lines.append(f"{row['question_id']:<10} {row['score_a']:>8} {row['score_b']:>8}")
    lines.append("-" * 28)
    lines.append(f"{'TOTAL':<10} {report.total_a:>8} {report.total_b:>8}")
    lines.append(
        f"n={report.n_questions}  mean A={report.mean_a:.2f}  mean B={report.mean_b:.2f}  "
        f"A wins {report.wins_a}, B wins {report.wins_b}, ties {report.ties}"
    )
    if report.exclusions:
        lines.append(f"excluded from scoring: {len(report.exclusions)}")
        for note in report.exclusions:
            lines.append(f"  {note['question_id']} side {note['side']}: {note['error']}")
    return "\n".join(lines) + "\n"


def run_eval(
    index: CorpusIndex,
    n: int,
    seed: int,
    gateway,
    *,
    profile_a: EndpointProfile,
    profile_b: EndpointProfile,
    judge_profile: EndpointProfile,
    question_profile: EndpointProfile | None = None,
) -> EvalReport:
    """Full harness: sample questions, collect answers, judge, aggregate."""
    questions = sample_questions(
        index, n, gateway, question_profile or judge_profile, seed
    )
    by_id = {q.question_id: q for q in questions}
    collected = collect_answers(questions, profile_a, profile_b, gateway)
    records = []
    for pair in collected.pairs:
        question = by_id[pair.question_id]
        context = index.get_chunk(question.source_chunk_id).text
        judgment_a = score_answer(
            question.question, pair.answer_a, judge_profile, gateway, context=context
        )
        judgment_b = score_answer(
            question.question, pair.answer_b, judge_profile, gateway, context=context
        )
        records.append(
            JudgeRecord(
                question_id=pair.question_id,
                question=question.question,
                answer_a=pair.answer_a,
                answer_b=pair.answer_b,
                score_a=judgment_a.score,
                score_b=judgment_b.score,
                judge_model=judge_profile.model,
                rationale_a=judgment_a.rationale,
                rationale_b=judgment_b.rationale,
            )
        )
    report = aggregate_scores(records)
    report.exclusions = collected.exclusions
    logger.info(
        "eval complete: n=%d total_a=%d total_b=%d", report.n_questions, report.total_a, report.total_b
    )
    return report
