"""Category-prompted QA generation grounded in retrieved chunks.

Each generation call renders the category prompt, retrieves supporting
chunks, asks the generator endpoint for a fixed number of pairs, and
extracts validated {instruction, output} objects from whatever JSON the
model managed to produce. Calls are stateless; the batch ordinal is folded
into the prompt so repeated calls ask for fresh material.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .doc_ingest import Section, StructuredDocument
from .embed_index import CorpusIndex, EmptyIndex
from .gateway import (
    ChatTurn,
    CompletionParams,
    DEFAULT_GENERATION_PARAMS,
    EndpointProfile,
    prompt_hash,
)
from .util import write_atomic


class UnboundTag(Exception):
    """A required template tag has no binding."""


class MalformedGeneration(Exception):
    """No valid {instruction, output} object could be extracted."""


class BudgetExhausted(Exception):
    """Retry budget ran out before the minimum batch size was reached."""

    def __init__(self, message: str, entries: list["QAEntry"]) -> None:
        super().__init__(message)
        self.entries = entries


ENTRY_STATUSES = ("raw", "deduped", "filtered", "accepted")

CATEGORY_TAG = "Disorder category"

CONDENSE_MARKER = "Rewrite it as one standalone question"
QA_FORMAT_MARKER = "question-and-answer format"

GROUNDING_SYSTEM = (
    "You are a meticulous domain assistant. Ground every answer strictly in "
    "the provided source context; do not introduce outside facts."
)


@dataclass(frozen=True)
class GenMeta:
    model: str
    temperature: float
    prompt_hash: str


@dataclass(frozen=True)
class QAEntry:
    instruction: str
    output: str
    category: str
    source_chunk_ids: tuple[str, ...]
    gen_meta: GenMeta
    status: str = "raw"

    def __post_init__(self) -> None:
        if self.status not in ENTRY_STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.status != "raw" and not (self.instruction and self.output):
            raise ValueError("instruction and output must be non-empty past raw status")


def advance_status(entry: QAEntry, status: str) -> QAEntry:
    """Move an entry forward along raw -> deduped -> filtered -> accepted."""
    if ENTRY_STATUSES.index(status) < ENTRY_STATUSES.index(entry.status):
        raise ValueError(f"cannot move status backward: {entry.status} -> {status}")
    return replace(entry, status=status)


def entry_to_dict(entry: QAEntry) -> dict:
    return {
        "instruction": entry.instruction,
        "output": entry.output,
        "category": entry.category,
        "source_chunk_ids": list(entry.source_chunk_ids),
        "gen_meta": {
            "model": entry.gen_meta.model,
            "temperature": entry.gen_meta.temperature,
            "prompt_hash": entry.gen_meta.prompt_hash,
        },
        "status": entry.status,
    }


def entry_from_dict(obj: dict) -> QAEntry:
    meta = obj["gen_meta"]
    return QAEntry(
        instruction=obj["instruction"],
        output=obj["output"],
        category=obj["category"],
        source_chunk_ids=tuple(obj["source_chunk_ids"]),
        gen_meta=GenMeta(
            model=meta["model"],
            temperature=meta["temperature"],
            prompt_hash=meta["prompt_hash"],
        ),
        status=obj["status"],
    )


def save_entries_jsonl(entries: list[QAEntry], path: str | Path) -> None:
    lines = [json.dumps(entry_to_dict(e), ensure_ascii=False) for e in entries]
    write_atomic(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def load_entries_jsonl(path: str | Path) -> list[QAEntry]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(entry_from_dict(json.loads(line)))
    return entries


@dataclass(frozen=True)
class PromptTemplate:
    text: str
    required_tags: frozenset[str] = frozenset({CATEGORY_TAG})


def load_template(path: str | Path, required_tags: frozenset[str] | None = None) -> PromptTemplate:
    return PromptTemplate(
        text=Path(path).read_text(encoding="utf-8").strip(),
        required_tags=required_tags if required_tags is not None else frozenset({CATEGORY_TAG}),
    )


def default_template() -> PromptTemplate:
    text = resources.files("ragforge").joinpath("data/qa_prompt.txt").read_text("utf-8")
    return PromptTemplate(text=text.strip())


def render_template(template: PromptTemplate, bindings: dict[str, str]) -> str:
    missing = sorted(template.required_tags - bindings.keys())
    if missing:
        raise UnboundTag(f"no binding for required tag(s): {missing}")
    text = template.text
    for tag in template.required_tags:
        text = text.replace("{" + tag + "}", bindings[tag])
    return text


def render_category_prompt(template: PromptTemplate, category: str) -> str:
    """Bind the category name into the template's category tag."""
    if not category:
        raise ValueError("category must be non-empty")
    return render_template(template, {CATEGORY_TAG: category})


def condense_query(
    history: list[ChatTurn],
    new_query: str,
    gateway,
    profile: EndpointProfile,
    params: CompletionParams = DEFAULT_GENERATION_PARAMS,
) -> str:
    """Collapse chat history plus a follow-up into one standalone query.

    With no history the query is already standalone and is returned without
    any endpoint call.
    """
    if not history:
        return new_query
    messages = [
        ChatTurn(
            "system",
            "Rewrite the user's follow-up as a single standalone question that "
            "needs none of the preceding conversation to be understood.",
        ),
        *history,
        ChatTurn(
            "user",
            f"Follow-up question: {new_query}\n{CONDENSE_MARKER}. "
            "Reply with only the rewritten question.",
        ),
    ]
    return gateway.chat_complete(profile, messages, params).text.strip()


@dataclass(frozen=True)
class RetrievedContext:
    context_text: str
    chunk_ids: tuple[str, ...]


def retrieve_context(
    index: CorpusIndex,
    query: str,
    k: int,
    gateway,
    embed_profile: EndpointProfile,
) -> RetrievedContext:
    """Embed the query and concatenate the top-k chunk texts in rank order."""
    if index.size == 0:
        raise EmptyIndex("corpus index holds no chunks")
    vector = gateway.embed_texts(embed_profile, [query])[0]
    results = index.vectors.search_top_k(vector, k)
    pieces = []
    ids = []
    for result in results:
        chunk = index.get_chunk(result.chunk_id)
        path = ".".join(map(str, chunk.section_path))
        pieces.append(f"[source {result.rank} | section {path}]\n{chunk.text}")
        ids.append(chunk.chunk_id)
    return RetrievedContext(context_text="\n\n".join(pieces), chunk_ids=tuple(ids))


_decoder = json.JSONDecoder()


def _collect_qa(value: object, found: list[dict]) -> None:
    if isinstance(value, dict):
        instruction = value.get("instruction")
        output = value.get("output")
        if (
            isinstance(instruction, str)
            and instruction.strip()
            and isinstance(output, str)
            and output.strip()
        ):
            found.append({"instruction": instruction, "output": output})
            return
        for nested in value.values():
            _collect_qa(nested, found)
    elif isinstance(value, list):
        for item in value:
            _collect_qa(item, found)


def extract_qa_objects(response_text: str) -> list[dict]:
    """Pull every {instruction, output} object out of free-form model text.

    Scans for embedded JSON values (bare, fenced, or inside arrays), keeps
    objects whose "instruction" and "output" fields are non-empty strings,
    ignores extra keys, and preserves order of appearance. Raises
    MalformedGeneration when nothing valid is found.
    """
    found: list[dict] = []
    i = 0
    n = len(response_text)
    while i < n:
        if response_text[i] not in "{[":
            i += 1
            continue
        try:
            value, end = _decoder.raw_decode(response_text, i)
        except ValueError:
            i += 1
            continue
        _collect_qa(value, found)
        i = end
    if not found:
        raise MalformedGeneration("no valid {instruction, output} objects in response")
    return found


def generation_messages(
    rendered_prompt: str, context_text: str, ask_count: int, batch_no: int
) -> list[ChatTurn]:
    system = f"{GROUNDING_SYSTEM}\n\nSource context:\n{context_text}"
    user = (
        f"{rendered_prompt}\n\n"
        f"Return exactly {ask_count} question-and-answer pairs as a JSON array. "
        f"This is batch {batch_no}; produce pairs not covered by earlier batches."
    )
    return [ChatTurn("system", system), ChatTurn("user", user)]


def generate_category_batch(
    category: str,
    target: tuple[int, int],
    index: CorpusIndex,
    gateway,
    profile: EndpointProfile,
    embed_profile: EndpointProfile,
    *,
    retry_budget: int = 30,
    ask_count: int = 10,
    k: int = 4,
    params: CompletionParams = DEFAULT_GENERATION_PARAMS,
    template: PromptTemplate | None = None,
    retrieval_query: str | None = None,
) -> list[QAEntry]:
    """Accumulate raw entries for one category until the minimum is reached.

    Every extraction failure consumes one unit of retry budget; successful
    calls are free. Raises BudgetExhausted (carrying the partial batch) if
    the budget runs out first. Never returns more than target[1] entries.
    """
    lo, hi = target
    if retry_budget < 1:
        raise ValueError("retry_budget must be >= 1")
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid target range ({lo}, {hi})")
    template = template or default_template()
    rendered = render_category_prompt(template, category)
    query = retrieval_query or category

    entries: list[QAEntry] = []
    budget = retry_budget
    batch_no = 0
    while len(entries) < lo:
        batch_no += 1
        context = retrieve_context(index, query, k, gateway, embed_profile)
        messages = generation_messages(rendered, context.context_text, ask_count, batch_no)
        digest = prompt_hash(messages)
        completion = gateway.chat_complete(profile, messages, params)
        try:
            objects = extract_qa_objects(completion.text)
        except MalformedGeneration:
            budget -= 1
            if budget <= 0:
                raise BudgetExhausted(
                    f"category {category!r}: retry budget exhausted with "
                    f"{len(entries)} of {lo} entries",
                    entries,
                )
            continue
        meta = GenMeta(model=profile.model, temperature=params.temperature, prompt_hash=digest)
        for obj in objects:
            if len(entries) >= hi:
                break
            entries.append(
                QAEntry(
                    instruction=obj["instruction"],
                    output=obj["output"],
                    category=category,
                    source_chunk_ids=context.chunk_ids,
                    gen_meta=meta,
                )
            )
    return entries


def build_retrieval_query(
    doc: StructuredDocument, category: str, toc_headings: tuple[str, ...]
) -> str:
    """Retrieval text for a category: its chapter heading plus the chapter's
    first paragraph. An empty toc_headings means the whole document (title
    plus leading paragraph)."""
    if not toc_headings:
        first = _first_paragraph(doc.sections)
        base = doc.title or category
        return f"{base} {first}".strip()
    wanted = {h.casefold() for h in toc_headings}
    for section in doc.sections:
        if section.heading.casefold() in wanted:
            first = _first_paragraph([section])
            return f"{section.heading} {first}".strip()
    return category


def _first_paragraph(sections: list[Section]) -> str:
    for section in sections:
        if section.paragraphs:
            return section.paragraphs[0]
        nested = _first_paragraph(section.children)
        if nested:
            return nested
    return ""
