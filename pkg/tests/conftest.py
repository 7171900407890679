from __future__ import annotations

import shutil
from importlib import resources
from pathlib import Path

import pytest
from hypothesis import strategies as st

from ragforge.doc_ingest import Section, StructuredDocument
from ragforge.embed_index import Chunk, CorpusIndex, embed_and_index
from ragforge.gateway import StubGateway, stub_profile
from ragforge.qa_generator import GenMeta, QAEntry

TEI_NS = 'xmlns="http://www.tei-c.org/ns/1.0"'

EMPTY_BODY_TEI = f"""<?xml version="1.0"?>
<TEI {TEI_NS}>
  <teiHeader><fileDesc><titleStmt><title>Empty Sample</title></titleStmt></fileDesc></teiHeader>
  <text><body></body></text>
</TEI>
"""

TWO_SIBLINGS_TEI = f"""<?xml version="1.0"?>
<TEI {TEI_NS}>
  <teiHeader><fileDesc><titleStmt><title>Two Chapters</title></titleStmt></fileDesc></teiHeader>
  <text><body>
    <div><head>First Chapter</head><p>Opening paragraph of the first chapter.</p></div>
    <div><head>Second Chapter</head><p>Opening paragraph of the second chapter.</p></div>
  </body></text>
</TEI>
"""

ANXIETY_NESTED_TEI = f"""<?xml version="1.0"?>
<TEI {TEI_NS}>
  <teiHeader><fileDesc><titleStmt><title>Chapter Fixture</title></titleStmt></fileDesc></teiHeader>
  <text><body>
    <div>
      <head>Anxiety Disorders</head>
      <p>Chapter overview paragraph.</p>
      <div><head>Generalized Pattern</head><p>Criterion A synthetic text.</p><p>Criterion B synthetic text.</p></div>
      <div><head>Panic Pattern</head><p>Criterion A for the panic pattern.</p></div>
      <div><head>Phobic Pattern</head><p>Criterion A for the phobic pattern.</p></div>
    </div>
  </body></text>
</TEI>
"""

DEEP_NESTED_TEI = f"""<?xml version="1.0"?>
<TEI {TEI_NS}>
  <teiHeader><fileDesc><titleStmt><title>Deep Fixture</title></titleStmt></fileDesc></teiHeader>
  <text><body>
    <div>
      <head>Level One</head>
      <p>Top paragraph.</p>
      <div>
        <head>Level Two</head>
        <p>Middle paragraph.</p>
        <div><head>Level Three</head><p>Deep paragraph one.</p><p>Deep paragraph two.</p></div>
      </div>
    </div>
  </body></text>
</TEI>
"""

HEADINGLESS_MERGE_TEI = f"""<?xml version="1.0"?>
<TEI {TEI_NS}>
  <teiHeader><fileDesc><titleStmt><title>Anonymous Divs</title></titleStmt></fileDesc></teiHeader>
  <text><body>
    <div>
      <head>Host Chapter</head>
      <p>First paragraph.</p>
      <div><p>Merged paragraph from an anonymous div.</p></div>
      <div><head>Named Child</head><p>Child paragraph.</p></div>
    </div>
  </body></text>
</TEI>
"""

ALL_FIXTURE_TEIS = [
    EMPTY_BODY_TEI,
    TWO_SIBLINGS_TEI,
    ANXIETY_NESTED_TEI,
    DEEP_NESTED_TEI,
    HEADINGLESS_MERGE_TEI,
]


@pytest.fixture
def sample_data_dir(tmp_path: Path) -> Path:
    """Copy of the shipped sample config, corpus, and taxonomy."""
    data = resources.files("ragforge").joinpath("data")
    for name in ("sample_config.json", "sample_corpus.tei.xml", "dsm5_taxonomy.json"):
        shutil.copy(str(data / name), tmp_path / name)
    return tmp_path


def make_entry(
    instruction: str,
    output: str = "A sufficiently long synthetic answer for quality checks.",
    category: str = "Anxiety",
    status: str = "raw",
    source: tuple[str, ...] = ("chunk-1",),
) -> QAEntry:
    return QAEntry(
        instruction=instruction,
        output=output,
        category=category,
        source_chunk_ids=source,
        gen_meta=GenMeta(model="stub-generator", temperature=0.7, prompt_hash="h" * 64),
        status=status,
    )


def make_corpus(texts: list[str], embed_dim: int = 16) -> tuple[CorpusIndex, StubGateway]:
    """Corpus of one chunk per text, embedded with the deterministic stub."""
    gateway = StubGateway(embed_dim=embed_dim)
    chunks = [
        Chunk(
            chunk_id=f"doc#{i}#000",
            doc_id="doc",
            section_path=(i,),
            text=text,
            approx_tokens=len(text.split()),
        )
        for i, text in enumerate(texts)
    ]
    corpus = embed_and_index(chunks, gateway, stub_profile("embedder"))
    return corpus, gateway


# --- hypothesis strategies -------------------------------------------------

_WORD = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)
_NORMALIZED_TEXT = st.lists(_WORD, min_size=1, max_size=12).map(" ".join)


def sections(depth: int = 0) -> st.SearchStrategy[Section]:
    children = (
        st.lists(st.deferred(lambda: sections(depth + 1)), max_size=2)
        if depth < 2
        else st.just([])
    )
    return st.builds(
        Section,
        heading=_NORMALIZED_TEXT,
        level=st.just(depth + 1),
        paragraphs=st.lists(_NORMALIZED_TEXT, max_size=4),
        children=children,
    )


def _fix_levels(section: Section, level: int) -> Section:
    return Section(
        heading=section.heading,
        level=level,
        paragraphs=list(section.paragraphs),
        children=[_fix_levels(c, level + 1) for c in section.children],
    )


documents = st.builds(
    StructuredDocument,
    doc_id=st.text(alphabet="abcdef0123456789", min_size=1, max_size=16),
    title=st.one_of(st.just(""), _NORMALIZED_TEXT),
    sections=st.lists(sections(), max_size=3).map(
        lambda secs: [_fix_levels(s, 1) for s in secs]
    ),
)
