"""Parse TEI XML into a canonical section tree and serialize it as structured JSON.

The document model is deliberately small: a document is a title plus an
ordered tree of sections, each holding whitespace-normalized paragraphs.
Figures, tables, references and other non-prose TEI content are dropped.
"""

from __future__ import annotations

import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field


class MalformedXml(Exception):
    """Input bytes are not well-formed XML."""


class SchemaViolation(Exception):
    """Structured-JSON input does not conform to the canonical schema."""


@dataclass
class Section:
    heading: str
    level: int
    paragraphs: list[str] = field(default_factory=list)
    children: list["Section"] = field(default_factory=list)


@dataclass
class StructuredDocument:
    doc_id: str
    title: str
    sections: list[Section] = field(default_factory=list)


@dataclass(frozen=True)
class TocEntry:
    heading: str
    section_path: tuple[int, ...]


def _normalize(text: str) -> str:
    return " ".join(text.split())


def _local(tag: str) -> str:
    """Local element name, ignoring any XML namespace."""
    return tag.rsplit("}", 1)[-1]


def _element_text(el: ET.Element) -> str:
    return _normalize("".join(el.itertext()))


def _find_first(root: ET.Element, *names: str) -> ET.Element | None:
    """First descendant reached by following `names` one local-name at a time."""
    current = root
    for name in names:
        found = None
        for el in current.iter():
            if el is not current and _local(el.tag) == name:
                found = el
                break
        if found is None:
            return None
        current = found
    return current


class _TreeBuilder:
    """Accumulates sections while walking TEI div/p structure in source order.

    Paragraphs always attach to the most recent section in document order so
    that concatenated paragraph text preserves source order even when GROBID
    emits anonymous (headingless) divs. Text seen before any heading is held
    back and prepended to the first section.
    """

    def __init__(self) -> None:
        self.top: list[Section] = []
        self._last: Section | None = None
        self._preamble: list[str] = []

    def walk(self, container: ET.Element, parent: Section | None, level: int) -> None:
        for child in container:
            name = _local(child.tag)
            if name == "div":
                heading = self._div_heading(child)
                if heading:
                    section = Section(heading=heading, level=level)
                    if self._preamble:
                        section.paragraphs.extend(self._preamble)
                        self._preamble.clear()
                    if parent is None:
                        self.top.append(section)
                    else:
                        parent.children.append(section)
                    self._last = section
                    self.walk(child, section, level + 1)
                else:
                    # Anonymous div: merge content into the enclosing section,
                    # promoting any headed children one level up.
                    self.walk(child, parent, level)
            elif name == "p":
                text = _element_text(child)
                if not text:
                    continue
                if self._last is not None:
                    self._last.paragraphs.append(text)
                else:
                    self._preamble.append(text)
            # head is consumed by _div_heading; figures, tables, notes,
            # references and anything else carry no criteria prose.

    @staticmethod
    def _div_heading(div: ET.Element) -> str:
        for child in div:
            if _local(child.tag) == "head":
                return _element_text(child)
        return ""


def parse_tei(xml_bytes: bytes) -> StructuredDocument:
    """Parse TEI bytes into a StructuredDocument.

    One section per `div` carrying a non-empty `head`; div nesting becomes
    section nesting. An empty or missing body yields zero sections. Raises
    MalformedXml if the input is not well-formed XML.
    """
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        raise MalformedXml(f"input is not well-formed XML: {exc}") from exc

    title_el = _find_first(root, "teiHeader", "titleStmt", "title")
    title = _element_text(title_el) if title_el is not None else ""

    doc_id = "tei-" + hashlib.sha256(xml_bytes).hexdigest()[:16]

    body = _find_first(root, "body")
    builder = _TreeBuilder()
    if body is not None:
        builder.walk(body, None, 1)
    return StructuredDocument(doc_id=doc_id, title=title, sections=builder.top)


def _section_to_obj(section: Section) -> dict:
    return {
        "heading": section.heading,
        "level": section.level,
        "paragraphs": list(section.paragraphs),
        "children": [_section_to_obj(c) for c in section.children],
    }


def serialize_structured(doc: StructuredDocument) -> bytes:
    """Canonical UTF-8 JSON bytes for `doc`; inverse of load_structured."""
    obj = {
        "doc_id": doc.doc_id,
        "title": doc.title,
        "sections": [_section_to_obj(s) for s in doc.sections],
    }
    return (json.dumps(obj, ensure_ascii=False, indent=2) + "\n").encode("utf-8")


_SECTION_KEYS = {"heading", "level", "paragraphs", "children"}


def _require_str(obj: dict, key: str, where: str, allow_empty: bool = True) -> str:
    if key not in obj:
        raise SchemaViolation(f"{where}: missing required field '{key}'")
    value = obj[key]
    if not isinstance(value, str):
        raise SchemaViolation(f"{where}: field '{key}' must be a string")
    if not allow_empty and not value:
        raise SchemaViolation(f"{where}: field '{key}' must be non-empty")
    return value


def _section_from_obj(obj: object, depth: int, where: str) -> Section:
    if not isinstance(obj, dict):
        raise SchemaViolation(f"{where}: section must be an object")
    unknown = set(obj) - _SECTION_KEYS
    if unknown:
        raise SchemaViolation(f"{where}: unknown field(s) {sorted(unknown)}")
    heading = _require_str(obj, "heading", where, allow_empty=False)
    if heading != _normalize(heading):
        raise SchemaViolation(f"{where}: heading is not whitespace-normalized")
    level = obj.get("level")
    if not isinstance(level, int) or isinstance(level, bool):
        raise SchemaViolation(f"{where}: field 'level' must be an integer")
    if level != depth:
        raise SchemaViolation(f"{where}: level {level} does not match tree depth {depth}")
    paragraphs = obj.get("paragraphs")
    if not isinstance(paragraphs, list):
        raise SchemaViolation(f"{where}: field 'paragraphs' must be a list")
    for i, para in enumerate(paragraphs):
        if not isinstance(para, str) or not para:
            raise SchemaViolation(f"{where}.paragraphs[{i}]: must be a non-empty string")
        if para != _normalize(para):
            raise SchemaViolation(f"{where}.paragraphs[{i}]: not whitespace-normalized")
    children_obj = obj.get("children")
    if not isinstance(children_obj, list):
        raise SchemaViolation(f"{where}: field 'children' must be a list")
    children = [
        _section_from_obj(c, depth + 1, f"{where}.children[{i}]")
        for i, c in enumerate(children_obj)
    ]
    return Section(heading=heading, level=level, paragraphs=list(paragraphs), children=children)


def load_structured(raw: bytes) -> StructuredDocument:
    """Parse canonical structured-JSON bytes, validating the schema strictly."""
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolation(f"input is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaViolation("top-level value must be an object")
    unknown = set(obj) - {"doc_id", "title", "sections"}
    if unknown:
        raise SchemaViolation(f"unknown top-level field(s) {sorted(unknown)}")
    doc_id = _require_str(obj, "doc_id", "document", allow_empty=False)
    title = _require_str(obj, "title", "document")
    sections_obj = obj.get("sections")
    if not isinstance(sections_obj, list):
        raise SchemaViolation("document: field 'sections' must be a list")
    sections = [
        _section_from_obj(s, 1, f"sections[{i}]") for i, s in enumerate(sections_obj)
    ]
    return StructuredDocument(doc_id=doc_id, title=title, sections=sections)


def table_of_contents(doc: StructuredDocument, max_level: int) -> list[TocEntry]:
    """Pre-order TOC of sections with level <= max_level."""
    if max_level < 1:
        raise ValueError("max_level must be >= 1")
    entries: list[TocEntry] = []

    def visit(sections: list[Section], path: tuple[int, ...]) -> None:
        for i, section in enumerate(sections):
            section_path = path + (i,)
            if section.level <= max_level:
                entries.append(TocEntry(heading=section.heading, section_path=section_path))
                visit(section.children, section_path)

    visit(doc.sections, ())
    return entries


def resolve_section(doc: StructuredDocument, section_path: tuple[int, ...]) -> Section:
    """Section addressed by a TocEntry path; raises IndexError for bad paths."""
    sections = doc.sections
    section: Section | None = None
    for idx in section_path:
        section = sections[idx]
        sections = section.children
    if section is None:
        raise IndexError("empty section path")
    return section
