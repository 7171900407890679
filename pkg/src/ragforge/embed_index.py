"""Chunking and an exact flat cosine-similarity index with file persistence.

The index is a plain scan over unit-normalized float32 vectors: at corpus
sizes of one reference book, exactness is cheap and makes results fully
reproducible. Build first, then search; an index must not be mutated after
its first search if it is shared across threads.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .doc_ingest import Section, StructuredDocument
from .util import write_atomic


class DimensionMismatch(Exception):
    """Vector dimension or embedding model does not match the index."""


class DuplicateChunkId(Exception):
    pass


class EmptyIndex(Exception):
    pass


class CorruptIndexFile(Exception):
    """Index file failed magic, bounds, or checksum validation."""


@dataclass(frozen=True)
class ChunkPolicy:
    max_tokens: int = 256
    overlap_tokens: int = 32

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.overlap_tokens < 0:
            raise ValueError("overlap_tokens must be >= 0")
        if self.overlap_tokens >= self.max_tokens:
            raise ValueError("overlap_tokens must be smaller than max_tokens")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    section_path: tuple[int, ...]
    text: str
    approx_tokens: int


@dataclass(frozen=True)
class VectorRecord:
    chunk_id: str
    vector: tuple[float, ...]
    model_id: str


@dataclass(frozen=True)
class RetrievalResult:
    chunk_id: str
    similarity: float
    rank: int


def chunk_document(doc: StructuredDocument, policy: ChunkPolicy) -> list[Chunk]:
    """Split a document into chunks of whole paragraphs, grouped per section.

    A chunk never exceeds policy.max_tokens unless a single paragraph alone
    does, in which case that paragraph becomes its own oversize chunk rather
    than being split. Overlap carries trailing whole paragraphs (up to
    overlap_tokens) into the next chunk of the same section.
    """
    chunks: list[Chunk] = []

    def flush(window: list[str], path: tuple[int, ...], ordinal: int) -> int:
        if not window:
            return ordinal
        text = "\n\n".join(window)
        chunk_id = f"{doc.doc_id}#{'.'.join(map(str, path))}#{ordinal:03d}"
        chunks.append(
            Chunk(
                chunk_id=chunk_id,
                doc_id=doc.doc_id,
                section_path=path,
                text=text,
                approx_tokens=len(text.split()),
            )
        )
        return ordinal + 1

    def carry_overlap(window: list[str]) -> list[str]:
        if policy.overlap_tokens == 0:
            return []
        carried: list[str] = []
        total = 0
        for para in reversed(window):
            tokens = len(para.split())
            if total + tokens > policy.overlap_tokens:
                break
            carried.insert(0, para)
            total += tokens
        return carried

    def visit(section: Section, path: tuple[int, ...]) -> None:
        ordinal = 0
        window: list[str] = []
        window_tokens = 0
        for para in section.paragraphs:
            tokens = len(para.split())
            if tokens > policy.max_tokens:
                ordinal = flush(window, path, ordinal)
                ordinal = flush([para], path, ordinal)
                window, window_tokens = [], 0
                continue
            if window and window_tokens + tokens > policy.max_tokens:
                ordinal = flush(window, path, ordinal)
                window = carry_overlap(window)
                window_tokens = sum(len(p.split()) for p in window)
            window.append(para)
            window_tokens += tokens
        flush(window, path, ordinal)
        for i, child in enumerate(section.children):
            visit(child, path + (i,))

    for i, section in enumerate(doc.sections):
        visit(section, (i,))
    return chunks


_MAGIC = b"FVIX"
_VERSION = 1


class FlatIndex:
    """Exact top-k cosine search over unit-normalized vectors.

    Vectors are re-normalized to unit L2 on insert and stored as float32, so
    a save/load round trip reproduces search results bit-for-bit. Results are
    ordered by similarity descending with ties broken by ascending chunk_id.
    """

    def __init__(self, model_id: str | None = None) -> None:
        self.model_id = model_id
        self._ids: list[str] = []
        self._id_set: set[str] = set()
        self._rows: list[np.ndarray] = []
        self._dim: int | None = None
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def dim(self) -> int | None:
        return self._dim

    @property
    def chunk_ids(self) -> list[str]:
        return list(self._ids)

    def add_records(self, records: list[VectorRecord]) -> "FlatIndex":
        for record in records:
            vector = np.asarray(record.vector, dtype=np.float32)
            if vector.ndim != 1:
                raise DimensionMismatch("vector must be one-dimensional")
            if self._dim is None:
                self._dim = int(vector.shape[0])
            elif vector.shape[0] != self._dim:
                raise DimensionMismatch(
                    f"record {record.chunk_id!r} has dimension {vector.shape[0]}, "
                    f"index has {self._dim}"
                )
            if self.model_id is None:
                self.model_id = record.model_id
            elif record.model_id != self.model_id:
                raise DimensionMismatch(
                    f"record {record.chunk_id!r} embeds with model "
                    f"{record.model_id!r}, index holds {self.model_id!r}"
                )
            if record.chunk_id in self._id_set:
                raise DuplicateChunkId(record.chunk_id)
            norm = float(np.linalg.norm(vector))
            if norm == 0.0:
                raise ValueError(f"record {record.chunk_id!r} has a zero vector")
            self._ids.append(record.chunk_id)
            self._id_set.add(record.chunk_id)
            self._rows.append((vector / np.float32(norm)).astype(np.float32))
        self._matrix = None
        return self

    def _stack(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self._rows)
        return self._matrix

    def search_top_k(self, query, k: int) -> list[RetrievalResult]:
        if k <= 0:
            raise ValueError("k must be positive")
        if not self._ids:
            raise EmptyIndex("cannot search an empty index")
        vector = np.asarray(query, dtype=np.float32)
        if vector.ndim != 1 or vector.shape[0] != self._dim:
            raise DimensionMismatch(
                f"query has dimension {vector.shape}, index has {self._dim}"
            )
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise ValueError("query is a zero vector")
        vector = (vector / np.float32(norm)).astype(np.float32)
        sims = self._stack() @ vector
        order = np.lexsort((np.asarray(self._ids), -sims))[:k]
        return [
            RetrievalResult(
                chunk_id=self._ids[int(i)],
                similarity=max(-1.0, min(1.0, float(sims[int(i)]))),
                rank=rank,
            )
            for rank, i in enumerate(order, start=1)
        ]

    def save(self, path: str | Path) -> None:
        body = bytearray()
        body += _MAGIC
        model_bytes = (self.model_id or "").encode("utf-8")
        body += struct.pack("<IIII", _VERSION, self._dim or 0, len(self._ids), len(model_bytes))
        body += model_bytes
        for chunk_id, row in zip(self._ids, self._rows):
            id_bytes = chunk_id.encode("utf-8")
            body += struct.pack("<I", len(id_bytes))
            body += id_bytes
            body += row.astype("<f4").tobytes()
        body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        write_atomic(Path(path), bytes(body))

    @classmethod
    def load(cls, path: str | Path) -> "FlatIndex":
        raw = Path(path).read_bytes()
        if len(raw) < len(_MAGIC) + 16 + 4:
            raise CorruptIndexFile("file too short")
        if raw[: len(_MAGIC)] != _MAGIC:
            raise CorruptIndexFile("bad magic bytes")
        (stored_crc,) = struct.unpack("<I", raw[-4:])
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
            raise CorruptIndexFile("checksum mismatch")
        offset = len(_MAGIC)
        version, dim, count, model_len = struct.unpack_from("<IIII", raw, offset)
        offset += 16
        if version != _VERSION:
            raise CorruptIndexFile(f"unsupported version {version}")
        end = len(raw) - 4

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > end:
                raise CorruptIndexFile("truncated record data")
            data = raw[offset : offset + n]
            offset += n
            return data

        model_id = take(model_len).decode("utf-8") or None
        index = cls(model_id=model_id)
        index._dim = dim or None
        for _ in range(count):
            (id_len,) = struct.unpack("<I", take(4))
            chunk_id = take(id_len).decode("utf-8")
            row = np.frombuffer(take(dim * 4), dtype="<f4").copy()
            if chunk_id in index._id_set:
                raise CorruptIndexFile(f"duplicate chunk_id {chunk_id!r}")
            index._ids.append(chunk_id)
            index._id_set.add(chunk_id)
            index._rows.append(row)
        if offset != end:
            raise CorruptIndexFile("trailing bytes after last record")
        return index


def save_chunks_jsonl(chunks: list[Chunk], path: str | Path) -> None:
    lines = [
        json.dumps(
            {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "section_path": list(c.section_path),
                "text": c.text,
                "approx_tokens": c.approx_tokens,
            },
            ensure_ascii=False,
        )
        for c in chunks
    ]
    write_atomic(Path(path), ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def load_chunks_jsonl(path: str | Path) -> list[Chunk]:
    chunks = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        chunks.append(
            Chunk(
                chunk_id=obj["chunk_id"],
                doc_id=obj["doc_id"],
                section_path=tuple(obj["section_path"]),
                text=obj["text"],
                approx_tokens=obj["approx_tokens"],
            )
        )
    return chunks


@dataclass
class CorpusIndex:
    """A flat vector index paired with the chunk texts it was built from."""

    vectors: FlatIndex
    chunks: list[Chunk]
    _by_id: dict[str, Chunk] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {c.chunk_id: c for c in self.chunks}

    @property
    def size(self) -> int:
        return len(self.chunks)

    def get_chunk(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    @staticmethod
    def chunks_path_for(index_path: str | Path) -> Path:
        return Path(index_path).with_suffix(".chunks.jsonl")

    def save(self, index_path: str | Path) -> None:
        self.vectors.save(index_path)
        save_chunks_jsonl(self.chunks, self.chunks_path_for(index_path))

    @classmethod
    def load(cls, index_path: str | Path) -> "CorpusIndex":
        vectors = FlatIndex.load(index_path)
        chunks = load_chunks_jsonl(cls.chunks_path_for(index_path))
        by_id = {c.chunk_id for c in chunks}
        missing = [cid for cid in vectors.chunk_ids if cid not in by_id]
        if missing:
            raise CorruptIndexFile(f"index ids missing from chunk store: {missing[:3]}")
        return cls(vectors=vectors, chunks=chunks)


def embed_and_index(chunks: list[Chunk], gateway, profile) -> CorpusIndex:
    """Embed chunk texts through the gateway and build a sealed corpus index."""
    index = FlatIndex(model_id=profile.model)
    if chunks:
        vectors = gateway.embed_texts(profile, [c.text for c in chunks])
        index.add_records(
            [
                VectorRecord(chunk_id=c.chunk_id, vector=tuple(v), model_id=profile.model)
                for c, v in zip(chunks, vectors)
            ]
        )
    return CorpusIndex(vectors=index, chunks=chunks)
