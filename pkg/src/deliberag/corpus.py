"""Manifest loading, chunking and persistence of the document corpus."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import (
    CorpusFileError,
    DuplicateDocId,
    EmptyDocument,
    ManifestNotFound,
    ManifestParseError,
    MissingCategory,
    UnknownCategory,
    UnreadableDocument,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
_PARAGRAPH_SEP = re.compile(r"\n[ \t]*\n\s*")


class Category(str, enum.Enum):
    REGULATORY = "regulatory"
    SAFETY = "safety"

    @classmethod
    def parse(cls, raw: str) -> "Category":
        try:
            return cls(str(raw).strip().lower())
        except ValueError:
            raise UnknownCategory(f"unknown category {raw!r}; expected 'regulatory' or 'safety'") from None


class SplitPreference(str, enum.Enum):
    PARAGRAPH = "paragraph"
    HARD_CUT = "hardcut"


@dataclass(frozen=True)
class ChunkPolicy:
    target_chars: int = 1600
    overlap_chars: int = 200
    split_preference: SplitPreference = SplitPreference.PARAGRAPH

    def __post_init__(self):
        if self.target_chars <= 0:
            raise ValueError("target_chars must be positive")
        if not 0 <= self.overlap_chars < self.target_chars:
            raise ValueError("overlap_chars must satisfy 0 <= overlap < target_chars")
        object.__setattr__(self, "split_preference", SplitPreference(self.split_preference))


@dataclass(frozen=True)
class DocumentMeta:
    doc_id: str
    title: str
    category: Category
    agency: str
    path: str


@dataclass(frozen=True)
class DocumentChunk:
    chunk_id: str
    doc_id: str
    section_label: str
    text: str
    category: Category
    char_span: tuple[int, int]

    @property
    def ordinal(self) -> int:
        return parse_chunk_id(self.chunk_id)[1]


@dataclass
class Corpus:
    documents: list[DocumentMeta]
    chunks: list[DocumentChunk] = field(default_factory=list)
    chunk_policy: ChunkPolicy | None = None
    texts: dict[str, str] = field(default_factory=dict, repr=False)
    manifest_path: str = ""

    def chunk(self, chunk_id: str) -> DocumentChunk:
        try:
            return self._chunk_map[chunk_id]
        except AttributeError:
            self._chunk_map = {c.chunk_id: c for c in self.chunks}
            return self._chunk_map[chunk_id]

    def categories(self) -> set[Category]:
        return {d.category for d in self.documents}

    def require_categories(self, needed) -> None:
        missing = set(needed) - self.categories()
        if missing:
            names = ", ".join(sorted(c.value for c in missing))
            raise MissingCategory(f"corpus has no documents in category: {names}")

    def content_hash(self) -> str:
        """sha256 over document metadata and texts, in manifest order."""
        h = hashlib.sha256()
        for d in self.documents:
            h.update(json.dumps([d.doc_id, d.title, d.category.value, d.agency], ensure_ascii=False).encode())
            h.update(b"\0")
            h.update(self.texts.get(d.doc_id, "").encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()


def parse_chunk_id(chunk_id: str) -> tuple[str, int]:
    doc_id, sep, ordinal = chunk_id.rpartition("#")
    if not sep or not doc_id or not ordinal.isdigit():
        raise ValueError(f"malformed chunk id {chunk_id!r}")
    return doc_id, int(ordinal)


def load_manifest(path, stale_after_days: float | None = None) -> Corpus:
    """Read a JSON manifest and the plain-text documents it lists.

    Paths inside the manifest are resolved against the manifest's directory.
    When ``stale_after_days`` is set, a warning is logged if the manifest file
    has not been modified within that many days.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFound(f"manifest not found: {path}")
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise ManifestParseError(f"{path}: top level must be an array of document records")

    if stale_after_days is not None:
        age_days = (time.time() - path.stat().st_mtime) / 86400.0
        if age_days > stale_after_days:
            log.warning("manifest %s is %.1f days old; corpus may be stale", path, age_days)

    documents: list[DocumentMeta] = []
    texts: dict[str, str] = {}
    base = path.parent
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise ManifestParseError(f"{path}: record {i}: expected an object")
        for key in ("doc_id", "title", "category", "agency", "path"):
            if key not in rec:
                raise ManifestParseError(f"{path}: record {i}: missing field {key!r}")
            if not isinstance(rec[key], str):
                raise ManifestParseError(f"{path}: record {i}: field {key!r} must be a string")
        doc_id = rec["doc_id"]
        if not doc_id:
            raise ManifestParseError(f"{path}: record {i}: field 'doc_id' is empty")
        if doc_id in texts:
            raise DuplicateDocId(f"{path}: record {i}: duplicate doc_id {doc_id!r}")
        category = Category.parse(rec["category"])
        doc_path = (base / rec["path"]).resolve()
        try:
            texts[doc_id] = doc_path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise UnreadableDocument(f"{doc_id}: cannot read {doc_path}: {exc}") from exc
        documents.append(DocumentMeta(doc_id, rec["title"], category, rec["agency"], str(doc_path)))

    return Corpus(documents=documents, texts=texts, manifest_path=str(path))


def _paragraph_spans(text: str) -> list[tuple[int, int]]:
    spans = []
    start = 0
    for m in _PARAGRAPH_SEP.finditer(text):
        if m.start() > start:
            spans.append((start, m.start()))
        start = m.end()
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def _section_label(paragraphs: list[tuple[int, int]], start: int, end: int) -> str:
    for n, (ps, pe) in enumerate(paragraphs, 1):
        if pe > start and ps < end:
            return f"Paragraph {n}"
    # chunk made only of separator whitespace: label by the paragraph before it
    n = sum(1 for ps, _ in paragraphs if ps < start)
    return f"Paragraph {max(n, 1)}"


def _cut_points(text: str, policy: ChunkPolicy) -> list[tuple[int, int]]:
    n = len(text)
    target, overlap = policy.target_chars, policy.overlap_chars
    boundaries = [m.end() for m in _PARAGRAPH_SEP.finditer(text)]
    spans = []
    start = 0
    while True:
        if n - start <= target:
            spans.append((start, n))
            return spans
        end = start + target
        if policy.split_preference is SplitPreference.PARAGRAPH:
            # progress requires end - overlap > start
            candidates = [b for b in boundaries if start + overlap < b <= end and text[start:b].strip()]
            if candidates:
                end = candidates[-1]
        spans.append((start, end))
        start = end - overlap


def chunk_document(doc: DocumentMeta, text: str, policy: ChunkPolicy | None = None) -> list[DocumentChunk]:
    policy = policy or ChunkPolicy()
    if not text or not text.strip():
        raise EmptyDocument(f"document {doc.doc_id!r} is empty")
    paragraphs = _paragraph_spans(text)
    return [
        DocumentChunk(
            chunk_id=f"{doc.doc_id}#{i}",
            doc_id=doc.doc_id,
            section_label=_section_label(paragraphs, s, e),
            text=text[s:e],
            category=doc.category,
            char_span=(s, e),
        )
        for i, (s, e) in enumerate(_cut_points(text, policy))
    ]


def chunk_corpus(corpus: Corpus, policy: ChunkPolicy | None = None) -> Corpus:
    policy = policy or ChunkPolicy()
    chunks: list[DocumentChunk] = []
    for doc in corpus.documents:
        try:
            chunks.extend(chunk_document(doc, corpus.texts.get(doc.doc_id, ""), policy))
        except EmptyDocument as exc:
            raise EmptyDocument(f"cannot chunk corpus: {exc}") from exc
    return replace(corpus, chunks=chunks, chunk_policy=policy)


# persistence


def corpus_to_dict(corpus: Corpus) -> dict:
    policy = corpus.chunk_policy or ChunkPolicy()
    return {
        "schema_version": SCHEMA_VERSION,
        "manifest_path": corpus.manifest_path,
        "content_hash": corpus.content_hash(),
        "chunk_policy": {
            "target_chars": policy.target_chars,
            "overlap_chars": policy.overlap_chars,
            "split_preference": policy.split_preference.value,
        },
        "documents": [
            {
                "doc_id": d.doc_id,
                "title": d.title,
                "category": d.category.value,
                "agency": d.agency,
                "path": d.path,
                "text": corpus.texts.get(d.doc_id, ""),
            }
            for d in corpus.documents
        ],
        "chunks": [
            {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "section_label": c.section_label,
                "category": c.category.value,
                "char_span": list(c.char_span),
                "text": c.text,
            }
            for c in corpus.chunks
        ],
    }


def corpus_from_dict(data: dict) -> Corpus:
    if not isinstance(data, dict) or data.get("schema_version") != SCHEMA_VERSION:
        raise CorpusFileError("corpus file: unsupported or missing schema_version")
    try:
        cp = data["chunk_policy"]
        policy = ChunkPolicy(cp["target_chars"], cp["overlap_chars"], SplitPreference(cp["split_preference"]))
        documents = [
            DocumentMeta(d["doc_id"], d["title"], Category.parse(d["category"]), d["agency"], d["path"])
            for d in data["documents"]
        ]
        texts = {d["doc_id"]: d["text"] for d in data["documents"]}
        chunks = [
            DocumentChunk(
                c["chunk_id"], c["doc_id"], c["section_label"], c["text"],
                Category.parse(c["category"]), (int(c["char_span"][0]), int(c["char_span"][1])),
            )
            for c in data["chunks"]
        ]
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CorpusFileError(f"corpus file: malformed content: {exc}") from exc
    return Corpus(documents, chunks, policy, texts, data.get("manifest_path", ""))


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(json.dumps(corpus_to_dict(corpus), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_corpus(path) -> Corpus:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusFileError(f"cannot read corpus file {path}: {exc}") from exc
    return corpus_from_dict(data)
