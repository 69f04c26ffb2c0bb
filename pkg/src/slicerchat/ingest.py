"""Corpus ingestion: repository scanning, Q&A loading, scene extraction, chunking.

Everything here is pure or read-only filesystem traversal, so the functions
are safe to call concurrently.
"""

from __future__ import annotations

import bisect
import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

logger = logging.getLogger(__name__)

# A token is a maximal run of word characters (Unicode letters, digits,
# underscore) or a single other non-whitespace character.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class SourceKind(str, Enum):
    """The five knowledge sources a document or chunk can belong to."""

    PYTHON_CODE = "python"
    MARKDOWN_DOC = "markdown"
    DISCOURSE_QA = "discourse"
    SCENE_STATE = "scene"
    CONVERSATION_TURN = "conversation"


class ChunkingMode(str, Enum):
    TOKEN_ONLY = "token"
    STRUCTURE_AWARE = "structure"


@dataclass
class Document:
    id: str
    kind: SourceKind
    origin: str
    text: str
    line_count: int


@dataclass
class QAPair:
    question: str
    answer: str
    origin: str = ""
    author: str | None = None


@dataclass
class SceneSummary:
    """High-level listing of the objects in a scene: type, id and name per node."""

    nodes: list[dict[str, str]]
    count: int

    def to_json(self) -> str:
        """Canonical JSON: sorted keys, no whitespace, stable across runs."""
        return json.dumps(
            {"count": self.count, "nodes": self.nodes},
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class ChunkingPolicy:
    max_tokens: int = 200
    overlap: int = 50
    mode: ChunkingMode = ChunkingMode.TOKEN_ONLY

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.overlap < 0:
            raise ValueError(f"overlap must be non-negative, got {self.overlap}")
        if self.overlap >= self.max_tokens:
            raise ValueError(
                f"overlap ({self.overlap}) must be smaller than max_tokens ({self.max_tokens})"
            )


@dataclass
class Chunk:
    doc_id: str
    seq: int
    text: str
    token_start: int
    token_end: int
    kind: SourceKind


@dataclass
class ScanResult:
    documents: list[Document]
    skipped: list[str]


def tokenize(text: str) -> list[str]:
    """Split text into tokens; whitespace delimits and is never part of a token."""
    return _TOKEN_RE.findall(text)


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character (start, end) span of every token, in order."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def count_tokens(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def count_lines(text: str) -> int:
    """Number of newline-separated lines; empty text has no lines."""
    return text.count("\n") + 1 if text else 0


_KIND_BY_SUFFIX = {".py": SourceKind.PYTHON_CODE, ".md": SourceKind.MARKDOWN_DOC}


def scan_repository(root: str | Path, extensions: list[str] | None = None) -> ScanResult:
    """Collect one Document per matching file under root.

    Matching is case-insensitive on the file name suffix. Documents come back
    sorted lexicographically by origin (the path relative to root, with "/"
    separators) regardless of filesystem iteration order. Files that cannot be
    read or are not valid UTF-8 are skipped and listed in the result.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"repository root not found: {root}")
    if extensions is None:
        extensions = [".py", ".md"]
    suffixes = [e.lower() if e.startswith(".") else "." + e.lower() for e in extensions]

    documents: list[Document] = []
    skipped: list[str] = []
    for path in root.rglob("*"):
        if not path.is_file():
            continue
        name = path.name.lower()
        matched = next((s for s in suffixes if name.endswith(s)), None)
        if matched is None:
            continue
        origin = path.relative_to(root).as_posix()
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            skipped.append(origin)
            continue
        except OSError as exc:
            logger.warning("skipping unreadable file %s: %s", origin, exc)
            skipped.append(origin)
            continue
        kind = _KIND_BY_SUFFIX.get(matched, SourceKind.MARKDOWN_DOC)
        documents.append(
            Document(id=origin, kind=kind, origin=origin, text=text, line_count=count_lines(text))
        )

    documents.sort(key=lambda d: d.origin)
    skipped.sort()
    return ScanResult(documents=documents, skipped=skipped)


def load_qa_dataset(path: str | Path) -> list[QAPair]:
    """Load question/answer pairs from a JSON-lines file, preserving order.

    Each line is an object with keys question and answer plus optional origin
    and author. Blank lines are ignored. A malformed line or an empty question
    or answer raises ValueError naming the line number.
    """
    path = Path(path)
    pairs: list[QAPair] = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}: line {lineno}: expected a JSON object")
            question = obj.get("question")
            answer = obj.get("answer")
            if not isinstance(question, str) or not question:
                raise ValueError(f"{path}: line {lineno}: question missing or empty")
            if not isinstance(answer, str) or not answer:
                raise ValueError(f"{path}: line {lineno}: answer missing or empty")
            pairs.append(
                QAPair(
                    question=question,
                    answer=answer,
                    origin=str(obj.get("origin", "")),
                    author=obj.get("author"),
                )
            )
    logger.info("loaded %d Q&A pairs from %s", len(pairs), path)
    return pairs


def extract_scene_summary(xml_text: str) -> SceneSummary:
    """Summarize a scene XML string: one node per direct child of the root.

    Each node records the element tag as its type plus the id and name
    attributes (empty string when absent), in document order.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise ValueError(f"malformed scene XML: {exc}") from exc
    nodes = [
        {"type": child.tag, "id": child.get("id", ""), "name": child.get("name", "")}
        for child in root
    ]
    return SceneSummary(nodes=nodes, count=len(nodes))


def _stride_ranges(start: int, end: int, policy: ChunkingPolicy) -> list[tuple[int, int]]:
    stride = policy.max_tokens - policy.overlap
    ranges = []
    i = 0
    while start + i * stride < end:
        a = start + i * stride
        ranges.append((a, min(a + policy.max_tokens, end)))
        i += 1
    return ranges


def _is_boundary_line(line: str, kind: SourceKind) -> bool:
    if kind == SourceKind.MARKDOWN_DOC:
        return line.startswith("#")
    if kind == SourceKind.PYTHON_CODE:
        return line.startswith("def ") or line.startswith("class ")
    return False


def _segment_ranges(doc: Document, spans: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Token ranges between structural boundary lines, empties dropped."""
    cut_chars = []
    pos = 0
    for line in doc.text.split("\n"):
        if _is_boundary_line(line, doc.kind):
            cut_chars.append(pos)
        pos += len(line) + 1

    starts = [s for s, _ in spans]
    cut_tokens = sorted({0, len(spans)} | {bisect.bisect_left(starts, c) for c in cut_chars})
    ranges = list(zip(cut_tokens, cut_tokens[1:]))
    return [(a, b) for a, b in ranges if b > a]


def _merge_segments(
    segments: list[tuple[int, int]], max_tokens: int
) -> list[tuple[int, int]]:
    """Greedily extend each group with following segments while it stays within max_tokens."""
    merged: list[tuple[int, int]] = []
    cur: tuple[int, int] | None = None
    for a, b in segments:
        if cur is None:
            cur = (a, b)
        elif b - cur[0] <= max_tokens:
            cur = (cur[0], b)
        else:
            merged.append(cur)
            cur = (a, b)
    if cur is not None:
        merged.append(cur)
    return merged


def chunk_document(doc: Document, policy: ChunkingPolicy) -> list[Chunk]:
    """Split a document into token-bounded chunks.

    TokenOnly mode slides a fixed window of max_tokens with stride
    max_tokens - overlap. StructureAware mode first splits at structural
    boundaries ("#" lines for Markdown, column-0 "def "/"class " lines for
    Python code), greedily merges adjacent segments up to max_tokens, and
    falls back to the sliding window inside any oversized segment. Chunk text
    is the minimal substring of the document spanning the chunk's tokens.
    """
    spans = token_spans(doc.text)
    if not spans:
        return []

    if policy.mode == ChunkingMode.STRUCTURE_AWARE:
        ranges: list[tuple[int, int]] = []
        for a, b in _merge_segments(_segment_ranges(doc, spans), policy.max_tokens):
            if b - a <= policy.max_tokens:
                ranges.append((a, b))
            else:
                ranges.extend(_stride_ranges(a, b, policy))
    else:
        ranges = _stride_ranges(0, len(spans), policy)

    chunks = []
    for seq, (a, b) in enumerate(ranges):
        text = doc.text[spans[a][0] : spans[b - 1][1]]
        chunks.append(
            Chunk(
                doc_id=doc.id,
                seq=seq,
                text=text,
                token_start=a,
                token_end=b,
                kind=doc.kind,
            )
        )
    return chunks


def chunk_qa_pair(qa: QAPair) -> Chunk:
    """A Q&A pair is always embedded whole, however long the answer."""
    text = f"Q: {qa.question}\nA: {qa.answer}"
    return Chunk(
        doc_id=qa.origin or "qa",
        seq=0,
        text=text,
        token_start=0,
        token_end=count_tokens(text),
        kind=SourceKind.DISCOURSE_QA,
    )


def write_corpus(documents: list[Document], path: str | Path) -> None:
    """Write documents as JSON-lines: {id, kind, origin, text, line_count}."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for doc in documents:
            f.write(
                json.dumps(
                    {
                        "id": doc.id,
                        "kind": doc.kind.value,
                        "origin": doc.origin,
                        "text": doc.text,
                        "line_count": doc.line_count,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_corpus(path: str | Path) -> list[Document]:
    path = Path(path)
    documents = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                documents.append(
                    Document(
                        id=obj["id"],
                        kind=SourceKind(obj["kind"]),
                        origin=obj["origin"],
                        text=obj["text"],
                        line_count=obj["line_count"],
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}: line {lineno}: bad corpus record: {exc}") from exc
    return documents


def scene_policy(policy: ChunkingPolicy) -> ChunkingPolicy:
    """Scene JSON has no useful structure; always chunk it by token windows."""
    return replace(policy, mode=ChunkingMode.TOKEN_ONLY)
