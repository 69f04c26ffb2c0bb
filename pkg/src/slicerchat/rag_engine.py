"""Knowledge base, retrieval, and budgeted prompt assembly.

Three stores (Python code, Markdown docs, Discourse Q&A) persist on disk and
are shared read-only across chats. Scene stores are rebuilt per request from
the incoming scene XML; conversation stores live per session in memory.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .embed_index import EmbedderSpec, SearchHit, VectorStore, embed_text
from .ingest import (
    Chunk,
    ChunkingMode,
    ChunkingPolicy,
    Document,
    QAPair,
    SceneSummary,
    SourceKind,
    chunk_document,
    chunk_qa_pair,
    count_lines,
    count_tokens,
    scene_policy,
    token_spans,
)

logger = logging.getLogger(__name__)

PERSISTENT_KINDS = (
    SourceKind.PYTHON_CODE,
    SourceKind.MARKDOWN_DOC,
    SourceKind.DISCOURSE_QA,
)

DEFAULT_K = {
    SourceKind.PYTHON_CODE: 2,
    SourceKind.MARKDOWN_DOC: 2,
    SourceKind.DISCOURSE_QA: 1,
    SourceKind.SCENE_STATE: 1,
    SourceKind.CONVERSATION_TURN: 2,
}

PROMPT_HEADER = (
    "[INST] You are SlicerChat, an assistant for the 3D Slicer platform. "
    "Answer using the context below; if the context is insufficient, say so "
    "instead of inventing APIs."
)

_SECTIONS = (
    (SourceKind.PYTHON_CODE, "### Python examples"),
    (SourceKind.MARKDOWN_DOC, "### Documentation"),
    (SourceKind.DISCOURSE_QA, "### Example exchange"),
    (SourceKind.SCENE_STATE, "### Current scene"),
    (SourceKind.CONVERSATION_TURN, "### Earlier conversation"),
)


class PromptBudgetError(ValueError):
    """The budget cannot even hold the instruction header and the question."""


@dataclass
class RagConfig:
    enabled: set[SourceKind] = field(
        default_factory=lambda: {
            SourceKind.PYTHON_CODE,
            SourceKind.MARKDOWN_DOC,
            SourceKind.DISCOURSE_QA,
            SourceKind.SCENE_STATE,
        }
    )
    k_per_source: dict[SourceKind, int] = field(default_factory=lambda: dict(DEFAULT_K))
    prompt_token_budget: int = 3072
    history_enabled: bool = False

    def __post_init__(self) -> None:
        if self.prompt_token_budget < 1:
            raise ValueError("prompt_token_budget must be positive")
        for kind in self.enabled:
            if self.k_per_source.get(kind, DEFAULT_K[kind]) < 1:
                raise ValueError(f"k for enabled source {kind.value} must be >= 1")

    def k_for(self, kind: SourceKind) -> int:
        return self.k_per_source.get(kind, DEFAULT_K[kind])

    @classmethod
    def from_flags(
        cls,
        python: bool = True,
        markdown: bool = True,
        discourse: bool = True,
        scene: bool = True,
        history: bool = False,
        k_overrides: dict[SourceKind, int] | None = None,
        prompt_token_budget: int = 3072,
    ) -> "RagConfig":
        enabled = set()
        if python:
            enabled.add(SourceKind.PYTHON_CODE)
        if markdown:
            enabled.add(SourceKind.MARKDOWN_DOC)
        if discourse:
            enabled.add(SourceKind.DISCOURSE_QA)
        if scene:
            enabled.add(SourceKind.SCENE_STATE)
        if history:
            enabled.add(SourceKind.CONVERSATION_TURN)
        k = dict(DEFAULT_K)
        k.update(k_overrides or {})
        return cls(
            enabled=enabled,
            k_per_source=k,
            prompt_token_budget=prompt_token_budget,
            history_enabled=history,
        )


@dataclass
class RetrievalBundle:
    """Hits per knowledge source; only enabled sources with results appear."""

    hits: dict[SourceKind, list[SearchHit]] = field(default_factory=dict)

    def total(self) -> int:
        return sum(len(v) for v in self.hits.values())


@dataclass
class PromptSource:
    kind: SourceKind
    origin: str
    score: float


@dataclass
class AssembledPrompt:
    text: str
    token_count: int
    provenance: list[PromptSource]
    dropped: list[PromptSource]


class KnowledgeBase:
    """Per-source vector stores sharing one embedder spec."""

    def __init__(self, embedder: EmbedderSpec, policy: ChunkingPolicy):
        self.embedder = embedder
        self.policy = policy
        self.stores: dict[SourceKind, VectorStore] = {
            kind: VectorStore(embedder.dim, embedder.name) for kind in PERSISTENT_KINDS
        }
        self.conversation: dict[str, VectorStore] = {}

    def conversation_store(self, session_id: str) -> VectorStore:
        return self.conversation.setdefault(
            session_id, VectorStore(self.embedder.dim, self.embedder.name)
        )

    def reset_conversation(self, session_id: str) -> None:
        self.conversation.pop(session_id, None)

    def counts(self) -> dict[str, int]:
        return {kind.value: len(store) for kind, store in self.stores.items()}

    def total_chunks(self) -> int:
        return sum(len(store) for store in self.stores.values())


def build_knowledge_base(
    docs: list[Document],
    qa: list[QAPair],
    policy: ChunkingPolicy,
    spec: EmbedderSpec,
) -> KnowledgeBase:
    """Chunk and embed documents and Q&A pairs into their per-source stores."""
    kb = KnowledgeBase(spec, policy)
    for doc in docs:
        store = kb.stores.get(doc.kind)
        if store is None:
            logger.warning("ignoring document %s with non-corpus kind %s", doc.id, doc.kind.value)
            continue
        for chunk in chunk_document(doc, policy):
            store.add(chunk, embed_text(chunk.text, spec))
    for pair in qa:
        chunk = chunk_qa_pair(pair)
        kb.stores[SourceKind.DISCOURSE_QA].add(chunk, embed_text(chunk.text, spec))
    counts = kb.counts()
    if sum(counts.values()) == 0:
        logger.warning("knowledge base built with zero records")
    else:
        logger.info("knowledge base built: %s", counts)
    return kb


def build_scene_store(
    summary: SceneSummary, spec: EmbedderSpec, policy: ChunkingPolicy
) -> VectorStore:
    """Embed the canonical scene JSON into a fresh request-scoped store."""
    store = VectorStore(spec.dim, spec.name)
    if not summary.nodes:
        return store
    text = summary.to_json()
    doc = Document(
        id="scene",
        kind=SourceKind.SCENE_STATE,
        origin="scene",
        text=text,
        line_count=count_lines(text),
    )
    for chunk in chunk_document(doc, scene_policy(policy)):
        store.add(chunk, embed_text(chunk.text, spec))
    return store


def retrieve(
    kb: KnowledgeBase,
    query: str,
    config: RagConfig,
    scene_store: VectorStore | None = None,
    session_id: str | None = None,
) -> RetrievalBundle:
    """Embed the query once and collect top-k hits from every enabled source."""
    if not query:
        raise ValueError("query must not be empty")
    qvec = embed_text(query, kb.embedder)
    bundle = RetrievalBundle()
    for kind in DEFAULT_K:
        if kind not in config.enabled:
            continue
        if kind in PERSISTENT_KINDS:
            store = kb.stores[kind]
        elif kind == SourceKind.SCENE_STATE:
            store = scene_store
        else:
            store = kb.conversation.get(session_id) if session_id else None
        if store is None or len(store) == 0:
            continue
        hits = store.search(qvec, config.k_for(kind))
        if hits:
            bundle.hits[kind] = hits
    return bundle


def _source_of(kind: SourceKind, hit: SearchHit) -> PromptSource:
    return PromptSource(kind=kind, origin=hit.chunk.doc_id, score=hit.score)


def _render(
    user_query: str,
    surviving: dict[SourceKind, list[SearchHit]],
    exemplar_text: str | None,
) -> str:
    parts = [PROMPT_HEADER]
    for kind, title in _SECTIONS:
        if kind == SourceKind.DISCOURSE_QA:
            if exemplar_text:
                parts.append(f"{title}\n{exemplar_text}")
            continue
        hits = surviving.get(kind, [])
        if not hits:
            continue
        body = "\n".join(f"--- {h.chunk.doc_id}\n{h.chunk.text}" for h in hits)
        parts.append(f"{title}\n{body}")
    parts.append(f"### Question\n{user_query}")
    return "\n\n".join(parts) + "\n[/INST]\n"


def _truncate_tokens(text: str, keep: int) -> str:
    spans = token_spans(text)
    if keep <= 0 or not spans:
        return ""
    if keep >= len(spans):
        return text
    return text[: spans[keep - 1][1]]


def assemble_prompt(
    user_query: str, bundle: RetrievalBundle, config: RagConfig
) -> AssembledPrompt:
    """Render the retrieval bundle into the fixed prompt template, within budget.

    Over-budget prompts shed the lowest-scoring retrieved chunk first (the
    Q&A exemplar always goes last); once only the exemplar remains its answer
    is trimmed token by token from the end. The header and the question are
    never evicted. Every retrieved chunk lands in exactly one of provenance
    or dropped.
    """
    budget = config.prompt_token_budget
    base = _render(user_query, {}, None)
    if count_tokens(base) > budget:
        raise PromptBudgetError(
            f"budget of {budget} tokens cannot hold the header and question "
            f"({count_tokens(base)} tokens)"
        )

    dropped: list[PromptSource] = []
    surviving: dict[SourceKind, list[SearchHit]] = {}
    exemplar: SearchHit | None = None
    for kind, _ in _SECTIONS:
        hits = bundle.hits.get(kind, [])
        if not hits:
            continue
        if kind == SourceKind.DISCOURSE_QA:
            # One-shot: a single exemplar renders; any extra hits are dropped.
            exemplar = hits[0]
            dropped.extend(_source_of(kind, h) for h in hits[1:])
        else:
            surviving[kind] = list(hits)
    exemplar_text = exemplar.chunk.text if exemplar else None

    while True:
        text = _render(user_query, surviving, exemplar_text)
        total = count_tokens(text)
        if total <= budget:
            break
        candidates = [
            (kind, i, hit)
            for kind, _ in _SECTIONS
            for i, hit in enumerate(surviving.get(kind, []))
        ]
        if candidates:
            # Lowest score goes first; ties evict the later-rendered chunk.
            pos = min(range(len(candidates)), key=lambda p: (candidates[p][2].score, -p))
            kind, i, hit = candidates[pos]
            del surviving[kind][i]
            if not surviving[kind]:
                del surviving[kind]
            dropped.append(_source_of(kind, hit))
        elif exemplar is not None and exemplar_text:
            keep = count_tokens(exemplar_text) - (total - budget)
            exemplar_text = _truncate_tokens(exemplar_text, keep)
            if not exemplar_text:
                dropped.append(_source_of(SourceKind.DISCOURSE_QA, exemplar))
                exemplar = None
                exemplar_text = None
        else:
            # Unreachable: the bare header+question prompt fit the budget.
            raise PromptBudgetError("cannot reduce prompt below budget")

    provenance = []
    for kind, _ in _SECTIONS:
        if kind == SourceKind.DISCOURSE_QA:
            if exemplar is not None and exemplar_text:
                provenance.append(_source_of(kind, exemplar))
            continue
        provenance.extend(_source_of(kind, h) for h in surviving.get(kind, []))
    return AssembledPrompt(
        text=text, token_count=total, provenance=provenance, dropped=dropped
    )


def append_conversation(
    kb: KnowledgeBase,
    session_id: str,
    user_text: str,
    assistant_text: str,
    policy: ChunkingPolicy,
    config: RagConfig,
) -> int:
    """Chunk one exchange into the session's conversation store; no-op when
    history is disabled. Returns the number of records appended."""
    if not config.history_enabled:
        return 0
    text = f"USER: {user_text}\nASSISTANT: {assistant_text}"
    doc = Document(
        id=session_id,
        kind=SourceKind.CONVERSATION_TURN,
        origin=session_id,
        text=text,
        line_count=count_lines(text),
    )
    store = kb.conversation_store(session_id)
    added = 0
    for chunk in chunk_document(doc, policy):
        store.add(chunk, embed_text(chunk.text, kb.embedder))
        added += 1
    return added


_STORE_FILES = {
    SourceKind.PYTHON_CODE: "python.vstr",
    SourceKind.MARKDOWN_DOC: "markdown.vstr",
    SourceKind.DISCOURSE_QA: "discourse.vstr",
}


def save_index(kb: KnowledgeBase, index_dir: str | Path) -> None:
    """Write the three persistent stores plus manifest.json into a directory."""
    index_dir = Path(index_dir)
    index_dir.mkdir(parents=True, exist_ok=True)
    for kind, filename in _STORE_FILES.items():
        kb.stores[kind].save(index_dir / filename)
    manifest = {
        "embedder": kb.embedder.name,
        "dim": kb.embedder.dim,
        "policy": {
            "max_tokens": kb.policy.max_tokens,
            "overlap": kb.policy.overlap,
            "mode": kb.policy.mode.value,
        },
        "counts": kb.counts(),
        "built_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (index_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_index(index_dir: str | Path) -> KnowledgeBase:
    """Load a knowledge base from a directory written by save_index."""
    index_dir = Path(index_dir)
    manifest_path = index_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"index manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    spec = EmbedderSpec(name=manifest["embedder"], dim=manifest["dim"])
    policy = ChunkingPolicy(
        max_tokens=manifest["policy"]["max_tokens"],
        overlap=manifest["policy"]["overlap"],
        mode=ChunkingMode(manifest["policy"]["mode"]),
    )
    kb = KnowledgeBase(spec, policy)
    for kind, filename in _STORE_FILES.items():
        kb.stores[kind] = VectorStore.load(
            index_dir / filename, expected_embedder=spec.name
        )
    return kb
