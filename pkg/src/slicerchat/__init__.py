"""slicerchat: a locally runnable RAG chat engine with per-source vector stores."""

__version__ = "0.1.0"

from .embed_index import EmbedderSpec, SearchHit, VectorStore, cosine_similarity, embed_text
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
    extract_scene_summary,
    load_qa_dataset,
    scan_repository,
    tokenize,
)
from .rag_engine import (
    AssembledPrompt,
    KnowledgeBase,
    RagConfig,
    RetrievalBundle,
    assemble_prompt,
    build_knowledge_base,
    build_scene_store,
    retrieve,
)

__all__ = [
    "AssembledPrompt",
    "Chunk",
    "ChunkingMode",
    "ChunkingPolicy",
    "Document",
    "EmbedderSpec",
    "KnowledgeBase",
    "QAPair",
    "RagConfig",
    "RetrievalBundle",
    "SceneSummary",
    "SearchHit",
    "SourceKind",
    "VectorStore",
    "assemble_prompt",
    "build_knowledge_base",
    "build_scene_store",
    "chunk_document",
    "chunk_qa_pair",
    "cosine_similarity",
    "embed_text",
    "extract_scene_summary",
    "load_qa_dataset",
    "retrieve",
    "scan_repository",
    "tokenize",
]
