"""Command-line entry point: ingest, index, query, serve, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

from . import benchmark as bench_mod
from .chat_service import BackendRegistry, create_app
from .embed_index import EmbedderSpec
from .generation import (
    BackendConnectError,
    ExternalBackend,
    MockEchoBackend,
    MockHashBackend,
    connect_external,
)
from .ingest import (
    ChunkingMode,
    ChunkingPolicy,
    SourceKind,
    load_qa_dataset,
    read_corpus,
    scan_repository,
    write_corpus,
)
from .rag_engine import (
    KnowledgeBase,
    RagConfig,
    build_knowledge_base,
    load_index,
    save_index,
)

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "SLICERCHAT_CONFIG"

_QUERY_SOURCES = {
    "python": SourceKind.PYTHON_CODE,
    "markdown": SourceKind.MARKDOWN_DOC,
    "discourse": SourceKind.DISCOURSE_QA,
}


def _load_overlay() -> dict:
    config_path = os.environ.get(CONFIG_ENV_VAR)
    if not config_path:
        return {}
    try:
        overlay = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"error: cannot read config file {config_path}: {exc}")
    if not isinstance(overlay, dict):
        raise SystemExit(f"error: config file {config_path} must hold a JSON object")
    return overlay


def _pick(cli_value, overlay: dict, key: str, default):
    """Flag precedence: command line beats the config file beats the default."""
    if cli_value is not None:
        return cli_value
    if key in overlay:
        return overlay[key]
    return default


def cmd_ingest(args: argparse.Namespace, overlay: dict) -> int:
    root = _pick(args.root, overlay, "root", None)
    if root is None:
        raise SystemExit("error: --root is required")
    extensions = _pick(args.ext, overlay, "ext", [".py", ".md"])
    out = Path(_pick(args.out, overlay, "out", "corpus.jsonl"))

    result = scan_repository(root, extensions)
    write_corpus(result.documents, out)
    total_lines = sum(d.line_count for d in result.documents)
    print(
        f"documents: {len(result.documents)}  lines: {total_lines}  "
        f"skipped: {len(result.skipped)}  -> {out}"
    )
    return 0


def cmd_index(args: argparse.Namespace, overlay: dict) -> int:
    corpus_path = _pick(args.corpus, overlay, "corpus", None)
    qa_path = _pick(args.qa, overlay, "qa", None)
    out_dir = Path(_pick(args.out, overlay, "out", "index"))
    policy = ChunkingPolicy(
        max_tokens=_pick(args.max_tokens, overlay, "max_tokens", 200),
        overlap=_pick(args.overlap, overlay, "overlap", 50),
        mode=ChunkingMode(_pick(args.mode, overlay, "mode", "structure")),
    )
    spec = EmbedderSpec(dim=_pick(args.dim, overlay, "dim", 384))

    docs = read_corpus(corpus_path) if corpus_path else []
    qa = load_qa_dataset(qa_path) if qa_path else []
    kb = build_knowledge_base(docs, qa, policy, spec)
    if kb.total_chunks() == 0:
        print("warning: index is empty (no documents or Q&A pairs)", file=sys.stderr)

    # Build into a sibling temp dir and rename so a failed build never leaves
    # a half-written index at the target path.
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp_dir = Path(
        tempfile.mkdtemp(prefix=f".{out_dir.name}-", dir=out_dir.parent)
    )
    try:
        save_index(kb, tmp_dir)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.rename(tmp_dir, out_dir)
    except BaseException:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise

    for kind, count in kb.counts().items():
        print(f"{kind}: {count} records")
    print(f"index written to {out_dir}")
    return 0


def cmd_query(args: argparse.Namespace, overlay: dict) -> int:
    from .embed_index import embed_text

    index_dir = _pick(args.index, overlay, "index", None)
    if index_dir is None:
        raise SystemExit("error: --index is required")
    kind = _QUERY_SOURCES[args.source]
    kb = load_index(index_dir)
    store = kb.stores[kind]
    hits = store.search(embed_text(args.text, kb.embedder), args.k)
    if not hits:
        print("no results")
        return 0
    for hit in hits:
        first_line = hit.chunk.text.split("\n", 1)[0]
        print(f"{hit.score:+.4f}  {hit.chunk.doc_id}  {first_line[:80]}")
    return 0


def _build_registry(backend: str, backend_addr: str | None) -> BackendRegistry:
    backends = [MockHashBackend(), MockEchoBackend()]
    if backend == "external":
        if not backend_addr:
            raise SystemExit("error: --backend external requires --backend-addr")
        try:
            backends.append(connect_external(backend_addr))
        except BackendConnectError as exc:
            # Register anyway so /api/models can report ready=false.
            print(f"warning: external backend not reachable yet: {exc}", file=sys.stderr)
            backends.append(ExternalBackend(backend_addr))
    return BackendRegistry(backends, default_id=backend if backend != "external" else "external")


def cmd_serve(args: argparse.Namespace, overlay: dict) -> int:
    import uvicorn

    addr = _pick(args.addr, overlay, "addr", "127.0.0.1:8080")
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise SystemExit(f"error: --addr must be HOST:PORT, got {addr!r}")
    backend = _pick(args.backend, overlay, "backend", "mock-hash")
    backend_addr = _pick(args.backend_addr, overlay, "backend_addr", None)
    index_dir = _pick(args.index, overlay, "index", None)

    if index_dir:
        kb = load_index(index_dir)
    else:
        print("warning: serving without an index; all stores are empty", file=sys.stderr)
        kb = KnowledgeBase(EmbedderSpec(), ChunkingPolicy())

    registry = _build_registry(backend, backend_addr)
    app = create_app(kb, registry, RagConfig())

    ui_dir = _pick(args.ui_dir, overlay, "ui_dir", None)
    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    uvicorn.run(app, host=host, port=int(port), log_level="warning")
    return 0


def cmd_bench(args: argparse.Namespace, overlay: dict) -> int:
    cases_path = _pick(args.cases, overlay, "cases", None) or bench_mod.default_cases_path()
    arms_path = _pick(args.arms, overlay, "arms", None) or bench_mod.default_arms_path()
    endpoint = _pick(args.endpoint, overlay, "endpoint", "http://127.0.0.1:8080")
    out_dir = Path(_pick(args.out, overlay, "out", "bench-out"))

    cases = bench_mod.load_cases(cases_path)
    arms = bench_mod.load_arms(arms_path)
    results = bench_mod.run_benchmark(cases, arms, endpoint)
    if args.review:
        entries = bench_mod.load_review(args.review)
        bench_mod.review_results(results, entries)
    files = bench_mod.emit_report(results, out_dir)
    print(f"{len(results)} runs ({len(cases)} cases x {len(arms)} arms)")
    for f in files:
        print(f"wrote {f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicerchat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a repository tree into a corpus file")
    p.add_argument("--root", help="repository root directory")
    p.add_argument("--ext", nargs="+", help="file suffixes to collect (default .py .md)")
    p.add_argument("--out", help="corpus JSONL output path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build the persistent vector stores")
    p.add_argument("--corpus", help="corpus JSONL from the ingest step")
    p.add_argument("--qa", help="question/answer JSONL file")
    p.add_argument("--out", help="index output directory")
    p.add_argument("--max-tokens", type=int, dest="max_tokens", help="chunk size in tokens")
    p.add_argument("--overlap", type=int, help="token overlap between chunks")
    p.add_argument("--dim", type=int, help="embedding dimensionality")
    p.add_argument("--mode", choices=["token", "structure"], help="chunking mode")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="inspect an index with a text query")
    p.add_argument("--index", help="index directory")
    p.add_argument("--source", choices=sorted(_QUERY_SOURCES), default="python")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("text")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="run the chat service until interrupted")
    p.add_argument("--index", help="index directory")
    p.add_argument("--addr", help="listen address HOST:PORT (default 127.0.0.1:8080)")
    p.add_argument("--backend", choices=["mock-hash", "mock-echo", "external"])
    p.add_argument("--backend-addr", dest="backend_addr", help="external backend HOST:PORT")
    p.add_argument("--ui-dir", dest="ui_dir", help="serve a static web UI from this directory")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="run the benchmark grid against a running service")
    p.add_argument("--cases", help="benchmark cases JSONL (default: bundled placeholders)")
    p.add_argument("--arms", help="arms JSON (default: bundled four-arm grid)")
    p.add_argument("--endpoint", help="chat service base URL")
    p.add_argument("--review", help="reviewer sidecar JSONL")
    p.add_argument("--out", help="report output directory")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    overlay = _load_overlay()
    try:
        return args.func(args, overlay)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
