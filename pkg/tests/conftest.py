from __future__ import annotations

import threading
import time

import pytest
import uvicorn

from slicerchat.chat_service import BackendRegistry, create_app
from slicerchat.embed_index import EmbedderSpec
from slicerchat.generation import MockEchoBackend, MockHashBackend
from slicerchat.ingest import ChunkingPolicy, Document, QAPair, SourceKind, count_lines
from slicerchat.rag_engine import RagConfig, build_knowledge_base

SENTINEL_MD = "zebrafish quaternion marmalade"
SENTINEL_PY = "aardvark_gyroscope_lattice"


def _doc(doc_id: str, kind: SourceKind, text: str) -> Document:
    return Document(id=doc_id, kind=kind, origin=doc_id, text=text, line_count=count_lines(text))


def small_corpus() -> tuple[list[Document], list[QAPair]]:
    docs = [
        _doc(
            "examples/render.py",
            SourceKind.PYTHON_CODE,
            "def render_volume(node):\n    "
            f"{SENTINEL_PY} = node.GetName()\n    return {SENTINEL_PY}\n",
        ),
        _doc(
            "docs/intro.md",
            SourceKind.MARKDOWN_DOC,
            f"# Introduction\nThe {SENTINEL_MD} workflow loads volumes.\n"
            "# Usage\nOpen the module and click apply.\n",
        ),
    ]
    qa = [
        QAPair(
            question="How do I rename a node?",
            answer="Call node.SetName('new') from the console.",
            origin="thread/101",
        ),
        QAPair(
            question="Why is my volume invisible?",
            answer="Check the visibility toggle in the Data module.",
            origin="thread/102",
        ),
    ]
    return docs, qa


@pytest.fixture(scope="module")
def knowledge_base():
    docs, qa = small_corpus()
    return build_knowledge_base(docs, qa, ChunkingPolicy(), EmbedderSpec())


class ServerHandle:
    """Runs a uvicorn server on an ephemeral port in a background thread."""

    def __init__(self, app):
        self._config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        self._server = uvicorn.Server(self._config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self.base_url = ""

    def __enter__(self) -> "ServerHandle":
        self._thread.start()
        deadline = time.time() + 15
        while not self._server.started:
            if time.time() > deadline:
                raise RuntimeError("server did not start in time")
            time.sleep(0.01)
        port = self._server.servers[0].sockets[0].getsockname()[1]
        self.base_url = f"http://127.0.0.1:{port}"
        return self

    def __exit__(self, *exc) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=15)


@pytest.fixture(scope="module")
def live_server(knowledge_base):
    registry = BackendRegistry([MockHashBackend(), MockEchoBackend()])
    app = create_app(knowledge_base, registry, RagConfig())
    with ServerHandle(app) as handle:
        yield handle
