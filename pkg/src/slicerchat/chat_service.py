"""HTTP chat service: one request runs the whole pipeline and streams NDJSON.

Pipeline per request: optional scene extraction, retrieval, prompt assembly,
generation with token-by-token forwarding, a final eos event carrying timing,
then the optional conversation writeback.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel

from .embed_index import VectorStore
from .generation import (
    Backend,
    EosEvent,
    ErrorEvent,
    GenerationParams,
    TokenEvent,
)
from .ingest import ChunkingPolicy, SourceKind, extract_scene_summary
from .rag_engine import (
    KnowledgeBase,
    PromptBudgetError,
    RagConfig,
    append_conversation,
    assemble_prompt,
    build_scene_store,
    retrieve,
)

logger = logging.getLogger(__name__)


class RagFlags(BaseModel):
    """Per-source toggles; fields left null fall back to the service defaults."""

    python: bool | None = None
    markdown: bool | None = None
    discourse: bool | None = None
    scene: bool | None = None
    history: bool | None = None
    k: dict[str, int] | None = None


class ParamsIn(BaseModel):
    max_new_tokens: int | None = None
    temperature: float | None = None
    seed: int | None = None
    inter_token_delay_ms: int | None = None


class ChatRequestIn(BaseModel):
    session_id: str
    prompt: str
    scene_xml: str | None = None
    rag: RagFlags = RagFlags()
    model: str | None = None
    params: ParamsIn = ParamsIn()


class ResetRequest(BaseModel):
    session_id: str


@dataclass
class Session:
    session_id: str
    created: float
    last_used: float
    active: bool = False


class BackendRegistry:
    """Ordered id -> backend map; duplicate ids are a configuration error."""

    def __init__(self, backends: list[Backend], default_id: str | None = None):
        self._backends: dict[str, Backend] = {}
        for backend in backends:
            if backend.id in self._backends:
                raise ValueError(f"duplicate backend id: {backend.id!r}")
            self._backends[backend.id] = backend
        if not self._backends:
            raise ValueError("at least one backend must be registered")
        self.default_id = default_id or next(iter(self._backends))
        if self.default_id not in self._backends:
            raise ValueError(f"default backend {self.default_id!r} is not registered")

    def get(self, backend_id: str | None) -> Backend | None:
        return self._backends.get(backend_id or self.default_id)

    def list(self) -> list[dict]:
        return [
            {"id": b.id, "kind": b.kind, "ready": b.ready()}
            for b in self._backends.values()
        ]


def _merge_config(default: RagConfig, flags: RagFlags) -> RagConfig:
    def pick(flag: bool | None, kind: SourceKind) -> bool:
        return flag if flag is not None else kind in default.enabled

    k_overrides = {}
    for name, value in (flags.k or {}).items():
        try:
            k_overrides[SourceKind(name)] = int(value)
        except ValueError as exc:
            raise ValueError(f"unknown source kind in k overrides: {name!r}") from exc
    history = (
        flags.history if flags.history is not None else default.history_enabled
    )
    return RagConfig.from_flags(
        python=pick(flags.python, SourceKind.PYTHON_CODE),
        markdown=pick(flags.markdown, SourceKind.MARKDOWN_DOC),
        discourse=pick(flags.discourse, SourceKind.DISCOURSE_QA),
        scene=pick(flags.scene, SourceKind.SCENE_STATE),
        history=history,
        k_overrides={**default.k_per_source, **k_overrides},
        prompt_token_budget=default.prompt_token_budget,
    )


def _merge_params(p: ParamsIn) -> GenerationParams:
    defaults = GenerationParams()
    return GenerationParams(
        max_new_tokens=p.max_new_tokens if p.max_new_tokens is not None else defaults.max_new_tokens,
        temperature=p.temperature if p.temperature is not None else defaults.temperature,
        seed=p.seed if p.seed is not None else defaults.seed,
        inter_token_delay_ms=(
            p.inter_token_delay_ms
            if p.inter_token_delay_ms is not None
            else defaults.inter_token_delay_ms
        ),
    )


def _event_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


def _token_line(text: str) -> str:
    return _event_line({"type": "token", "text": text})


def _error_line(message: str) -> str:
    return _event_line({"type": "error", "message": message})


class ChatService:
    def __init__(
        self,
        kb: KnowledgeBase,
        registry: BackendRegistry,
        default_config: RagConfig | None = None,
        policy: ChunkingPolicy | None = None,
    ):
        self.kb = kb
        self.registry = registry
        self.default_config = default_config or RagConfig()
        self.policy = policy or kb.policy
        self.sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def _acquire_session(self, session_id: str) -> bool:
        with self._lock:
            now = time.time()
            session = self.sessions.get(session_id)
            if session is None:
                session = Session(session_id=session_id, created=now, last_used=now)
                self.sessions[session_id] = session
            if session.active:
                return False
            session.active = True
            session.last_used = now
            return True

    def _release_session(self, session_id: str) -> None:
        with self._lock:
            session = self.sessions.get(session_id)
            if session is not None:
                session.active = False

    def chat_events(self, req: ChatRequestIn, t0: float):
        """Yield NDJSON lines for one chat request; exactly one terminal line."""
        if not req.prompt:
            yield _error_line("prompt must not be empty")
            return
        backend = self.registry.get(req.model)
        if backend is None:
            yield _error_line(f"unknown model: {req.model}")
            return
        if not self._acquire_session(req.session_id):
            yield _error_line("generation in progress")
            return
        try:
            try:
                config = _merge_config(self.default_config, req.rag)
                params = _merge_params(req.params)
            except ValueError as exc:
                yield _error_line(str(exc))
                return

            scene_store: VectorStore | None = None
            if req.scene_xml and SourceKind.SCENE_STATE in config.enabled:
                try:
                    summary = extract_scene_summary(req.scene_xml)
                except ValueError as exc:
                    yield _error_line(str(exc))
                    return
                scene_store = build_scene_store(summary, self.kb.embedder, self.policy)

            try:
                bundle = retrieve(
                    self.kb,
                    req.prompt,
                    config,
                    scene_store=scene_store,
                    session_id=req.session_id,
                )
                prompt = assemble_prompt(req.prompt, bundle, config)
            except (ValueError, PromptBudgetError) as exc:
                yield _error_line(str(exc))
                return

            pieces: list[str] = []
            for event in backend.stream(prompt.text, params):
                if isinstance(event, TokenEvent):
                    pieces.append(event.text)
                    yield _token_line(event.text)
                elif isinstance(event, EosEvent):
                    total_seconds = time.perf_counter() - t0
                    yield _event_line(
                        {
                            "type": "eos",
                            "stats": {
                                "prompt_tokens": event.stats.prompt_tokens,
                                "output_tokens": event.stats.output_tokens,
                                "backend_seconds": event.stats.backend_seconds,
                                "total_seconds": total_seconds,
                            },
                        }
                    )
                    append_conversation(
                        self.kb,
                        req.session_id,
                        req.prompt,
                        "".join(pieces),
                        self.policy,
                        config,
                    )
                elif isinstance(event, ErrorEvent):
                    yield _error_line(event.message)
                    return
        finally:
            self._release_session(req.session_id)

    def reset_session(self, session_id: str) -> JSONResponse:
        with self._lock:
            session = self.sessions.get(session_id)
            if session is not None and session.active:
                return JSONResponse(
                    status_code=409,
                    content={"ok": False, "error": "generation in progress"},
                )
            self.kb.reset_conversation(session_id)
            self.sessions.pop(session_id, None)
        return JSONResponse(content={"ok": True})


def create_app(
    kb: KnowledgeBase,
    registry: BackendRegistry,
    default_config: RagConfig | None = None,
    policy: ChunkingPolicy | None = None,
) -> FastAPI:
    service = ChatService(kb, registry, default_config, policy)
    app = FastAPI(title="slicerchat")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.service = service

    @app.post("/api/chat")
    def chat(req: ChatRequestIn) -> StreamingResponse:
        t0 = time.perf_counter()
        return StreamingResponse(
            service.chat_events(req, t0), media_type="application/x-ndjson"
        )

    @app.post("/api/session/reset")
    def reset(req: ResetRequest) -> JSONResponse:
        return service.reset_session(req.session_id)

    @app.get("/api/models")
    def models() -> list[dict]:
        return service.registry.list()

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok", "index_chunks": kb.total_chunks()}

    return app
