"""Streaming generation backends: deterministic mocks and a TCP client adapter.

A backend's stream yields zero or more token events followed by exactly one
terminal event (end-of-stream with stats, or an error). The mocks are pure
functions of their inputs so tests can predict every byte.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Callable, Iterator

from .ingest import count_tokens
from .embed_index import fnv1a64
from .protocol import FrameError, read_frame, write_frame

logger = logging.getLogger(__name__)

MOCK_TOKEN_CAP = 16
_MASK64 = 0xFFFFFFFFFFFFFFFF


class GenerationError(RuntimeError):
    """The stream terminated with an error event."""


class BackendConnectError(ConnectionError):
    """Could not reach or handshake with an external backend."""


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int = 1024
    temperature: float = 0.2
    seed: int = 0
    inter_token_delay_ms: int = 0  # mocks only

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.inter_token_delay_ms < 0:
            raise ValueError("inter_token_delay_ms must be >= 0")


@dataclass(frozen=True)
class GenerationStats:
    prompt_tokens: int
    output_tokens: int
    backend_seconds: float


@dataclass(frozen=True)
class TokenEvent:
    text: str


@dataclass(frozen=True)
class EosEvent:
    stats: GenerationStats


@dataclass(frozen=True)
class ErrorEvent:
    message: str


StreamEvent = TokenEvent | EosEvent | ErrorEvent


def mock_hash_tokens(prompt: str, seed: int, max_new_tokens: int) -> list[str]:
    """The exact token sequence MockHash emits for these inputs."""
    h = fnv1a64(prompt.encode("utf-8") + struct.pack(">Q", seed & _MASK64))
    n = min(max_new_tokens, MOCK_TOKEN_CAP)
    return [format((h * (i + 1)) % 65536, "04x") + " " for i in range(n)]


class MockHashBackend:
    """Emits up to 16 hash-derived hex tokens; pure function of (prompt, seed)."""

    kind = "mock-hash"

    def __init__(self, backend_id: str = "mock-hash"):
        self.id = backend_id

    def ready(self) -> bool:
        return True

    def stream(
        self,
        prompt: str,
        params: GenerationParams,
        cancel: threading.Event | None = None,
    ) -> Iterator[StreamEvent]:
        start = time.perf_counter()
        emitted = 0
        for token in mock_hash_tokens(prompt, params.seed, params.max_new_tokens):
            if params.inter_token_delay_ms:
                time.sleep(params.inter_token_delay_ms / 1000.0)
            if cancel is not None and cancel.is_set():
                yield ErrorEvent("cancelled")
                return
            yield TokenEvent(token)
            emitted += 1
        yield EosEvent(
            GenerationStats(
                prompt_tokens=count_tokens(prompt),
                output_tokens=emitted,
                backend_seconds=time.perf_counter() - start,
            )
        )


def _echo_body(prompt: str) -> str:
    marker = "### Question"
    idx = prompt.rfind(marker)
    if idx < 0:
        return prompt
    rest = prompt[idx + len(marker) :]
    end = rest.find("[/INST]")
    return rest[:end] if end >= 0 else rest


class MockEchoBackend:
    """Echoes the question section of the prompt back, one word per token."""

    kind = "mock-echo"

    def __init__(self, backend_id: str = "mock-echo"):
        self.id = backend_id

    def ready(self) -> bool:
        return True

    def stream(
        self,
        prompt: str,
        params: GenerationParams,
        cancel: threading.Event | None = None,
    ) -> Iterator[StreamEvent]:
        start = time.perf_counter()
        words = _echo_body(prompt).split()[: params.max_new_tokens]
        emitted = 0
        for word in words:
            if params.inter_token_delay_ms:
                time.sleep(params.inter_token_delay_ms / 1000.0)
            if cancel is not None and cancel.is_set():
                yield ErrorEvent("cancelled")
                return
            yield TokenEvent(word + " ")
            emitted += 1
        yield EosEvent(
            GenerationStats(
                prompt_tokens=count_tokens(prompt),
                output_tokens=emitted,
                backend_seconds=time.perf_counter() - start,
            )
        )


class ExternalBackend:
    """Client adapter for a model process speaking the framed wire protocol.

    Each generation opens its own connection, so one in-flight request per
    connection holds by construction.
    """

    kind = "external"

    def __init__(
        self,
        address: str,
        backend_id: str = "external",
        connect_timeout: float = 5.0,
        read_timeout: float = 300.0,
    ):
        self.id = backend_id
        self.address = address
        self.connect_timeout = connect_timeout
        self.read_timeout = read_timeout

    def _connect(self, timeout: float) -> socket.socket:
        host, _, port = self.address.rpartition(":")
        if not host:
            raise BackendConnectError(f"address must be host:port, got {self.address!r}")
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
        except (OSError, ValueError) as exc:
            raise BackendConnectError(f"cannot connect to {self.address}: {exc}") from exc
        ping_id = uuid.uuid4().hex
        try:
            write_frame(sock, {"type": "ping", "id": ping_id})
            reply = read_frame(sock)
        except (FrameError, OSError) as exc:
            sock.close()
            raise BackendConnectError(f"handshake with {self.address} failed: {exc}") from exc
        if reply.get("type") != "pong" or reply.get("id") != ping_id:
            sock.close()
            raise BackendConnectError(
                f"bad handshake reply from {self.address}: {reply!r}"
            )
        return sock

    def ready(self) -> bool:
        try:
            self._connect(timeout=1.0).close()
            return True
        except BackendConnectError:
            return False

    def stream(
        self,
        prompt: str,
        params: GenerationParams,
        cancel: threading.Event | None = None,
    ) -> Iterator[StreamEvent]:
        try:
            sock = self._connect(timeout=self.connect_timeout)
        except BackendConnectError as exc:
            yield ErrorEvent(str(exc))
            return
        request_id = uuid.uuid4().hex
        cancel_sent = False
        try:
            sock.settimeout(self.read_timeout)
            write_frame(
                sock,
                {
                    "type": "generate",
                    "id": request_id,
                    "prompt": prompt,
                    "params": {
                        "max_new_tokens": params.max_new_tokens,
                        "temperature": params.temperature,
                        "seed": params.seed,
                    },
                },
            )
            while True:
                if cancel is not None and cancel.is_set() and not cancel_sent:
                    write_frame(sock, {"type": "cancel", "id": request_id})
                    cancel_sent = True
                frame = read_frame(sock)
                frame_type = frame.get("type")
                if frame.get("id") != request_id:
                    yield ErrorEvent(f"frame for unexpected id: {frame!r}")
                    return
                if frame_type == "token":
                    yield TokenEvent(str(frame.get("text", "")))
                elif frame_type == "eos":
                    stats = frame.get("stats") or {}
                    yield EosEvent(
                        GenerationStats(
                            prompt_tokens=int(stats.get("prompt_tokens", 0)),
                            output_tokens=int(stats.get("output_tokens", 0)),
                            backend_seconds=float(stats.get("backend_seconds", 0.0)),
                        )
                    )
                    return
                elif frame_type == "error":
                    yield ErrorEvent(str(frame.get("message", "backend error")))
                    return
                else:
                    yield ErrorEvent(f"unexpected frame type {frame_type!r}")
                    return
        except (FrameError, OSError) as exc:
            yield ErrorEvent(f"backend connection failed: {exc}")
        finally:
            sock.close()


Backend = MockHashBackend | MockEchoBackend | ExternalBackend


def connect_external(address: str, timeout: float = 5.0) -> ExternalBackend:
    """Connect and ping/pong-handshake an external backend; raises on failure."""
    backend = ExternalBackend(address, connect_timeout=timeout)
    backend._connect(timeout=timeout).close()
    return backend


def generate_stream(
    backend: Backend,
    prompt: str,
    params: GenerationParams,
    sink: Callable[[StreamEvent], None],
    cancel: threading.Event | None = None,
) -> GenerationStats:
    """Drive a backend stream, forwarding every event to sink.

    Returns the end-of-stream stats; raises GenerationError after the sink has
    seen a terminal error event.
    """
    for event in backend.stream(prompt, params, cancel=cancel):
        sink(event)
        if isinstance(event, EosEvent):
            return event.stats
        if isinstance(event, ErrorEvent):
            raise GenerationError(event.message)
    raise GenerationError("backend stream ended without a terminal event")
