"""Length-prefixed JSON framing over TCP, plus a reference backend host.

Frame layout in both directions: 4-byte big-endian unsigned length, then that
many bytes of UTF-8 JSON. Frames above 16 MiB are rejected.
"""

from __future__ import annotations

import json
import logging
import select
import socket
import socketserver
import struct
import threading

logger = logging.getLogger(__name__)

MAX_FRAME_BYTES = 16 * 1024 * 1024


class FrameError(ConnectionError):
    """The peer sent something that is not a valid frame, or hung up mid-frame."""


def write_frame(sock: socket.socket, obj: dict) -> None:
    data = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    if len(data) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(data)} bytes exceeds the {MAX_FRAME_BYTES} limit")
    sock.sendall(struct.pack(">I", len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FrameError(f"connection closed mid-frame ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> dict:
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} limit")
    payload = _recv_exact(sock, length)
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"frame payload is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise FrameError("frame payload must be a JSON object")
    return obj


class _BackendRequestHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        while True:
            try:
                frame = read_frame(self.request)
            except FrameError:
                return
            msg_type = frame.get("type")
            msg_id = frame.get("id", "")
            if msg_type == "ping":
                write_frame(self.request, {"type": "pong", "id": msg_id})
            elif msg_type == "generate":
                try:
                    self._generate(frame)
                except (FrameError, OSError):
                    return
            elif msg_type == "cancel":
                pass  # nothing in flight on this connection
            else:
                write_frame(
                    self.request,
                    {"type": "error", "id": msg_id, "message": f"unknown frame type: {msg_type!r}"},
                )

    def _generate(self, frame: dict) -> None:
        # Imported here to keep the framing layer free of backend imports.
        from .generation import (
            EosEvent,
            ErrorEvent,
            GenerationParams,
            TokenEvent,
        )

        msg_id = frame.get("id", "")
        params_in = frame.get("params") or {}
        try:
            params = GenerationParams(
                max_new_tokens=params_in.get("max_new_tokens", 1024),
                temperature=params_in.get("temperature", 0.2),
                seed=params_in.get("seed", 0),
                inter_token_delay_ms=params_in.get("inter_token_delay_ms", 0),
            )
        except (TypeError, ValueError) as exc:
            write_frame(self.request, {"type": "error", "id": msg_id, "message": str(exc)})
            return

        cancel = threading.Event()
        for event in self.server.backend.stream(frame.get("prompt", ""), params, cancel=cancel):
            self._poll_for_cancel(msg_id, cancel)
            if isinstance(event, TokenEvent):
                write_frame(self.request, {"type": "token", "id": msg_id, "text": event.text})
            elif isinstance(event, EosEvent):
                write_frame(
                    self.request,
                    {
                        "type": "eos",
                        "id": msg_id,
                        "stats": {
                            "prompt_tokens": event.stats.prompt_tokens,
                            "output_tokens": event.stats.output_tokens,
                            "backend_seconds": event.stats.backend_seconds,
                        },
                    },
                )
            elif isinstance(event, ErrorEvent):
                write_frame(
                    self.request, {"type": "error", "id": msg_id, "message": event.message}
                )

    def _poll_for_cancel(self, msg_id: str, cancel: threading.Event) -> None:
        ready, _, _ = select.select([self.request], [], [], 0)
        if not ready:
            return
        try:
            frame = read_frame(self.request)
        except FrameError:
            cancel.set()
            return
        if frame.get("type") == "cancel" and frame.get("id") == msg_id:
            cancel.set()


class BackendServer(socketserver.ThreadingTCPServer):
    """Hosts one generation backend behind the framed protocol.

    This is the reference server side; any model host that speaks the same
    frames is interchangeable with it.
    """

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, backend, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _BackendRequestHandler)
        self.backend = backend

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start_in_thread(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread
