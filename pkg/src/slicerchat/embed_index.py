"""Deterministic hashed bag-of-words embeddings and an exact cosine vector store.

The store does exhaustive scoring over every record: no approximation, ties
broken by insertion id, so results are reproducible across platforms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .ingest import Chunk, SourceKind, tokenize

STORE_MAGIC = b"VSTR"
STORE_VERSION = 1
# Guards against absurd allocations when a store file is corrupt.
_MAX_BLOB_BYTES = 16 * 1024 * 1024

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class StoreFormatError(ValueError):
    """A store file failed validation; the message names the byte offset."""


@dataclass(frozen=True)
class EmbedderSpec:
    name: str = "hashed-bow"
    dim: int = 384

    def __post_init__(self) -> None:
        if self.dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.dim}")


@dataclass
class SearchHit:
    id: int
    score: float
    chunk: Chunk


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=65536)
def _token_hash(token: str) -> int:
    return fnv1a64(token.lower().encode("utf-8"))


def embed_text(text: str, spec: EmbedderSpec) -> np.ndarray:
    """Hash each token into one of dim buckets with a +/-1 sign, then L2-normalize.

    Deterministic and order-insensitive over token multisets. Empty or
    degenerate input maps to the first basis vector so the result is always
    unit-norm.
    """
    v = np.zeros(spec.dim, dtype=np.float64)
    for token in tokenize(text):
        h = _token_hash(token)
        sign = 1.0 if (h >> 32) & 1 == 0 else -1.0
        v[h % spec.dim] += sign
    if not v.any():
        v[0] = 1.0
    v /= np.linalg.norm(v)
    return v.astype(np.float32)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of two unit-norm vectors."""
    if len(u) != len(v):
        raise ValueError(f"dimension mismatch: {len(u)} vs {len(v)}")
    return float(np.asarray(u, dtype=np.float64) @ np.asarray(v, dtype=np.float64))


class VectorStore:
    """Append-only flat store of (vector, chunk) records with exact top-k search."""

    def __init__(self, dim: int, embedder_name: str = "hashed-bow"):
        self.dim = dim
        self.embedder_name = embedder_name
        self._vectors: list[np.ndarray] = []
        self._chunks: list[Chunk] = []
        self._matrix: np.ndarray | None = None  # float64 cache for search

    def __len__(self) -> int:
        return len(self._chunks)

    def chunk(self, record_id: int) -> Chunk:
        return self._chunks[record_id]

    def vector(self, record_id: int) -> np.ndarray:
        return self._vectors[record_id]

    def add(self, chunk: Chunk, vector: np.ndarray) -> int:
        """Append a record; returns its id (the previous record count)."""
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector dim {vec.shape} does not match store dim {self.dim}")
        norm = float(np.linalg.norm(vec.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"vector is not unit-norm (|v| = {norm:.8f})")
        record_id = len(self._chunks)
        self._vectors.append(vec)
        self._chunks.append(chunk)
        self._matrix = None
        return record_id

    def search(self, query: np.ndarray, k: int) -> list[SearchHit]:
        """Top-k records by cosine score, descending, ties by smaller id."""
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dim {q.shape} does not match store dim {self.dim}")
        n = len(self._chunks)
        if n == 0:
            return []
        if self._matrix is None:
            self._matrix = np.stack(self._vectors).astype(np.float64)
        scores = self._matrix @ q
        order = np.lexsort((np.arange(n), -scores))[: min(k, n)]
        return [SearchHit(id=int(i), score=float(scores[i]), chunk=self._chunks[i]) for i in order]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("wb") as f:
            f.write(STORE_MAGIC)
            f.write(struct.pack("<H", STORE_VERSION))
            f.write(struct.pack("<I", self.dim))
            name = self.embedder_name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<Q", len(self._chunks)))
            for vec, chunk in zip(self._vectors, self._chunks):
                f.write(vec.astype("<f4").tobytes())
                blob = _chunk_json(chunk)
                f.write(struct.pack("<I", len(blob)))
                f.write(blob)

    @classmethod
    def load(cls, path: str | Path, expected_embedder: str | None = None) -> "VectorStore":
        path = Path(path)
        with path.open("rb") as f:
            reader = _Reader(f)
            magic = reader.read(4, "magic")
            if magic != STORE_MAGIC:
                raise StoreFormatError(f"{path}: bad magic {magic!r} at offset 0")
            (version,) = struct.unpack("<H", reader.read(2, "version"))
            if version != STORE_VERSION:
                raise StoreFormatError(
                    f"{path}: unsupported version {version} at offset 4"
                )
            (dim,) = struct.unpack("<I", reader.read(4, "dim"))
            name_off = reader.offset
            (name_len,) = struct.unpack("<I", reader.read(4, "embedder name length"))
            if name_len > _MAX_BLOB_BYTES:
                raise StoreFormatError(
                    f"{path}: embedder name length {name_len} at offset {name_off} is implausible"
                )
            embedder_name = reader.read(name_len, "embedder name").decode("utf-8")
            if expected_embedder is not None and embedder_name != expected_embedder:
                raise StoreFormatError(
                    f"{path}: store was built with embedder {embedder_name!r}, "
                    f"expected {expected_embedder!r}"
                )
            (count,) = struct.unpack("<Q", reader.read(8, "record count"))
            store = cls(dim=dim, embedder_name=embedder_name)
            for i in range(count):
                vec_bytes = reader.read(4 * dim, f"record {i} vector")
                vec = np.frombuffer(vec_bytes, dtype="<f4").astype(np.float32)
                blob_off = reader.offset
                (blob_len,) = struct.unpack("<I", reader.read(4, f"record {i} chunk length"))
                if blob_len > _MAX_BLOB_BYTES:
                    raise StoreFormatError(
                        f"{path}: record {i} chunk length {blob_len} at offset {blob_off} "
                        "is implausible"
                    )
                blob = reader.read(blob_len, f"record {i} chunk")
                try:
                    obj = json.loads(blob)
                    chunk = Chunk(
                        doc_id=obj["doc_id"],
                        seq=obj["seq"],
                        text=obj["text"],
                        token_start=obj["token_start"],
                        token_end=obj["token_end"],
                        kind=SourceKind(obj["kind"]),
                    )
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise StoreFormatError(
                        f"{path}: record {i} chunk at offset {blob_off} is invalid: {exc}"
                    ) from exc
                store._vectors.append(vec)
                store._chunks.append(chunk)
            trailing = f.read(1)
            if trailing:
                raise StoreFormatError(
                    f"{path}: trailing data at offset {reader.offset}"
                )
        return store


class _Reader:
    """Tracks the byte offset so truncation errors can name where they hit."""

    def __init__(self, f: BinaryIO):
        self.f = f
        self.offset = 0

    def read(self, n: int, what: str) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise StoreFormatError(
                f"truncated {what} at offset {self.offset}: wanted {n} bytes, got {len(data)}"
            )
        self.offset += n
        return data


def _chunk_json(chunk: Chunk) -> bytes:
    return json.dumps(
        {
            "doc_id": chunk.doc_id,
            "kind": chunk.kind.value,
            "seq": chunk.seq,
            "text": chunk.text,
            "token_end": chunk.token_end,
            "token_start": chunk.token_start,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
