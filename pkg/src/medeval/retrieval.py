"""Exemplar retrieval: chunking, embedding backends, and an exact search index.

The index is a brute-force scan by design. Training corpora here are a few
thousand chunks, where exact search is both fast enough and the reference
behavior that approximate backends would have to match.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .text import tokenize

logger = logging.getLogger(__name__)

INDEX_FORMAT = "medeval-index"
INDEX_VERSION = 1


class RetrievalError(Exception):
    """Base for retrieval failures."""


class InvalidConfig(RetrievalError):
    pass


class DimensionMismatch(RetrievalError):
    pass


class ZeroVector(RetrievalError):
    """Cosine similarity is undefined for a zero-magnitude vector."""


class EmptyIndex(RetrievalError):
    pass


class NonTrainDocument(RetrievalError):
    def __init__(self, note_id: str):
        self.note_id = note_id
        super().__init__(f"document {note_id!r} is not in the training split")


class StaleIndex(RetrievalError):
    """Persisted index no longer matches the current configuration or corpus."""


class BackendUnavailable(RetrievalError):
    def __init__(self, message: str, retry_after: float | None = None):
        self.retry_after = retry_after
        super().__init__(message)


class Metric(str, Enum):
    COSINE = "cosine"
    DOT = "dot"


@dataclass(frozen=True, slots=True)
class ChunkConfig:
    max_len: int = 2000
    overlap: int = 200
    separators: tuple[str, ...] = ("\n\n", "\n", " ", "")

    def __post_init__(self):
        if self.max_len < 1:
            raise InvalidConfig(f"max_len must be positive, got {self.max_len}")
        if not 0 <= self.overlap < self.max_len:
            raise InvalidConfig(f"overlap must satisfy 0 <= overlap < max_len, got {self.overlap}")
        if not self.separators or self.separators[-1] != "":
            raise InvalidConfig("separators must be non-empty and end with \"\"")

    def to_dict(self) -> dict:
        return {"max_len": self.max_len, "overlap": self.overlap,
                "separators": list(self.separators)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChunkConfig":
        return cls(max_len=d["max_len"], overlap=d["overlap"],
                   separators=tuple(d["separators"]))


@dataclass(frozen=True, slots=True)
class Chunk:
    chunk_id: str
    note_id: str
    start: int
    end: int
    text: str


@dataclass(frozen=True, slots=True)
class ExemplarDocument:
    note_id: str
    rendered_text: str


def _atomize(piece: str, separators: Sequence[str], max_len: int) -> list[str]:
    """Split into fragments <= max_len, preferring earlier separators.

    Separators stay attached to the preceding fragment so that concatenating
    fragments reproduces the input exactly.
    """
    if len(piece) <= max_len:
        return [piece]
    if not separators or separators[0] == "":
        return [piece[i:i + max_len] for i in range(0, len(piece), max_len)]
    sep, rest = separators[0], separators[1:]
    parts = piece.split(sep)
    if len(parts) == 1:
        return _atomize(piece, rest, max_len)
    segments = [p + sep for p in parts[:-1]]
    if parts[-1]:
        segments.append(parts[-1])
    out: list[str] = []
    for seg in segments:
        if len(seg) <= max_len:
            out.append(seg)
        else:
            out.extend(_atomize(seg, rest, max_len))
    return out


def chunk_document(note_id: str, text: str, cfg: ChunkConfig) -> list[Chunk]:
    """Window a document into chunks of at most cfg.max_len characters.

    Every internal boundary shares exactly cfg.overlap characters with the
    previous chunk, so dropping the first cfg.overlap characters of each
    chunk after the first reassembles the source text exactly.
    """
    if not text:
        return []
    n = len(text)
    if n <= cfg.max_len:
        return [Chunk(f"{note_id}#0", note_id, 0, n, text)]
    cuts: list[int] = []
    pos = 0
    for atom in _atomize(text, cfg.separators, cfg.max_len):
        pos += len(atom)
        cuts.append(pos)
    spans: list[tuple[int, int]] = []
    s = 0
    while True:
        limit = s + cfg.max_len
        if n <= limit:
            spans.append((s, n))
            break
        # furthest atom boundary that still makes progress past the overlap
        lo = bisect.bisect_right(cuts, s + cfg.overlap)
        hi = bisect.bisect_right(cuts, limit)
        e = cuts[hi - 1] if hi > lo else limit
        spans.append((s, e))
        s = e - cfg.overlap
    return [Chunk(f"{note_id}#{i}", note_id, a, b, text[a:b])
            for i, (a, b) in enumerate(spans)]


class Embedder(Protocol):
    identity: str
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashedEmbedder:
    """Deterministic fallback: feature-hashed unigram bag of words.

    Token counts are hashed into a fixed number of signed buckets and the
    result is L2-normalized. No network, no model weights, stable across
    platforms and runs.
    """

    def __init__(self, dim: int = 512):
        if dim < 1:
            raise InvalidConfig(f"dim must be positive, got {dim}")
        self.dim = dim
        self.identity = f"hashed-bow-v1/{dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            for token in tokenize(text):
                h = hashlib.sha256(token.encode("utf-8")).digest()
                bucket = int.from_bytes(h[:8], "big") % self.dim
                sign = 1.0 if h[8] & 1 else -1.0
                out[i, bucket] += sign
            norm = math.sqrt(float(np.dot(out[i], out[i])))
            if norm > 0.0:
                out[i] /= norm
        return out


class RemoteEmbedder:
    """Embedding API client (OpenAI-style /embeddings request shape)."""

    def __init__(self, endpoint: str, model: str, credential_env: str,
                 dim: int | None = None, batch_size: int = 64,
                 timeout: float = 30.0, max_attempts: int = 3,
                 base_backoff: float = 0.5):
        self.endpoint = endpoint
        self.model = model
        self.credential_env = credential_env
        self.dim = dim or 0  # discovered on first response when not pinned
        self.batch_size = batch_size
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.base_backoff = base_backoff
        self.identity = f"remote/{model}"

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.credential_env)
        if not key:
            raise InvalidConfig(f"credential env var {self.credential_env!r} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _post(self, batch: list[str]) -> list[list[float]]:
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = requests.post(
                    self.endpoint,
                    headers=self._headers(),
                    json={"model": self.model, "input": batch},
                    timeout=self.timeout,
                )
                if resp.status_code == 200:
                    data = resp.json()["data"]
                    return [row["embedding"] for row in data]
                if resp.status_code not in (429, 500, 502, 503, 504):
                    raise BackendUnavailable(
                        f"embedding backend returned {resp.status_code}: {resp.text[:200]}"
                    )
                last = BackendUnavailable(f"embedding backend returned {resp.status_code}")
            except requests.RequestException as exc:
                last = BackendUnavailable(f"embedding request failed: {exc}")
            if attempt < self.max_attempts:
                time.sleep(self.base_backoff * 2 ** (attempt - 1))
        raise last if last else BackendUnavailable("embedding backend unavailable")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows: list[list[float]] = []
        for i in range(0, len(texts), self.batch_size):
            rows.extend(self._post(list(texts[i:i + self.batch_size])))
        if len(rows) != len(texts):
            raise BackendUnavailable("embedding backend returned wrong item count")
        if rows:
            if self.dim == 0:
                self.dim = len(rows[0])
            for row in rows:
                if len(row) != self.dim:
                    raise DimensionMismatch(
                        f"expected dim {self.dim}, got {len(row)} from backend"
                    )
        return np.asarray(rows, dtype=np.float64).reshape(len(texts), self.dim)


def embed(texts: Sequence[str], backend: Embedder) -> np.ndarray:
    """Embed texts, validating shape and finiteness."""
    mat = backend.embed(texts)
    if mat.shape != (len(texts), backend.dim):
        raise DimensionMismatch(
            f"backend returned shape {mat.shape}, expected ({len(texts)}, {backend.dim})"
        )
    if not np.isfinite(mat).all():
        raise RetrievalError("backend returned non-finite embedding values")
    return mat


def similarity(a: np.ndarray, b: np.ndarray, metric: Metric = Metric.COSINE) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector shapes differ: {a.shape} vs {b.shape}")
    dot = float(np.dot(a, b))
    if metric is Metric.DOT:
        return dot
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity with a zero vector")
    return dot / (na * nb)


@dataclass(frozen=True, slots=True)
class ScoredDoc:
    note_id: str
    score: float
    chunk_id: str


@dataclass
class ExemplarIndex:
    chunks: list[Chunk]
    matrix: np.ndarray  # (n_chunks, dim) float64
    docs: dict[str, str]  # note_id -> rendered exemplar text
    backend_identity: str
    dim: int
    chunk_config: ChunkConfig
    corpus_fingerprint: str
    embedder: Embedder | None = field(default=None, repr=False, compare=False)

    @property
    def note_ids(self) -> frozenset[str]:
        return frozenset(self.docs)


def build_index(
    docs: Sequence[ExemplarDocument],
    *,
    embedder: Embedder,
    chunk_config: ChunkConfig = ChunkConfig(),
    train_ids: frozenset[str] | set[str],
    corpus_fingerprint: str,
    batch_size: int = 64,
) -> ExemplarIndex:
    """Chunk and embed training exemplars into a searchable index.

    Raises NonTrainDocument if any document id is outside train_ids; the
    train/test wall is enforced here, at construction.
    """
    for doc in docs:
        if doc.note_id not in train_ids:
            raise NonTrainDocument(doc.note_id)
    seen: set[str] = set()
    for doc in docs:
        if doc.note_id in seen:
            raise InvalidConfig(f"duplicate document id {doc.note_id!r}")
        seen.add(doc.note_id)
    chunks: list[Chunk] = []
    for doc in docs:
        chunks.extend(chunk_document(doc.note_id, doc.rendered_text, chunk_config))
    texts = [c.text for c in chunks]
    parts = [embed(texts[i:i + batch_size], embedder) for i in range(0, len(texts), batch_size)]
    matrix = np.vstack(parts) if parts else np.zeros((0, embedder.dim), dtype=np.float64)
    logger.info("indexed %d documents as %d chunks (dim=%d, backend=%s)",
                len(docs), len(chunks), embedder.dim, embedder.identity)
    return ExemplarIndex(
        chunks=chunks,
        matrix=matrix,
        docs={d.note_id: d.rendered_text for d in docs},
        backend_identity=embedder.identity,
        dim=embedder.dim,
        chunk_config=chunk_config,
        corpus_fingerprint=corpus_fingerprint,
        embedder=embedder,
    )


def retrieve_by_vector(index: ExemplarIndex, query: np.ndarray, k: int,
                       metric: Metric = Metric.COSINE) -> list[ScoredDoc]:
    """Exact top-k over all chunks, deduplicated to one best chunk per document.

    Ties are broken by ascending note_id; equal-scoring chunks within one
    document resolve to the earliest chunk.
    """
    if not index.chunks:
        raise EmptyIndex("index has no chunks")
    if k < 1:
        raise InvalidConfig(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionMismatch(f"query shape {q.shape}, index dim {index.dim}")
    dots = index.matrix @ q
    if metric is Metric.COSINE:
        qn = math.sqrt(float(np.dot(q, q)))
        if qn == 0.0:
            raise ZeroVector("cosine similarity with a zero query vector")
        norms = np.sqrt(np.einsum("ij,ij->i", index.matrix, index.matrix))
        if np.any(norms == 0.0):
            bad = index.chunks[int(np.argmin(norms))].chunk_id
            raise ZeroVector(f"chunk {bad} has a zero-magnitude embedding")
        scores = dots / (norms * qn)
    else:
        scores = dots
    best: dict[str, tuple[float, str]] = {}
    for chunk, score in zip(index.chunks, scores.tolist()):
        cur = best.get(chunk.note_id)
        if cur is None or score > cur[0]:
            best[chunk.note_id] = (score, chunk.chunk_id)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0]))
    if k > len(ranked):
        logger.debug("k=%d exceeds document count %d, returning all", k, len(ranked))
    return [ScoredDoc(note_id, score, chunk_id)
            for note_id, (score, chunk_id) in ranked[:k]]


def retrieve(index: ExemplarIndex, query_text: str, k: int,
             metric: Metric = Metric.COSINE) -> list[ScoredDoc]:
    if index.embedder is None:
        raise InvalidConfig("index has no live embedder attached")
    if index.embedder.identity != index.backend_identity:
        raise StaleIndex(
            f"index built with {index.backend_identity!r}, "
            f"attached embedder is {index.embedder.identity!r}"
        )
    q = embed([query_text], index.embedder)[0]
    return retrieve_by_vector(index, q, k, metric)


def save_index(index: ExemplarIndex, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "backend": index.backend_identity,
        "dim": index.dim,
        "chunk_config": index.chunk_config.to_dict(),
        "corpus_fingerprint": index.corpus_fingerprint,
        "chunks": len(index.chunks),
        "docs": len(index.docs),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=True) + "\n")
        for note_id, text in index.docs.items():
            fh.write(json.dumps({"kind": "doc", "note_id": note_id, "text": text},
                                sort_keys=True, ensure_ascii=True) + "\n")
        for i, chunk in enumerate(index.chunks):
            fh.write(json.dumps({
                "kind": "chunk", "chunk_id": chunk.chunk_id, "note_id": chunk.note_id,
                "start": chunk.start, "end": chunk.end, "text": chunk.text,
                "embedding": index.matrix[i].tolist(),
            }, sort_keys=True, ensure_ascii=True) + "\n")


def load_index(path: str | Path, embedder: Embedder | None = None) -> ExemplarIndex:
    """Load a persisted index. If an embedder is supplied its identity must match."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise StaleIndex(f"{path}: malformed index header") from exc
        if header.get("format") != INDEX_FORMAT:
            raise StaleIndex(f"{path}: not an index file")
        if header.get("version") != INDEX_VERSION:
            raise StaleIndex(f"{path}: unsupported index version {header.get('version')!r}")
        docs: dict[str, str] = {}
        chunks: list[Chunk] = []
        rows: list[list[float]] = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["kind"] == "doc":
                docs[rec["note_id"]] = rec["text"]
            else:
                chunks.append(Chunk(rec["chunk_id"], rec["note_id"],
                                    rec["start"], rec["end"], rec["text"]))
                rows.append(rec["embedding"])
    dim = header["dim"]
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim) if rows \
        else np.zeros((0, dim), dtype=np.float64)
    if embedder is not None and embedder.identity != header["backend"]:
        raise StaleIndex(
            f"{path}: built with backend {header['backend']!r}, "
            f"current backend is {embedder.identity!r}; rebuild with the index command"
        )
    return ExemplarIndex(
        chunks=chunks,
        matrix=matrix,
        docs=docs,
        backend_identity=header["backend"],
        dim=dim,
        chunk_config=ChunkConfig.from_dict(header["chunk_config"]),
        corpus_fingerprint=header["corpus_fingerprint"],
        embedder=embedder,
    )


def check_index_fresh(index: ExemplarIndex, *, backend_identity: str,
                      chunk_config: ChunkConfig, corpus_fingerprint: str) -> None:
    """Raise StaleIndex naming each aspect that drifted from the current config."""
    problems = []
    if index.backend_identity != backend_identity:
        problems.append(f"backend {index.backend_identity!r} != {backend_identity!r}")
    if index.chunk_config != chunk_config:
        problems.append("chunk configuration changed")
    if index.corpus_fingerprint != corpus_fingerprint:
        problems.append("training corpus changed")
    if problems:
        raise StaleIndex("stale index (" + "; ".join(problems) + "); rerun the index command")
