"""Transcript embedding: chunked character-weighted averaging over a provider.

A provider turns text into a fixed-dim vector. Two implementations: a
deterministic offline mock (hash-seeded Gaussian vectors) and an HTTP
client for an external service. The chunking layer is provider-agnostic:
messages are ordered chronologically, concatenated into one transcript,
and embedded either whole or in overlapping chunks averaged with
character-count weights.
"""

from __future__ import annotations

import hashlib
import os
from typing import Protocol, Sequence

import httpx
import numpy as np

DEFAULT_CHUNK_CHARS = 6000
DEFAULT_OVERLAP_CHARS = 500

ENDPOINT_ENV = "EMBED_ENDPOINT"
API_KEY_ENV = "EMBED_API_KEY"


class EmbeddingError(RuntimeError):
    """Provider failure; safe to retry."""


class EmbeddingProvider(Protocol):
    def embed(self, text: str, dim: int) -> np.ndarray: ...


class HashEmbeddingProvider:
    """Offline deterministic provider: the text's digest seeds a Gaussian
    vector. Stable across processes and platforms."""

    def embed(self, text: str, dim: int) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "big")
        vec = np.random.default_rng(seed).standard_normal(dim)
        return vec / np.sqrt(dim)


class HttpEmbeddingProvider:
    """POSTs {"text", "dim"} to an embedding endpoint, expects {"embedding"}.

    Endpoint and bearer key default to the EMBED_ENDPOINT / EMBED_API_KEY
    environment variables.
    """

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 timeout: float = 30.0, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise EmbeddingError(f"no embedding endpoint: set {ENDPOINT_ENV}")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def embed(self, text: str, dim: int) -> np.ndarray:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._client.post(
                self.endpoint, json={"text": text, "dim": dim}, headers=headers
            )
            resp.raise_for_status()
            payload = resp.json()
        except httpx.HTTPError as e:
            raise EmbeddingError(f"embedding request failed: {e}") from e
        try:
            vec = np.asarray(payload["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise EmbeddingError(f"malformed embedding response: {e}") from e
        if vec.shape != (dim,):
            # oversized vectors are truncated to the requested dimension
            if vec.ndim == 1 and vec.size > dim:
                vec = vec[:dim]
            else:
                raise EmbeddingError(f"embedding dim {vec.shape} != ({dim},)")
        return vec


def split_chunks(text: str, chunk_chars: int, overlap_chars: int) -> list[str]:
    """Overlapping windows covering the whole text; the last may be shorter."""
    if chunk_chars <= 0 or overlap_chars < 0 or overlap_chars >= chunk_chars:
        raise ValueError("need 0 <= overlap_chars < chunk_chars")
    if len(text) <= chunk_chars:
        return [text] if text else []
    step = chunk_chars - overlap_chars
    chunks = []
    start = 0
    while True:
        chunks.append(text[start:start + chunk_chars])
        if start + chunk_chars >= len(text):
            return chunks
        start += step


def embed_transcript(messages: Sequence[tuple], provider: EmbeddingProvider,
                     dim: int, chunk_chars: int = DEFAULT_CHUNK_CHARS,
                     overlap_chars: int = DEFAULT_OVERLAP_CHARS) -> np.ndarray:
    """Embed one period's messages as a single transcript.

    messages: (timestamp, text) pairs in any order; sorted chronologically
    (stable) before concatenation. No messages, or only empty texts, yield
    the zero vector. A transcript within chunk_chars is embedded once and
    returned unchanged; longer transcripts are chunked with overlap and
    averaged with character-count weights.
    """
    ordered = sorted(messages, key=lambda m: m[0])
    transcript = "\n".join(text for _, text in ordered if text)
    if not transcript:
        return np.zeros(dim)
    if len(transcript) <= chunk_chars:
        return np.asarray(provider.embed(transcript, dim), dtype=np.float64)
    chunks = split_chunks(transcript, chunk_chars, overlap_chars)
    weights = np.array([len(c) for c in chunks], dtype=np.float64)
    vecs = np.stack([np.asarray(provider.embed(c, dim), dtype=np.float64) for c in chunks])
    return weights @ vecs / weights.sum()
