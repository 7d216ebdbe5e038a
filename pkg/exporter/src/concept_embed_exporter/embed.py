"""Text-embedding backends.

Model identifiers:

  hash:<dim>        feature-hashed character n-grams, offline, deterministic
  st:<model-name>   sentence-transformers model (needs the optional extra
                    and a downloadable/cached model)
"""

from __future__ import annotations

import hashlib

import numpy as np


class EmbedderError(RuntimeError):
    """Backend could not be constructed or produced unusable vectors."""


class HashEmbedder:
    """Feature-hashed character n-gram embedding, L2-normalized.

    Deterministic across platforms: buckets and signs come from blake2b
    digests of the n-grams, not from Python's randomized hash.
    """

    def __init__(self, dim: int = 64, ngram: tuple[int, int] = (3, 5)):
        if dim < 2:
            raise EmbedderError(f"hash embedder dim must be >= 2, got {dim}")
        self.dim = dim
        self.ngram = ngram

    def _grams(self, text: str):
        padded = f"  {text.lower().strip()}  "
        for n in range(self.ngram[0], self.ngram[1] + 1):
            for i in range(len(padded) - n + 1):
                yield padded[i : i + n]

    def encode(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for gram in self._grams(text):
                digest = hashlib.blake2b(gram.encode("utf-8"),
                                         digest_size=8).digest()
                value = int.from_bytes(digest, "little")
                bucket = value % self.dim
                sign = 1.0 if (value >> 32) & 1 else -1.0
                out[row, bucket] += sign
            norm = float(np.linalg.norm(out[row]))
            if norm == 0.0:
                raise EmbedderError(f"text {text!r} produced an empty embedding")
            out[row] /= norm
        return out


class SentenceTransformerEmbedder:
    """Thin wrapper over sentence-transformers; optional dependency."""

    def __init__(self, model_name: str):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as e:
            raise EmbedderError(
                "sentence-transformers is not installed; use the 'st' extra "
                "or the hash:<dim> backend") from e
        try:
            self._model = SentenceTransformer(model_name)
        except Exception as e:
            raise EmbedderError(f"could not load model {model_name!r}: {e}") from e
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str]) -> np.ndarray:
        vecs = np.asarray(self._model.encode(texts, convert_to_numpy=True),
                          dtype=np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if (norms == 0.0).any():
            raise EmbedderError("model produced a zero embedding")
        return vecs / norms


def resolve_embedder(model_id: str):
    """Build the backend named by `model_id`; see module docstring."""
    if model_id.startswith("hash:"):
        return HashEmbedder(dim=int(model_id.split(":", 1)[1]))
    if model_id == "hash":
        return HashEmbedder()
    if model_id.startswith("st:"):
        return SentenceTransformerEmbedder(model_id.split(":", 1)[1])
    raise EmbedderError(
        f"unknown model id {model_id!r}; expected hash[:<dim>] or st:<name>")
