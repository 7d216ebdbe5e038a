"""Embed concept texts into the concept-matrix JSON contract.

Input: a concept list file {"concepts": [{"name": str, "text": str}, ...]}.
Output: {"dim": int, "normalized": true, "concepts": [{"name", "text",
"vector"}, ...]} with L2-normalized vectors, the exact format the
segmentation side loads. Embeddings come from a pluggable backend; the
built-in "hash" backend is fully offline and deterministic.
"""

from .embed import HashEmbedder, resolve_embedder
from .export import export_concepts, load_concept_list, validate_concept_list

__all__ = [
    "HashEmbedder",
    "resolve_embedder",
    "export_concepts",
    "load_concept_list",
    "validate_concept_list",
]

__version__ = "0.1.0"
