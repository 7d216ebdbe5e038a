"""Concept-list validation and concept-matrix emission."""

from __future__ import annotations

import json
from pathlib import Path


class ConceptListError(ValueError):
    """The concept list file is malformed; message names the offender."""


def load_concept_list(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConceptListError(f"concept list is not valid JSON: {e}") from e
    if "concepts" not in raw:
        raise ConceptListError("concept list is missing the 'concepts' field")
    concepts = raw["concepts"]
    validate_concept_list(concepts)
    return concepts


def validate_concept_list(concepts: list[dict]) -> None:
    if not concepts:
        raise ConceptListError("concept list is empty")
    seen: set[str] = set()
    for i, entry in enumerate(concepts):
        for key in ("name", "text"):
            if key not in entry:
                raise ConceptListError(f"concept #{i + 1} is missing {key!r}")
        name, text = str(entry["name"]), str(entry["text"])
        if not name:
            raise ConceptListError(f"concept #{i + 1} has an empty name")
        if not text.strip():
            raise ConceptListError(f"concept {name!r} has an empty text")
        if name in seen:
            raise ConceptListError(f"duplicate concept name {name!r}")
        seen.add(name)


def export_concepts(concepts: list[dict], embedder, out_path) -> dict:
    """Embed the texts and write the concept-matrix JSON; returns the payload.

    Vectors are L2-normalized by the backend contract and serialized with
    full round-trip precision (Python float repr).
    """
    texts = [str(e["text"]) for e in concepts]
    vectors = embedder.encode(texts)
    if vectors.shape != (len(concepts), embedder.dim):
        raise ConceptListError(
            f"backend returned shape {vectors.shape}, expected "
            f"({len(concepts)}, {embedder.dim})")
    payload = {
        "dim": int(embedder.dim),
        "normalized": True,
        "concepts": [
            {"name": str(e["name"]), "text": str(e["text"]),
             "vector": [float(v) for v in row]}
            for e, row in zip(concepts, vectors)
        ],
    }
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    return payload
