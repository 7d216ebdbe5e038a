"""Concept-embedding matrix: loading, projection into feature space, and
token-concept similarities.

The on-disk format is the contract with any external embedding exporter:

    { "dim": int, "normalized": bool,
      "concepts": [ {"name": str, "text": str, "vector": [float, ...]}, ... ] }

Row order in the file is the canonical concept index everywhere downstream
(router columns, affinity reports). The loader validates, never repairs:
vectors are L2-normalized in memory only when the header says they are not
already, and a zero vector is an error rather than a silent skip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ParameterError, ShapeError, ValidationError


@dataclass
class Concept:
    name: str
    text: str
    vector: np.ndarray


@dataclass
class ConceptMatrix:
    dim: int
    concepts: list[Concept]
    normalized: bool = True

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    @property
    def M(self) -> int:
        return len(self.concepts)

    def matrix(self) -> np.ndarray:
        return np.stack([c.vector for c in self.concepts], axis=0)

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.concepts):
            if c.name == name:
                return i
        raise KeyError(f"unknown concept {name!r}")


def _validate(dim: int, concepts: list[Concept]) -> None:
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    if not concepts:
        raise ValidationError("concept matrix must contain at least one concept")
    seen: set[str] = set()
    for i, c in enumerate(concepts):
        label = f"concept #{i + 1} ({c.name!r})"
        if not c.name:
            raise ValidationError(f"concept #{i + 1} has an empty name")
        if c.name in seen:
            raise ValidationError(f"duplicate concept name {c.name!r}")
        seen.add(c.name)
        if c.vector.shape != (dim,):
            raise ValidationError(
                f"{label} has vector length {c.vector.shape[0]}, expected dim={dim}")
        if not np.isfinite(c.vector).all():
            raise ValidationError(f"{label} contains a non-finite value")


def load_concept_matrix(path) -> ConceptMatrix:
    """Parse and validate a concept-matrix file; row order is preserved."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"concept file is not valid JSON: {e}") from e
    for key in ("dim", "normalized", "concepts"):
        if key not in raw:
            raise ValidationError(f"concept file is missing required field {key!r}")
    dim = int(raw["dim"])
    concepts = []
    for i, entry in enumerate(raw["concepts"]):
        for key in ("name", "text", "vector"):
            if key not in entry:
                raise ValidationError(
                    f"concept #{i + 1} is missing required field {key!r}")
        concepts.append(Concept(
            name=str(entry["name"]),
            text=str(entry["text"]),
            vector=np.asarray(entry["vector"], dtype=np.float64),
        ))
    _validate(dim, concepts)
    cm = ConceptMatrix(dim=dim, concepts=concepts, normalized=bool(raw["normalized"]))
    if not cm.normalized:
        for c in cm.concepts:
            norm = float(np.linalg.norm(c.vector))
            if norm == 0.0:
                raise ValidationError(
                    f"concept {c.name!r} has a zero vector and cannot be normalized")
            c.vector = c.vector / norm
        cm.normalized = True
    return cm


def save_concept_matrix(cm: ConceptMatrix, path) -> None:
    """Write the JSON format; float repr round-trips 64-bit exactly."""
    payload = {
        "dim": cm.dim,
        "normalized": cm.normalized,
        "concepts": [
            {"name": c.name, "text": c.text, "vector": [float(v) for v in c.vector]}
            for c in cm.concepts
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


@dataclass
class ConceptProjection:
    """Learnable map from concept space into one site's feature space."""

    site_id: tuple[int, str]
    weight: nm.Tensor  # (d_t, d_site)

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def freeze(self) -> None:
        self.weight.freeze()


def make_projection(site_id: tuple[int, str], d_t: int, d_site: int,
                    rng: nm.Rng) -> ConceptProjection:
    # scale keeps projected concept rows near unit norm
    w = nm.Tensor(rng.normal((d_t, d_site), std=1.0 / np.sqrt(d_t)),
                  requires_grad=True)
    return ConceptProjection(site_id=site_id, weight=w)


def project_concepts(cm: ConceptMatrix, proj: ConceptProjection) -> nm.Tensor:
    """Concept rows mapped into the site's feature space: (M, d_site)."""
    if proj.weight.shape[0] != cm.dim:
        raise ShapeError(
            f"projection expects concept dim {proj.weight.shape[0]}, matrix has {cm.dim}")
    return nm.matmul(nm.Tensor(cm.matrix()), proj.weight)


def concept_similarity(x: nm.Tensor, c_proj: nm.Tensor):
    """Token-concept inner products S and their token mean s̄.

    `x` is (N, d) or batched (B, N, d); `c_proj` is (M, d). Returns
    (S, s̄) shaped ((N, M), (M,)) or ((B, N, M), (B, M)).
    """
    if x.shape[-1] != c_proj.shape[-1]:
        raise ShapeError(
            f"feature widths disagree: tokens {x.shape} vs concepts {c_proj.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("concept_similarity over zero tokens")
    s = nm.matmul(x, nm.transpose(c_proj, (1, 0)))
    s_bar = nm.tmean(s, axis=-2)
    return s, s_bar


@dataclass
class TaskProfile:
    """Ground-truth concept activations of one synthetic task."""

    task_name: str
    activations: dict[str, float] = field(default_factory=dict)

    def concept_names(self) -> list[str]:
        return list(self.activations.keys())


def synth_concepts(task_profiles: list[TaskProfile], d_t: int,
                   seed: int) -> ConceptMatrix:
    """Deterministic stand-in concept matrix for fully offline runs.

    Concepts are the union of names referenced by the profiles, in first
    appearance order; rows are Gram-Schmidt-orthonormalized Gaussian draws,
    so any two rows have small cosine similarity when d_t is generous.
    """
    if d_t < 1:
        raise ParameterError(f"d_t must be >= 1, got {d_t}")
    names: list[str] = []
    for prof in task_profiles:
        for name in prof.concept_names():
            if not name:
                raise ValidationError(f"profile {prof.task_name!r} references an empty concept name")
            if name not in names:
                names.append(name)
    if not names:
        raise ValidationError("profiles reference no concepts")
    rng = nm.Rng(seed, 0xC0)
    rows: list[np.ndarray] = []
    for name in names:
        v = rng.normal((d_t,))
        for prev in rows:
            v = v - np.dot(v, prev) * prev
        norm = float(np.linalg.norm(v))
        if norm < 1e-9:
            raise ValidationError(
                f"could not orthogonalize concept {name!r}: increase d_t (need >= {len(names)})")
        rows.append(v / norm)
    concepts = [Concept(name=n, text=f"synthetic concept field {n!r}", vector=r)
                for n, r in zip(names, rows)]
    return ConceptMatrix(dim=d_t, concepts=concepts, normalized=True)
