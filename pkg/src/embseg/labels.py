"""Label records, cosine retrieval, and zero-shot label-space extension.

A label is a (name, description, embedding) record; the embedding is input
data, never computed here. Raw vectors are kept as given and normalized
into the derived matrix ``E``, so retrieval and similarity share one
normalization policy with the model head.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from embseg.autodiff import NORM_EPS, DomainError


@dataclass(frozen=True)
class LabelRecord:
    """One label; ``id`` is its row in the owning space."""

    id: int
    name: str
    description: str
    embedding: np.ndarray


@dataclass(frozen=True)
class LabelSpace:
    """Immutable ordered label set with row-normalized embedding matrix ``E``."""

    records: tuple[LabelRecord, ...]
    dim: int
    E: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.records]


def _normalized_rows(raw: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms < NORM_EPS):
        bad = int(np.argmin(norms))
        raise DomainError(f"label {bad}: zero-norm embedding")
    return raw / (norms + NORM_EPS)


def make_label_space(names, descriptions, embeddings) -> LabelSpace:
    """Assemble a LabelSpace from parallel sequences; ids follow input order."""
    raw = np.asarray(embeddings, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"embeddings must be a 2-D array, got shape {raw.shape}")
    if not (len(names) == len(descriptions) == raw.shape[0]):
        raise ValueError("names, descriptions and embeddings disagree in length")
    if not np.all(np.isfinite(raw)):
        raise DomainError("embeddings contain non-finite entries")
    records = tuple(
        LabelRecord(i, str(n), str(d), raw[i].copy())
        for i, (n, d) in enumerate(zip(names, descriptions))
    )
    return LabelSpace(records, raw.shape[1], _normalized_rows(raw))


def load_label_space(source) -> LabelSpace:
    """Read a JSON-lines file of {"name", "description", "embedding"} objects.

    Record order equals file order; ids are assigned 0..N-1. Parse failures
    report the 1-based line number.
    """
    names: list[str] = []
    descriptions: list[str] = []
    vectors: list[list[float]] = []
    dim: int | None = None
    with open(source, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{source}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{source}: line {lineno}: expected a JSON object")
            missing = [k for k in ("name", "description", "embedding") if k not in obj]
            if missing:
                raise ValueError(f"{source}: line {lineno}: missing keys {missing}")
            vec = obj["embedding"]
            if not isinstance(vec, list) or not vec or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec
            ):
                raise ValueError(f"{source}: line {lineno}: embedding must be a non-empty number list")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ValueError(
                    f"{source}: line {lineno}: embedding dimension {len(vec)} != {dim}"
                )
            names.append(str(obj["name"]))
            descriptions.append(str(obj["description"]))
            vectors.append([float(v) for v in vec])
    if not vectors:
        raise ValueError(f"{source}: no label records found")
    return make_label_space(names, descriptions, vectors)


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), clipped to [-1, 1]; denominators carry the norm guard."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"cosine_similarity: expected equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        raise DomainError("cosine_similarity: zero-norm input")
    value = float(np.dot(a, b) / ((na + NORM_EPS) * (nb + NORM_EPS)))
    return min(1.0, max(-1.0, value))


def similarity_matrix(space: LabelSpace) -> np.ndarray:
    """All-pairs cosine similarity; built from the upper triangle and mirrored."""
    n = len(space)
    s = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i, n):
            s[i, j] = cosine_similarity(space.E[i], space.E[j])
            s[j, i] = s[i, j]
    return s


def extend(space: LabelSpace, name: str, description: str, embedding) -> LabelSpace:
    """Return a new space with one record appended at id N; input is unmodified."""
    vec = np.asarray(embedding, dtype=np.float64)
    if vec.shape != (space.dim,):
        raise ValueError(f"extend: embedding shape {vec.shape} does not match dim {space.dim}")
    if name in {r.name for r in space.records}:
        warnings.warn(f"extend: duplicate label name {name!r}; names are not keys", stacklevel=2)
    record = LabelRecord(len(space), str(name), str(description), vec.copy())
    raw = np.vstack([np.stack([r.embedding for r in space.records]), vec[None, :]])
    return LabelSpace(space.records + (record,), space.dim, _normalized_rows(raw))


def retrieve(space: LabelSpace, v) -> tuple[int, float]:
    """Nearest label by cosine; ties break to the lowest id."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (space.dim,):
        raise ValueError(f"retrieve: query shape {v.shape} does not match dim {space.dim}")
    nv = np.linalg.norm(v)
    if nv < NORM_EPS:
        raise DomainError("retrieve: zero-norm query")
    scores = space.E @ (v / (nv + NORM_EPS))
    best = int(np.argmax(scores))  # argmax returns the first (lowest) index on ties
    return best, float(min(1.0, max(-1.0, scores[best])))


def export_similarity_csv(space: LabelSpace, path) -> None:
    """Write the similarity matrix as CSV: header of names, 9 significant digits."""
    s = similarity_matrix(space)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(space.names)
        for row in s:
            writer.writerow([format(x, ".9g") for x in row])


def block_similarity_summary(space: LabelSpace, blocks) -> tuple[float, float]:
    """(mean within-block, mean cross-block) off-diagonal cosine similarity."""
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.shape != (len(space),):
        raise ValueError(f"blocks must assign one id per label, got shape {blocks.shape}")
    s = similarity_matrix(space)
    same = blocks[:, None] == blocks[None, :]
    off = ~np.eye(len(space), dtype=bool)
    within = s[same & off]
    cross = s[~same]
    if within.size == 0 or cross.size == 0:
        raise ValueError("blocks summary needs at least one within-block and one cross-block pair")
    return float(within.mean()), float(cross.mean())


def export_label_space(space: LabelSpace, path) -> None:
    """Write the space back out as JSONL with row-normalized embeddings."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in space.records:
            fh.write(
                json.dumps(
                    {
                        "name": r.name,
                        "description": r.description,
                        "embedding": [float(x) for x in space.E[r.id]],
                    }
                )
                + "\n"
            )
