"""Term embedding table and block-vector construction for KDE queries.

Embedding files use the whitespace text format: ``term v1 v2 ... vd`` per
line, with underscores standing in for internal spaces in multi-word terms.
Vectors are normalized to unit Euclidean norm on load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class UnknownTermError(Exception):
    """A term has no embedding."""

    def __init__(self, term: str):
        super().__init__(f"no embedding for term {term!r}")
        self.term = term


@dataclass(frozen=True)
class EmbeddingTable:
    """Unit-normalized d-dimensional vectors keyed by term."""

    dim: int
    vectors: dict[str, np.ndarray]

    def __contains__(self, term: str) -> bool:
        return term in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def vector(self, term: str) -> np.ndarray:
        try:
            return self.vectors[term]
        except KeyError:
            raise UnknownTermError(term) from None

    def matrix(self, terms: Sequence[str]) -> np.ndarray:
        """Stack unit vectors for ``terms`` into a (len(terms), dim) array."""
        out = np.empty((len(terms), self.dim), dtype=np.float64)
        for row, term in enumerate(terms):
            out[row] = self.vector(term)
        return out


@dataclass(frozen=True)
class BlockVector:
    """Concatenation of scaled unit embeddings plus trailing zero blocks.

    Every real block has squared norm ``block_sq_norm``; padding blocks are
    all zeros. The total squared norm is block_sq_norm * (number of real
    blocks), exactly.
    """

    data: np.ndarray
    blocks: int
    block_sq_norm: float

    @property
    def block_dim(self) -> int:
        return self.data.shape[0] // self.blocks


def table_from_vectors(raw: dict[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> EmbeddingTable:
    """Build a table from raw (term, vector) pairs, normalizing each vector."""
    items = raw.items() if isinstance(raw, dict) else raw
    vectors: dict[str, np.ndarray] = {}
    dim = None
    for term, vec in items:
        arr = np.asarray(vec, dtype=np.float64)
        if dim is None:
            dim = arr.shape[0]
        elif arr.shape[0] != dim:
            raise ValueError(f"term {term!r}: expected dimension {dim}, got {arr.shape[0]}")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ValueError(f"term {term!r} has a zero vector")
        vectors[term] = arr / norm
    if dim is None:
        raise ValueError("no vectors supplied")
    return EmbeddingTable(dim=dim, vectors=vectors)


def load_embeddings(path: str | Path, expected_dim: int) -> EmbeddingTable:
    """Load a whitespace-format embedding file.

    Raises with the offending 1-based line number on a dimension mismatch,
    duplicate term, or zero-norm vector.
    """
    if expected_dim < 1:
        raise ValueError(f"expected_dim must be >= 1, got {expected_dim}")
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            term = parts[0].replace("_", " ")
            if len(parts) - 1 != expected_dim:
                raise ValueError(
                    f"{path}:{lineno}: term {term!r} has {len(parts) - 1} values, "
                    f"expected {expected_dim}"
                )
            if term in vectors:
                raise ValueError(f"{path}:{lineno}: duplicate term {term!r}")
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ValueError(f"{path}:{lineno}: term {term!r} has a zero vector")
            vectors[term] = vec / norm
    return EmbeddingTable(dim=expected_dim, vectors=vectors)


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Inverse of load_embeddings, mostly for fixtures and toy corpora."""
    with open(path, "w", encoding="utf-8") as handle:
        for term, vec in table.vectors.items():
            name = term.replace(" ", "_")
            values = " ".join(repr(float(v)) for v in vec)
            handle.write(f"{name} {values}\n")


def embed_prefix(
    terms: Sequence[str],
    table: EmbeddingTable,
    block_sq_norm: float,
    pad_to: int,
) -> BlockVector:
    """Concatenate scaled term embeddings and zero-pad to ``pad_to`` blocks.

    Each unit embedding is scaled by sqrt(block_sq_norm), which is how the
    kernel bandwidth is realized: scaling all inputs by sigma is equivalent
    to dividing squared distances by sigma^-2.
    """
    if block_sq_norm <= 0:
        raise ValueError(f"block_sq_norm must be positive, got {block_sq_norm}")
    if pad_to < len(terms):
        raise ValueError(f"cannot pad {len(terms)} blocks down to {pad_to}")
    data = np.zeros(table.dim * pad_to, dtype=np.float64)
    scale = np.sqrt(block_sq_norm)
    for i, term in enumerate(terms):
        data[i * table.dim : (i + 1) * table.dim] = scale * table.vector(term)
    return BlockVector(data=data, blocks=pad_to, block_sq_norm=block_sq_norm)
