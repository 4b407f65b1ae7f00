"""Ensembles of KDE sketches serving every prefix length up to L.

Two layouts are supported. The linear ensemble builds one sketch per prefix
length (k = 1..L), each at its ideal bandwidth u = 1/k and with an equal
share epsilon/L of the budget. The logarithmic ensemble builds sketches only
at power-of-two block counts (k = 1, 2, 4, ..., 2^ceil(log2 L)); a prefix of
length ell routes to the smallest sketch with k >= ell, so padding never
exceeds half the blocks, and the bandwidth u = 2/k stays within a factor two
of ideal, which caps the padding error blowup at exp(2).

Sketches inside an ensemble are built independently (per-sketch derived
seeds) and the ensemble is immutable after build; queries are pure.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .budget import as_epsilon, dumps_canonical
from .embeddings import EmbeddingTable, embed_prefix
from .kde import (
    DpKdeSketch,
    KdeEstimate,
    build_sketch,
    load_sketch,
    query_prefix,
    query_prefix_extensions,
    save_sketch,
)
from .randomness import child_seeds

logger = logging.getLogger(__name__)

ENSEMBLE_FORMAT = "dpkps-ensemble-v1"

LINEAR = "linear"
LOGARITHMIC = "logarithmic"


@dataclass(frozen=True)
class PrefixDataset:
    """One (block_dim * num_blocks)-vector per document.

    Exactly one row per contributing document, which is what preserves
    document-level adjacency for the sketch built on top.
    """

    block_dim: int
    num_blocks: int
    block_sq_norm: float
    vectors: np.ndarray


@dataclass(frozen=True)
class KdeEnsemble:
    kind: str
    max_len: int
    epsilon: Fraction
    sketches: tuple[DpKdeSketch, ...]

    @property
    def per_sketch_epsilon(self) -> Fraction:
        return self.epsilon / len(self.sketches)

    @property
    def block_dim(self) -> int:
        return self.sketches[0].block_dim


def linear_block_norm(num_blocks: int) -> float:
    """Ideal bandwidth for a length-k concatenation of unit embeddings."""
    return 1.0 / num_blocks


def log_block_norm(num_blocks: int) -> float:
    """Bandwidth for logarithmic-ensemble sketches.

    2/k keeps the padding blowup at most exp(2) for every routed query; the
    k=1 sketch serves only unpadded length-1 queries, so it keeps the ideal
    u = 1.
    """
    return 1.0 if num_blocks == 1 else 2.0 / num_blocks


def log_sketch_sizes(max_len: int) -> list[int]:
    """Power-of-two block counts 1, 2, ..., 2^ceil(log2 L)."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return [1 << j for j in range((max_len - 1).bit_length() + 1)]


def route_blocks(kind: str, prefix_len: int) -> int:
    """Block count of the sketch serving a given prefix length."""
    if kind == LINEAR:
        return prefix_len
    if kind == LOGARITHMIC:
        return 1 << (prefix_len - 1).bit_length()
    raise ValueError(f"unknown ensemble kind {kind!r}")


def build_prefix_datasets(
    term_lists: Sequence[Sequence[str]],
    table: EmbeddingTable,
    lengths: Sequence[int],
    block_sq_norms: Sequence[float],
) -> list[PrefixDataset]:
    """Build the per-document prefix vectors for each requested block count.

    A document shorter than k terms cycles its term list from the start, so
    every document still yields one full-geometry vector. Documents with no
    terms at all are skipped (with a logged count): they carry no keyphrase
    signal to sketch.
    """
    if len(lengths) != len(block_sq_norms):
        raise ValueError("lengths and block_sq_norms must be parallel")
    usable = [terms for terms in term_lists if len(terms) > 0]
    skipped = len(term_lists) - len(usable)
    if skipped:
        logger.warning("skipping %d documents with no extracted terms", skipped)
    if not usable:
        raise ValueError("no documents with extracted terms")
    unit_rows = [table.matrix(terms) for terms in usable]

    datasets = []
    for num_blocks, block_sq_norm in zip(lengths, block_sq_norms):
        scale = np.sqrt(block_sq_norm)
        vectors = np.empty((len(usable), table.dim * num_blocks), dtype=np.float64)
        for row, units in enumerate(unit_rows):
            idx = np.arange(num_blocks) % units.shape[0]
            vectors[row] = (scale * units[idx]).reshape(-1)
        datasets.append(
            PrefixDataset(
                block_dim=table.dim,
                num_blocks=num_blocks,
                block_sq_norm=block_sq_norm,
                vectors=vectors,
            )
        )
    return datasets


def _build(
    kind: str,
    term_lists: Sequence[Sequence[str]],
    table: EmbeddingTable,
    max_len: int,
    epsilon: Fraction | int | float | str,
    num_features: int,
    seed: int,
    noise_disabled: bool,
) -> KdeEnsemble:
    eps = as_epsilon(epsilon)
    if kind == LINEAR:
        lengths = list(range(1, max_len + 1))
        norms = [linear_block_norm(k) for k in lengths]
    else:
        lengths = log_sketch_sizes(max_len)
        norms = [log_block_norm(k) for k in lengths]
    per_sketch = eps / len(lengths)
    datasets = build_prefix_datasets(term_lists, table, lengths, norms)
    seeds = child_seeds(seed, len(lengths))
    sketches = tuple(
        build_sketch(
            ds.vectors,
            epsilon=per_sketch,
            num_features=num_features,
            block_dim=table.dim,
            block_sq_norm=ds.block_sq_norm,
            seed=sketch_seed,
            noise_disabled=noise_disabled,
        )
        for ds, sketch_seed in zip(datasets, seeds)
    )
    return KdeEnsemble(kind=kind, max_len=max_len, epsilon=eps, sketches=sketches)


def build_linear_ensemble(
    term_lists: Sequence[Sequence[str]],
    table: EmbeddingTable,
    max_len: int,
    epsilon: Fraction | int | float | str,
    num_features: int,
    seed: int,
    *,
    noise_disabled: bool = False,
) -> KdeEnsemble:
    """One sketch per prefix length 1..L, each with epsilon/L."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return _build(LINEAR, term_lists, table, max_len, epsilon, num_features, seed, noise_disabled)


def build_log_ensemble(
    term_lists: Sequence[Sequence[str]],
    table: EmbeddingTable,
    max_len: int,
    epsilon: Fraction | int | float | str,
    num_features: int,
    seed: int,
    *,
    noise_disabled: bool = False,
) -> KdeEnsemble:
    """Sketches at power-of-two block counts, each with an equal budget share."""
    return _build(
        LOGARITHMIC, term_lists, table, max_len, epsilon, num_features, seed, noise_disabled
    )


def route(ensemble: KdeEnsemble, prefix_len: int) -> DpKdeSketch:
    if not 1 <= prefix_len <= ensemble.max_len:
        raise ValueError(
            f"prefix length must be in 1..{ensemble.max_len}, got {prefix_len}"
        )
    wanted = route_blocks(ensemble.kind, prefix_len)
    for sketch in ensemble.sketches:
        if sketch.num_blocks == wanted:
            return sketch
    raise ValueError(f"ensemble has no sketch with {wanted} blocks")


def ensemble_query(
    ensemble: KdeEnsemble, prefix_terms: Sequence[str], table: EmbeddingTable
) -> KdeEstimate:
    """Prefix-KDE estimate for a sequence of 1..L terms.

    The query is embedded at the routed sketch's bandwidth, zero-padded to
    its block count, and scaled by the padding blowup factor.
    """
    ell = len(prefix_terms)
    sketch = route(ensemble, ell)
    block = embed_prefix(prefix_terms, table, sketch.block_sq_norm, pad_to=ell)
    return query_prefix(sketch, block.data, ell)


def score_extensions(
    ensemble: KdeEnsemble,
    prefix_terms: Sequence[str],
    candidate_units: np.ndarray,
    table: EmbeddingTable,
) -> np.ndarray:
    """Raw prefix-KDE scores for every one-term extension of a prefix.

    ``candidate_units`` holds one unit embedding per candidate term; rows are
    rescaled to the routed sketch's bandwidth here, so the same matrix can be
    reused across steps.
    """
    ell = len(prefix_terms) + 1
    sketch = route(ensemble, ell)
    scale = np.sqrt(sketch.block_sq_norm)
    if prefix_terms:
        prefix = (scale * table.matrix(prefix_terms)).reshape(-1)
    else:
        prefix = np.empty(0, dtype=np.float64)
    return query_prefix_extensions(sketch, prefix, scale * candidate_units)


def save_ensemble(ensemble: KdeEnsemble, directory: str | Path) -> None:
    """Write the ensemble manifest and one sketch file per block count."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sketch_entries = []
    for sketch in ensemble.sketches:
        name = f"sketch_k{sketch.num_blocks:04d}.json"
        save_sketch(sketch, directory / name)
        sketch_entries.append(
            {
                "num_blocks": sketch.num_blocks,
                "block_sq_norm": sketch.block_sq_norm,
                "epsilon": str(sketch.epsilon),
                "num_features": sketch.num_features,
                "dataset_size": sketch.dataset_size,
                "seed": sketch.seed,
                "path": name,
            }
        )
    manifest = {
        "format": ENSEMBLE_FORMAT,
        "kind": ensemble.kind,
        "max_len": ensemble.max_len,
        "epsilon": str(ensemble.epsilon),
        "block_dim": ensemble.block_dim,
        "sketches": sketch_entries,
    }
    (directory / "ensemble.json").write_text(dumps_canonical(manifest), encoding="utf-8")


def load_ensemble(directory: str | Path) -> KdeEnsemble:
    directory = Path(directory)
    manifest = json.loads((directory / "ensemble.json").read_text(encoding="utf-8"))
    if manifest.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"{directory}: unrecognized ensemble format")
    sketches = tuple(
        load_sketch(directory / entry["path"]) for entry in manifest["sketches"]
    )
    ensemble = KdeEnsemble(
        kind=manifest["kind"],
        max_len=manifest["max_len"],
        epsilon=Fraction(manifest["epsilon"]),
        sketches=sketches,
    )
    declared = sum((s.epsilon for s in sketches), Fraction(0))
    if declared != ensemble.epsilon:
        raise ValueError(
            f"{directory}: sketch epsilons sum to {declared}, "
            f"manifest declares {ensemble.epsilon}"
        )
    return ensemble
