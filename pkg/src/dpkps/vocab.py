"""Private vocabulary selection from a Laplace-noised term histogram.

Each document contributes its first ``s_per_doc`` extracted terms, so one
document changes at most ``s_per_doc`` histogram counts by one each (L1
sensitivity ``s_per_doc``). Adding Laplace(s_per_doc / epsilon) noise to
EVERY vocabulary bin, observed or not, makes the histogram epsilon-DP, and
taking the top N noisy counts is free post-processing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .budget import as_epsilon, dumps_canonical
from .corpus import ExtractedSequence, PublicVocabulary
from .randomness import laplace

logger = logging.getLogger(__name__)

VOCAB_MANIFEST_FORMAT = "dpkps-private-vocab-v1"


@dataclass(frozen=True)
class NoisyHistogram:
    """Noisy per-term counts over the full public vocabulary."""

    counts: np.ndarray
    epsilon: Fraction
    s_per_doc: int

    @property
    def scale(self) -> float:
        """Laplace scale b = s_per_doc / epsilon."""
        return float(Fraction(self.s_per_doc) / self.epsilon)


@dataclass(frozen=True)
class PrivatizedVocabulary:
    """Top-N terms by noisy count; safe to release and enumerate.

    ``term_ids`` index the source public vocabulary in descending noisy-count
    order. ``phrases`` carries the resolved strings when known (always, for
    vocabularies loaded from a release file).
    """

    term_ids: tuple[int, ...]
    epsilon: Fraction
    phrases: tuple[str, ...] | None = None

    @property
    def size(self) -> int:
        return len(self.term_ids)


def build_histogram(sequences: Sequence[ExtractedSequence], vocab_size: int) -> np.ndarray:
    """Count term occurrences across sequences (raw, pre-noise)."""
    if vocab_size < 1:
        raise ValueError(f"vocab_size must be >= 1, got {vocab_size}")
    counts = np.zeros(vocab_size, dtype=np.int64)
    for seq in sequences:
        for term_id in seq.term_ids:
            if not 0 <= term_id < vocab_size:
                raise ValueError(
                    f"document {seq.doc_id!r}: term id {term_id} outside vocabulary "
                    f"of size {vocab_size}"
                )
            counts[term_id] += 1
    return counts


def privatize_histogram(
    counts: np.ndarray,
    s_per_doc: int,
    epsilon: Fraction | int | float | str,
    rng: np.random.Generator,
) -> NoisyHistogram:
    """Add i.i.d. Laplace(s_per_doc / epsilon) noise to every bin."""
    eps = as_epsilon(epsilon)
    if s_per_doc < 1:
        raise ValueError(f"s_per_doc must be >= 1, got {s_per_doc}")
    scale = float(Fraction(s_per_doc) / eps)
    noisy = counts.astype(np.float64) + laplace(rng, scale, counts.shape[0])
    return NoisyHistogram(counts=noisy, epsilon=eps, s_per_doc=s_per_doc)


def select_top_n(
    hist: NoisyHistogram, n: int, vocab: PublicVocabulary | None = None
) -> PrivatizedVocabulary:
    """Pick the n highest noisy counts, ties broken by ascending term id.

    Noisy counts may be negative and rank unchanged; clamping would bias the
    selection and is unnecessary for post-processing. ``n`` larger than the
    vocabulary returns every term, sorted.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    counts = hist.counts
    order = np.lexsort((np.arange(counts.shape[0]), -counts))
    top = tuple(int(i) for i in order[: min(n, counts.shape[0])])
    phrases = None if vocab is None else tuple(vocab.terms[i] for i in top)
    return PrivatizedVocabulary(term_ids=top, epsilon=hist.epsilon, phrases=phrases)


def write_privatized_vocabulary(
    priv: PrivatizedVocabulary,
    path: str | Path,
    *,
    s_per_doc: int,
    seed: int,
    source_terms: int,
) -> None:
    """Write the release file (one phrase per line) plus its manifest."""
    if priv.phrases is None:
        raise ValueError("privatized vocabulary has no resolved phrases to release")
    path = Path(path)
    path.write_text("".join(f"{p}\n" for p in priv.phrases), encoding="utf-8")
    manifest = {
        "format": VOCAB_MANIFEST_FORMAT,
        "epsilon": str(priv.epsilon),
        "s_per_doc": s_per_doc,
        "size": priv.size,
        "seed": seed,
        "source_terms": source_terms,
    }
    manifest_path(path).write_text(dumps_canonical(manifest), encoding="utf-8")


def manifest_path(vocab_path: str | Path) -> Path:
    return Path(f"{vocab_path}.manifest.json")


def load_privatized_vocabulary(path: str | Path) -> tuple[PrivatizedVocabulary, dict[str, Any]]:
    """Load a released vocabulary and its manifest.

    Release files are self-indexed: term ids become 0..N-1 in file order.
    """
    path = Path(path)
    phrases = tuple(
        line for line in path.read_text(encoding="utf-8").splitlines() if line
    )
    manifest = json.loads(manifest_path(path).read_text(encoding="utf-8"))
    if manifest.get("format") != VOCAB_MANIFEST_FORMAT:
        raise ValueError(f"{path}: unrecognized vocabulary manifest format")
    priv = PrivatizedVocabulary(
        term_ids=tuple(range(len(phrases))),
        epsilon=Fraction(manifest["epsilon"]),
        phrases=phrases,
    )
    if priv.size != manifest["size"]:
        raise ValueError(
            f"{path}: manifest says {manifest['size']} terms, file has {priv.size}"
        )
    return priv, manifest
