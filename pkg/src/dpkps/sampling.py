"""Turn KDE scores over the private vocabulary into keyphrase sequences.

Two modes. Independent sampling scores every vocabulary term once against a
single-block sketch and draws all sequence positions i.i.d. from the induced
multinomial. Iterative sampling extends a prefix one term at a time, scoring
every candidate extension against the prefix ensemble (|V| queries per step,
L * |V| per sequence).

Scores can be negative or wildly scaled after DP noise, so they pass through
a clamp-then-normalize step before any multinomial draw. Sequences only ever
contain members of the privatized vocabulary: that is the privacy boundary
this module maintains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingTable
from .ensemble import KdeEnsemble, score_extensions
from .kde import DpKdeSketch, query_many
from .randomness import child_seeds
from .vocab import PrivatizedVocabulary

GREEDY = "greedy"
MULTINOMIAL = "multinomial"
TOP_K = "topk"
STRATEGIES = (GREEDY, MULTINOMIAL, TOP_K)

DEFAULT_FLOOR_RATIO = 1e-6


@dataclass(frozen=True)
class ScoreVector:
    """A valid probability vector over the privatized vocabulary."""

    probs: np.ndarray


@dataclass(frozen=True)
class KeyphraseSequence:
    """An ordered, fixed-length draw of privatized vocabulary phrases."""

    terms: tuple[str, ...]
    label: str
    sampler: str
    seed: int


def relative_floor(raw_scores: np.ndarray, ratio: float = DEFAULT_FLOOR_RATIO) -> float:
    """Clamp floor as a fraction of the top score, so it tracks KDE drift.

    Falls back to a tiny absolute floor when no score is positive (pure
    noise); clamping then yields the uniform distribution.
    """
    top = float(np.max(raw_scores))
    return ratio * top if top > 0 else 1e-12


def score_to_distribution(raw_scores: np.ndarray, floor: float) -> ScoreVector:
    """Clamp each score to at least ``floor`` and normalize to sum 1."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.ndim != 1 or raw.shape[0] == 0:
        raise ValueError("raw_scores must be a non-empty 1-d array")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw_scores contain non-finite values")
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    clamped = np.maximum(raw, floor)
    return ScoreVector(probs=clamped / clamped.sum())


def _require_phrases(vocab: PrivatizedVocabulary) -> tuple[str, ...]:
    if vocab.phrases is None:
        raise ValueError("privatized vocabulary has no resolved phrases")
    if not vocab.phrases:
        raise ValueError("privatized vocabulary is empty")
    return vocab.phrases


def single_term_distribution(
    sketch: DpKdeSketch, vocab: PrivatizedVocabulary, table: EmbeddingTable
) -> ScoreVector:
    """Score every vocabulary term once against a single-block sketch."""
    if sketch.num_blocks != 1:
        raise ValueError(
            f"independent sampling needs a single-block sketch, got {sketch.num_blocks} blocks"
        )
    phrases = _require_phrases(vocab)
    units = table.matrix(phrases)
    raw = query_many(sketch, np.sqrt(sketch.block_sq_norm) * units)
    return score_to_distribution(raw, relative_floor(raw))


def sample_independent(
    sketch: DpKdeSketch,
    vocab: PrivatizedVocabulary,
    table: EmbeddingTable,
    length: int,
    count: int,
    seed: int,
    label: str = "",
) -> list[KeyphraseSequence]:
    """Draw ``count`` sequences of ``length`` i.i.d. terms."""
    if length < 1 or count < 1:
        raise ValueError("length and count must be >= 1")
    phrases = _require_phrases(vocab)
    dist = single_term_distribution(sketch, vocab, table)
    rng = np.random.default_rng(seed)
    draws = rng.choice(len(phrases), size=(count, length), p=dist.probs)
    return [
        KeyphraseSequence(
            terms=tuple(phrases[i] for i in row),
            label=label,
            sampler="independent",
            seed=seed,
        )
        for row in draws
    ]


def _select(
    raw: np.ndarray, strategy: str, top_k: int, rng: np.random.Generator
) -> int:
    if strategy == GREEDY:
        # argmax takes the first maximum, i.e. the lowest candidate id on ties.
        return int(np.argmax(raw))
    if strategy == MULTINOMIAL:
        probs = score_to_distribution(raw, relative_floor(raw)).probs
        return int(rng.choice(raw.shape[0], p=probs))
    if strategy == TOP_K:
        order = np.argsort(-raw, kind="stable")[: max(1, top_k)]
        probs = score_to_distribution(raw[order], relative_floor(raw[order])).probs
        return int(order[rng.choice(order.shape[0], p=probs)])
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def sample_iterative(
    ensemble: KdeEnsemble,
    vocab: PrivatizedVocabulary,
    table: EmbeddingTable,
    length: int,
    count: int,
    seed: int,
    strategy: str = MULTINOMIAL,
    top_k: int = 50,
    label: str = "",
) -> list[KeyphraseSequence]:
    """Grow each sequence one term at a time from prefix-KDE scores.

    Every step scores all |V| candidate extensions of the current prefix and
    selects one by ``strategy``: greedy argmax, multinomial over the
    clamp-normalized scores (default; pure greedy collapses diversity), or
    multinomial restricted to the ``top_k`` best. Each sequence consumes its
    own derived RNG stream, so generation order (or parallelism) cannot
    change the output.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if length < 1 or count < 1:
        raise ValueError("length and count must be >= 1")
    if length > ensemble.max_len:
        raise ValueError(
            f"requested length {length} exceeds ensemble max length {ensemble.max_len}"
        )
    phrases = _require_phrases(vocab)
    candidate_units = table.matrix(phrases)
    sequences = []
    for sequence_seed in child_seeds(seed, count):
        rng = np.random.default_rng(sequence_seed)
        terms: list[str] = []
        for _ in range(length):
            raw = score_extensions(ensemble, terms, candidate_units, table)
            terms.append(phrases[_select(raw, strategy, top_k, rng)])
        sequences.append(
            KeyphraseSequence(
                terms=tuple(terms),
                label=label,
                sampler=f"iterative-{strategy}",
                seed=sequence_seed,
            )
        )
    return sequences


def save_sequences(sequences: Iterable[KeyphraseSequence], path: str | Path) -> None:
    """Write sequences as JSON lines: ``{"label", "terms", "seed"}``."""
    with open(path, "w", encoding="utf-8") as handle:
        for seq in sequences:
            record = {"label": seq.label, "terms": list(seq.terms), "seed": seq.seed}
            handle.write(json.dumps(record) + "\n")


def load_sequences(path: str | Path) -> list[KeyphraseSequence]:
    sequences = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                raw = json.loads(line)
                sequences.append(
                    KeyphraseSequence(
                        terms=tuple(raw["terms"]),
                        label=raw.get("label", ""),
                        sampler="file",
                        seed=int(raw.get("seed", 0)),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sequence record: {exc}") from exc
    return sequences
