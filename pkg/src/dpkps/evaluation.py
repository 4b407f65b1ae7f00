"""Desk-scale evaluation: toy corpora, centroid classification, mode grids.

The toy corpus generator stands in for real private datasets: class
structure is controlled through per-class term pools (optionally with forced
successor pairs) and embeddings are seeded random unit vectors, so accuracy
targets are construction-derived rather than dataset-dependent.

Classification is deliberately lightweight: a sequence is embedded as the
mean of its term embeddings and assigned to the nearest class centroid.
That is enough to compare pipeline configurations without training anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Protocol, Sequence

import numpy as np

from .budget import BudgetLedger, as_epsilon
from .corpus import Document, extract_terms, terms_for, vocabulary_from_terms
from .embeddings import EmbeddingTable, table_from_vectors
from .ensemble import build_linear_ensemble, build_log_ensemble, log_sketch_sizes
from .randomness import child_seeds
from .sampling import MULTINOMIAL, KeyphraseSequence, sample_independent, sample_iterative
from .vocab import build_histogram, privatize_histogram, select_top_n

INDEPENDENT = "independent"
ITERATIVE = "iterative"


class LabeledSequence(Protocol):
    label: str
    terms: tuple[str, ...]


@dataclass(frozen=True)
class LabeledTermSequence:
    label: str
    terms: tuple[str, ...]


@dataclass(frozen=True)
class ToyCorpusSpec:
    """Recipe for a synthetic labeled corpus with controllable class structure.

    ``term_weight_decay`` shapes how concentrated each class's term usage is:
    term i of a pool is drawn with weight decay**i. 1.0 means uniform usage;
    values below 1 give the skewed, natural-corpus-like frequencies that make
    class signal survive a small shared release vocabulary.
    """

    docs_per_class: int
    class_term_pools: tuple[tuple[str, ...], ...]
    terms_per_doc: int
    co_occurrence_pairs: tuple[tuple[str, str], ...] = ()
    seed: int = 0
    embedding_dim: int = 16
    term_weight_decay: float = 1.0

    @property
    def num_classes(self) -> int:
        return len(self.class_term_pools)

    @property
    def class_labels(self) -> tuple[str, ...]:
        return tuple(f"class{i}" for i in range(self.num_classes))

    def __post_init__(self) -> None:
        if self.docs_per_class < 1 or self.terms_per_doc < 1:
            raise ValueError("docs_per_class and terms_per_doc must be >= 1")
        if not 0 < self.term_weight_decay <= 1:
            raise ValueError("term_weight_decay must be in (0, 1]")
        if not self.class_term_pools:
            raise ValueError("at least one class pool is required")
        heads = {}
        successors = set()
        for head, succ in self.co_occurrence_pairs:
            if head == succ:
                raise ValueError(f"forced pair {head!r} -> {succ!r} is a self-loop")
            if head in heads:
                raise ValueError(f"term {head!r} heads more than one forced pair")
            heads[head] = succ
            successors.add(succ)
        if successors & set(heads):
            raise ValueError("chained forced pairs are not supported")
        all_terms = set()
        for pool in self.class_term_pools:
            all_terms.update(pool)
        for head, succ in self.co_occurrence_pairs:
            if head not in all_terms or succ not in all_terms:
                raise ValueError(f"forced pair {head!r} -> {succ!r} uses unknown terms")


def synth_documents(
    spec: ToyCorpusSpec,
    *,
    docs_per_class: int | None = None,
    seed: int | None = None,
    id_prefix: str = "",
) -> list[Document]:
    """Generate labeled documents, each a space-joined sample from its class pool.

    Terms are drawn without replacement; a pool smaller than terms_per_doc is
    an error. When a drawn term heads a forced pair, the successor is emitted
    immediately after it, so every occurrence of the head is followed by its
    successor (the document may exceed terms_per_doc by those insertions).
    """
    per_class = spec.docs_per_class if docs_per_class is None else docs_per_class
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    follow = dict(spec.co_occurrence_pairs)
    documents = []
    for label, pool in zip(spec.class_labels, spec.class_term_pools):
        if len(pool) < spec.terms_per_doc:
            raise ValueError(
                f"{label}: pool of {len(pool)} terms cannot supply "
                f"{spec.terms_per_doc} distinct terms per document"
            )
        weights = spec.term_weight_decay ** np.arange(len(pool))
        weights /= weights.sum()
        for i in range(per_class):
            drawn = rng.choice(len(pool), size=spec.terms_per_doc, replace=False, p=weights)
            words: list[str] = []
            for j in drawn:
                term = pool[int(j)]
                words.append(term)
                if term in follow:
                    words.append(follow[term])
            documents.append(
                Document(id=f"{id_prefix}{label}-{i:05d}", text=" ".join(words), label=label)
            )
    return documents


def synth_embeddings(spec: ToyCorpusSpec) -> EmbeddingTable:
    """Seeded random unit embeddings for every pool term."""
    terms = sorted({term for pool in spec.class_term_pools for term in pool})
    rng = np.random.default_rng(child_seeds(spec.seed, 2)[1])
    vectors = {term: rng.standard_normal(spec.embedding_dim) for term in terms}
    return table_from_vectors(vectors)


def synth_corpus(spec: ToyCorpusSpec) -> tuple[list[Document], EmbeddingTable]:
    return synth_documents(spec), synth_embeddings(spec)


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    per_class_accuracy: dict[str, float]
    confusion: dict[str, dict[str, int]]
    config: dict[str, Any]

    def as_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion,
            "config": self.config,
        }


def _mean_embedding(seq: LabeledSequence, table: EmbeddingTable) -> np.ndarray:
    if not seq.terms:
        raise ValueError(f"cannot embed an empty sequence (label {seq.label!r})")
    return table.matrix(seq.terms).mean(axis=0)


def centroid_classify(
    train_sequences: Sequence[LabeledSequence],
    test_sequences: Sequence[LabeledSequence],
    table: EmbeddingTable,
    config: dict[str, Any] | None = None,
) -> EvalReport:
    """Nearest-centroid classification of term sequences.

    Each sequence is embedded as the mean of its term embeddings; class
    centroids come from the training sequences; ties go to the first class
    in sorted label order.
    """
    if not train_sequences or not test_sequences:
        raise ValueError("need at least one train and one test sequence")
    classes = sorted({seq.label for seq in train_sequences})
    centroids = np.stack(
        [
            np.mean(
                [_mean_embedding(s, table) for s in train_sequences if s.label == c],
                axis=0,
            )
            for c in classes
        ]
    )
    confusion: dict[str, dict[str, int]] = {}
    correct = 0
    for seq in test_sequences:
        point = _mean_embedding(seq, table)
        distances = np.linalg.norm(centroids - point, axis=1)
        predicted = classes[int(np.argmin(distances))]
        row = confusion.setdefault(seq.label, {})
        row[predicted] = row.get(predicted, 0) + 1
        if predicted == seq.label:
            correct += 1
    per_class = {
        label: row.get(label, 0) / sum(row.values()) for label, row in confusion.items()
    }
    return EvalReport(
        accuracy=correct / len(test_sequences),
        per_class_accuracy=per_class,
        confusion=confusion,
        config=config or {},
    )


@dataclass(frozen=True)
class EvalGrid:
    """Pipeline configuration grid for mode comparisons."""

    budgets: tuple[tuple[Fraction, Fraction], ...]
    modes: tuple[str, ...] = (INDEPENDENT, ITERATIVE)
    s_per_doc: int = 10
    vocab_top_n: int = 60
    sequence_length: int = 10
    sequences_per_class: int = 100
    num_features: int = 1000
    strategy: str = MULTINOMIAL
    test_docs_per_class: int = 100
    seed: int = 0


def run_pipeline(
    documents: Sequence[Document],
    table: EmbeddingTable,
    vocab_terms: Sequence[str],
    *,
    mode: str,
    epsilon_voc: Fraction | int | str,
    epsilon_kde: Fraction | int | str,
    s_per_doc: int,
    vocab_top_n: int,
    sequence_length: int,
    sequences_per_class: int,
    num_features: int,
    strategy: str,
    seed: int,
) -> tuple[list[KeyphraseSequence], BudgetLedger]:
    """End-to-end: extract, privatize the vocabulary, build per-class KDEs,
    and sample labeled keyphrase sequences.

    One privatized vocabulary is shared across classes; each class gets its
    own KDE over its own documents, so the KDE budget composes in parallel
    across the disjoint classes and is charged once.
    """
    if mode not in (INDEPENDENT, ITERATIVE):
        raise ValueError(f"unknown mode {mode!r}")
    if not documents:
        raise ValueError("no documents to run the pipeline on")
    eps_voc = as_epsilon(epsilon_voc)
    eps_kde = as_epsilon(epsilon_kde)
    max_words = max(len(term.split()) for term in vocab_terms)
    vocab = vocabulary_from_terms(vocab_terms, max_words=max_words)
    extracted = [extract_terms(doc, vocab, s_per_doc) for doc in documents]

    ledger = BudgetLedger()
    vocab_seed, kde_seed, sample_seed = child_seeds(seed, 3)
    ledger.charge(
        "vocabulary_privatization",
        eps_voc,
        details={"s_per_doc": s_per_doc, "top_n": vocab_top_n},
    )
    hist = privatize_histogram(
        build_histogram(extracted, len(vocab)),
        s_per_doc,
        eps_voc,
        np.random.default_rng(vocab_seed),
    )
    private_vocab = select_top_n(hist, vocab_top_n, vocab)

    labels = sorted({doc.label for doc in documents})
    by_label = {
        label: [terms_for(seq, vocab) for seq in extracted if seq.label == label]
        for label in labels
    }
    class_seeds = child_seeds(kde_seed, len(labels))
    draw_seeds = child_seeds(sample_seed, len(labels))

    # Charge before any noise is drawn; the sketch split is known up front.
    lengths = [1] if mode == INDEPENDENT else log_sketch_sizes(sequence_length)
    per_sketch = eps_kde / len(lengths)
    ledger.charge(
        "kde_ensembles",
        eps_kde,
        details={
            "composition": "parallel",
            "classes": labels,
            "mode": mode,
            "parts": [{"num_blocks": k, "epsilon": str(per_sketch)} for k in lengths],
        },
    )

    sequences = []
    for label, class_seed, draw_seed in zip(labels, class_seeds, draw_seeds):
        if mode == INDEPENDENT:
            ens = build_linear_ensemble(
                by_label[label], table, 1, eps_kde, num_features, class_seed
            )
            sequences.extend(
                sample_independent(
                    ens.sketches[0],
                    private_vocab,
                    table,
                    sequence_length,
                    sequences_per_class,
                    draw_seed,
                    label=label,
                )
            )
        else:
            ens = build_log_ensemble(
                by_label[label], table, sequence_length, eps_kde, num_features, class_seed
            )
            sequences.extend(
                sample_iterative(
                    ens,
                    private_vocab,
                    table,
                    sequence_length,
                    sequences_per_class,
                    draw_seed,
                    strategy=strategy,
                    label=label,
                )
            )
    return sequences, ledger


def compare_modes(spec: ToyCorpusSpec, grid: EvalGrid) -> list[EvalReport]:
    """Run the full pipeline for every (mode, budget) cell and score each.

    The generator plays no part here: generated keyphrase sequences are
    classified directly against held-out real sequences, mirroring how the
    pipeline is validated without spending prompts.
    """
    documents, table = synth_corpus(spec)
    vocab_terms = sorted({t for pool in spec.class_term_pools for t in pool})
    test_docs = synth_documents(
        spec,
        docs_per_class=grid.test_docs_per_class,
        seed=child_seeds(spec.seed, 4)[3],
        id_prefix="held-out-",
    )
    max_words = max(len(t.split()) for t in vocab_terms)
    vocab = vocabulary_from_terms(vocab_terms, max_words=max_words)
    test_sequences = []
    for doc in test_docs:
        seq = extract_terms(doc, vocab, grid.s_per_doc)
        if seq.term_ids:
            test_sequences.append(
                LabeledTermSequence(label=doc.label, terms=terms_for(seq, vocab))
            )

    reports = []
    cells = [(mode, budget) for mode in grid.modes for budget in grid.budgets]
    cell_seeds = child_seeds(grid.seed, len(cells))
    for (mode, (eps_voc, eps_kde)), cell_seed in zip(cells, cell_seeds):
        generated, ledger = run_pipeline(
            documents,
            table,
            vocab_terms,
            mode=mode,
            epsilon_voc=eps_voc,
            epsilon_kde=eps_kde,
            s_per_doc=grid.s_per_doc,
            vocab_top_n=grid.vocab_top_n,
            sequence_length=grid.sequence_length,
            sequences_per_class=grid.sequences_per_class,
            num_features=grid.num_features,
            strategy=grid.strategy,
            seed=cell_seed,
        )
        config = {
            "mode": mode,
            "strategy": grid.strategy if mode == ITERATIVE else "i.i.d.",
            "epsilon_voc": str(as_epsilon(eps_voc)),
            "epsilon_kde": str(as_epsilon(eps_kde)),
            "epsilon_total": str(ledger.total),
            "sequence_length": grid.sequence_length,
            "sequences_per_class": grid.sequences_per_class,
            "vocab_top_n": grid.vocab_top_n,
            "num_features": grid.num_features,
            "seed": cell_seed,
        }
        reports.append(centroid_classify(generated, test_sequences, table, config))
    return reports


def format_report_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text comparison table, one row per grid cell."""
    header = f"{'mode':<14}{'eps_voc':>8}{'eps_kde':>8}{'eps':>6}{'accuracy':>10}"
    lines = [header, "-" * len(header)]
    for report in reports:
        cfg = report.config
        lines.append(
            f"{cfg.get('mode', '?'):<14}"
            f"{cfg.get('epsilon_voc', '?'):>8}"
            f"{cfg.get('epsilon_kde', '?'):>8}"
            f"{cfg.get('epsilon_total', '?'):>6}"
            f"{report.accuracy:>10.3f}"
        )
    return "\n".join(lines)
