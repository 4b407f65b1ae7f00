"""Corpus and vocabulary loading, plus keyphrase extraction.

File formats:
    corpus      one JSON object per line: ``{"id": ..., "text": ..., "label": ...}``
    vocabulary  plain text, one lowercase phrase per line

Extraction matches document text against the vocabulary with greedy
longest-match n-gram tagging: the text is tokenized (split on Unicode
whitespace, leading/trailing punctuation stripped per token, lowercased),
and at every position the longest matching phrase of up to ``max_words``
tokens is taken, with the scan resuming after it.

All types here are immutable after construction; extraction is a pure
function of (text, vocabulary, limit) and documents can be processed on
independent workers.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence


@dataclass(frozen=True, slots=True)
class Document:
    """One private text record. ``label`` is a class name and may be empty."""

    id: str
    text: str
    label: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("document id must be non-empty")
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")


@dataclass(frozen=True, slots=True)
class PublicVocabulary:
    """Ordered, deduplicated list of lowercase phrases with a lookup index."""

    terms: tuple[str, ...]
    index: dict[str, int]
    max_words: int

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, phrase: str) -> bool:
        return phrase in self.index


@dataclass(frozen=True, slots=True)
class ExtractedSequence:
    """Ordered term ids matched in one document, capped at the extraction limit."""

    doc_id: str
    term_ids: tuple[int, ...]
    label: str


@dataclass(frozen=True, slots=True)
class TermRecord:
    """File-level form of an extracted sequence: phrases instead of term ids."""

    doc_id: str
    label: str
    terms: tuple[str, ...]


def vocabulary_from_terms(raw_terms: Iterable[str], max_words: int) -> PublicVocabulary:
    """Build a vocabulary from raw phrase strings.

    Phrases are lowercased and whitespace-normalized; duplicates are dropped
    keeping the first occurrence. A phrase longer than ``max_words`` words is
    rejected outright, which bounds the n-gram window used by extraction.
    """
    if max_words < 1:
        raise ValueError(f"max_words must be >= 1, got {max_words}")
    terms: list[str] = []
    index: dict[str, int] = {}
    for position, raw in enumerate(raw_terms):
        phrase = " ".join(raw.lower().split())
        if not phrase:
            continue
        n_words = len(phrase.split())
        if n_words > max_words:
            raise ValueError(
                f"vocabulary term {raw!r} (entry {position + 1}) has {n_words} words, "
                f"more than max_words={max_words}"
            )
        if phrase not in index:
            index[phrase] = len(terms)
            terms.append(phrase)
    return PublicVocabulary(terms=tuple(terms), index=index, max_words=max_words)


def load_vocabulary(path: str | Path, max_words: int) -> PublicVocabulary:
    """Load a public vocabulary file, one phrase per line."""
    with open(path, encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    try:
        return vocabulary_from_terms(lines, max_words)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def load_corpus(path: str | Path) -> list[Document]:
    """Load a JSON-lines corpus, preserving file order.

    Every line must be a JSON object with string fields ``id`` and ``text``;
    ``label`` is optional and defaults to the empty string. Malformed lines
    and duplicate ids are reported with their 1-based line number.
    """
    documents: list[Document] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            for field in ("id", "text"):
                if field not in record:
                    raise ValueError(f"{path}:{lineno}: missing required field {field!r}")
                if not isinstance(record[field], str):
                    raise ValueError(f"{path}:{lineno}: field {field!r} must be a string")
            label = record.get("label", "")
            if not isinstance(label, str):
                raise ValueError(f"{path}:{lineno}: field 'label' must be a string")
            try:
                doc = Document(id=record["id"], text=record["text"], label=label)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if doc.id in seen:
                raise ValueError(
                    f"{path}:{lineno}: duplicate document id {doc.id!r} "
                    f"(first seen on line {seen[doc.id]})"
                )
            seen[doc.id] = lineno
            documents.append(doc)
    return documents


def save_corpus(documents: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for doc in documents:
            handle.write(
                json.dumps({"id": doc.id, "text": doc.text, "label": doc.label}) + "\n"
            )


def _strip_punctuation(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith("P"):
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    """Split on Unicode whitespace, strip edge punctuation, lowercase.

    Tokens that are pure punctuation vanish, so phrases separated only by
    punctuation marks stay adjacent for multi-word matching.
    """
    tokens = []
    for raw in text.split():
        token = _strip_punctuation(raw.lower())
        if token:
            tokens.append(token)
    return tokens


def extract_terms(doc: Document, vocab: PublicVocabulary, limit: int) -> ExtractedSequence:
    """Extract the first ``limit`` vocabulary phrases appearing in a document.

    The scan is left to right and greedy: at each token position the longest
    matching phrase (up to ``vocab.max_words`` tokens) wins and the scan
    resumes after it. Repeated matches each consume one output slot. Fewer
    than ``limit`` matches is fine; an empty result is valid.
    """
    if limit < 1:
        raise ValueError(f"limit must be >= 1, got {limit}")
    tokens = tokenize(doc.text)
    matched: list[int] = []
    position = 0
    while position < len(tokens) and len(matched) < limit:
        window = min(vocab.max_words, len(tokens) - position)
        for n_words in range(window, 0, -1):
            phrase = " ".join(tokens[position : position + n_words])
            term_id = vocab.index.get(phrase)
            if term_id is not None:
                matched.append(term_id)
                position += n_words
                break
        else:
            position += 1
    return ExtractedSequence(doc_id=doc.id, term_ids=tuple(matched), label=doc.label)


def terms_for(sequence: ExtractedSequence, vocab: PublicVocabulary) -> tuple[str, ...]:
    """Resolve a sequence's term ids back to vocabulary phrases."""
    return tuple(vocab.terms[i] for i in sequence.term_ids)


def write_extracted(
    sequences: Iterable[ExtractedSequence], vocab: PublicVocabulary, path: str | Path
) -> None:
    """Write extracted sequences as JSON lines: ``{"id", "label", "terms"}``."""
    with open(path, "w", encoding="utf-8") as handle:
        for seq in sequences:
            record = {
                "id": seq.doc_id,
                "label": seq.label,
                "terms": list(terms_for(seq, vocab)),
            }
            handle.write(json.dumps(record) + "\n")


def read_extracted(path: str | Path) -> list[TermRecord]:
    """Read an extracted-sequence file back as phrase records."""
    records: list[TermRecord] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                records.append(
                    TermRecord(
                        doc_id=raw["id"],
                        label=raw.get("label", ""),
                        terms=tuple(raw["terms"]),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return records


def records_to_sequences(
    records: Sequence[TermRecord], vocab: PublicVocabulary
) -> list[ExtractedSequence]:
    """Convert phrase records to id-based sequences, validating membership."""
    sequences = []
    for record in records:
        ids = []
        for term in record.terms:
            term_id = vocab.index.get(term)
            if term_id is None:
                raise ValueError(
                    f"document {record.doc_id!r}: term {term!r} is not in the vocabulary"
                )
            ids.append(term_id)
        sequences.append(
            ExtractedSequence(doc_id=record.doc_id, term_ids=tuple(ids), label=record.label)
        )
    return sequences
