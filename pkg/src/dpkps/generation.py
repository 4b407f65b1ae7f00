"""Prompt assembly and dispatch to a pluggable text generator.

The generator boundary is the privacy boundary: the only data that may cross
it is a rendered prompt, which is a pure function of privatized keyphrase
sequences, the public template, and client-supplied few-shot examples. The
dispatcher records every outbound payload so the boundary is auditable.
"""

from __future__ import annotations

import hashlib
import json
import time
import urllib.error
import urllib.request
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .sampling import KeyphraseSequence

DEFAULT_PREAMBLE = "write a {doc_type} that contains the following terms: {terms}"
TERMS_MARKER = "the following terms: "

ENDPOINT_ENV = "DPKPS_GEN_ENDPOINT"
TOKEN_ENV = "DPKPS_GEN_TOKEN"


class ConnectorError(RuntimeError):
    """A send attempt failed; the dispatcher may retry."""


class GenerationAbortedError(RuntimeError):
    """Too many prompts failed after retries."""


@dataclass(frozen=True)
class FewShotExample:
    text: str
    keyphrases: tuple[str, ...]


@dataclass(frozen=True)
class PromptTemplate:
    """Generation prompt layout. ``preamble`` must contain a ``{terms}`` slot."""

    doc_type: str
    preamble: str = DEFAULT_PREAMBLE
    few_shot: tuple[FewShotExample, ...] = ()


@dataclass(frozen=True)
class SyntheticDocument:
    text: str
    label: str
    source_sequence: KeyphraseSequence
    generator_id: str


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded retries with exponential backoff (1s, 2s, 4s by default)."""

    retries: int = 3
    backoff_base: float = 1.0


@dataclass(frozen=True)
class GenerationResult:
    documents: tuple[SyntheticDocument, ...]
    prompts_dispatched: int
    attempts: tuple[int, ...]
    skipped: tuple[tuple[int, str], ...]
    payloads: tuple[str, ...]


class GeneratorConnector(ABC):
    """Transport to a text generator. Receives rendered prompts, nothing else."""

    generator_id: str = "generator"

    @abstractmethod
    def send(self, prompt: str) -> str:
        """Return generated text for one prompt; raise ConnectorError on failure."""


class MockConnector(GeneratorConnector):
    """Deterministic offline generator for tests and dry runs.

    Echoes the prompt's term list into a fixed template sentence and salts
    the filler with a hash of the prompt, so distinct prompts give distinct
    outputs and every seeded keyphrase appears verbatim.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.generator_id = f"mock-{seed}"

    def send(self, prompt: str) -> str:
        marker = prompt.rfind(TERMS_MARKER)
        terms_part = prompt[marker + len(TERMS_MARKER) :] if marker >= 0 else prompt
        digest = hashlib.sha256(f"{self.seed}:{prompt}".encode()).hexdigest()[:12]
        return (
            f"Synthetic record {digest}. This document covers {terms_part}. "
            f"Additional unremarkable details follow (ref {digest})."
        )


class HttpConnector(GeneratorConnector):
    """JSON-over-HTTP generator endpoint.

    Request body: ``{"prompt", "max_tokens", "temperature"}``; response body:
    ``{"text"}``. Endpoint and bearer token default to the DPKPS_GEN_ENDPOINT
    and DPKPS_GEN_TOKEN environment variables.
    """

    def __init__(
        self,
        endpoint: str,
        token: str | None = None,
        timeout: float = 60.0,
        max_tokens: int = 1024,
        temperature: float = 1.0,
        opener: Callable = urllib.request.urlopen,
    ):
        self.endpoint = endpoint
        self.token = token
        self.timeout = timeout
        self.max_tokens = max_tokens
        self.temperature = temperature
        self._opener = opener
        self.generator_id = f"http:{endpoint}"

    def build_request(self, prompt: str) -> urllib.request.Request:
        body = json.dumps(
            {
                "prompt": prompt,
                "max_tokens": self.max_tokens,
                "temperature": self.temperature,
            }
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return urllib.request.Request(self.endpoint, data=body, headers=headers)

    def send(self, prompt: str) -> str:
        try:
            with self._opener(self.build_request(prompt), timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
            raise ConnectorError(f"generator request failed: {exc}") from exc
        if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
            raise ConnectorError("generator response missing 'text' field")
        return payload["text"]


def render_prompt(
    template: PromptTemplate,
    sequence: KeyphraseSequence,
    few_shot: Sequence[FewShotExample] | None = None,
) -> str:
    """Render the generation prompt for one sequence.

    The class label never appears in the prompt; only the term list does.
    Few-shot examples, when present, precede the instruction.
    """
    if not isinstance(sequence, KeyphraseSequence):
        raise TypeError(
            "only privatized keyphrase sequences may cross the generator "
            f"boundary, got {type(sequence).__name__}"
        )
    if not sequence.terms:
        raise ValueError("cannot render a prompt for an empty sequence")
    if "{terms}" not in template.preamble:
        raise ValueError("prompt template is missing the {terms} keyphrase slot")
    instruction = template.preamble.format(
        doc_type=template.doc_type, terms=", ".join(sequence.terms)
    )
    examples = template.few_shot if few_shot is None else tuple(few_shot)
    if not examples:
        return instruction
    blocks = [
        f"keyphrases: {', '.join(ex.keyphrases)}\ntext: {ex.text}" for ex in examples
    ]
    return "\n\n".join(blocks) + "\n\n" + instruction


@dataclass
class _Dispatch:
    text: str | None = None
    attempts: int = 0
    error: str = ""
    payloads: list[str] = field(default_factory=list)


def _send_with_retries(
    connector: GeneratorConnector,
    prompt: str,
    retry: RetryPolicy,
    sleep: Callable[[float], None],
) -> _Dispatch:
    out = _Dispatch()
    for attempt in range(retry.retries + 1):
        if attempt:
            sleep(retry.backoff_base * 2 ** (attempt - 1))
        out.attempts += 1
        out.payloads.append(prompt)
        try:
            out.text = connector.send(prompt)
            return out
        except ConnectorError as exc:
            out.error = str(exc)
    return out


def generate_corpus(
    sequences: Sequence[KeyphraseSequence],
    template: PromptTemplate,
    connector: GeneratorConnector,
    *,
    concurrency: int = 8,
    retry: RetryPolicy = RetryPolicy(),
    few_shot: Sequence[FewShotExample] | None = None,
    fail_fraction_limit: float = 0.2,
    out_path: str | Path | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> GenerationResult:
    """Dispatch one prompt per sequence and collect synthetic documents.

    Results are gathered and written in input order regardless of completion
    order. Prompts that still fail after retries are skipped with a reason;
    if more than ``fail_fraction_limit`` of them fail, the run aborts.
    """
    if not sequences:
        raise ValueError("no sequences to generate from")
    for seq in sequences:
        if not isinstance(seq, KeyphraseSequence):
            raise TypeError(
                "only privatized keyphrase sequences may cross the generator "
                f"boundary, got {type(seq).__name__}"
            )
    prompts = [render_prompt(template, seq, few_shot) for seq in sequences]

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        dispatches = list(
            pool.map(lambda p: _send_with_retries(connector, p, retry, sleep), prompts)
        )

    documents: list[SyntheticDocument] = []
    skipped: list[tuple[int, str]] = []
    payloads: list[str] = []
    for index, (seq, dispatch) in enumerate(zip(sequences, dispatches)):
        payloads.extend(dispatch.payloads)
        if dispatch.text is None:
            skipped.append((index, dispatch.error))
        else:
            documents.append(
                SyntheticDocument(
                    text=dispatch.text,
                    label=seq.label,
                    source_sequence=seq,
                    generator_id=connector.generator_id,
                )
            )
    if len(skipped) > fail_fraction_limit * len(sequences):
        raise GenerationAbortedError(
            f"{len(skipped)} of {len(sequences)} prompts failed after retries "
            f"(limit {fail_fraction_limit:.0%})"
        )
    result = GenerationResult(
        documents=tuple(documents),
        prompts_dispatched=len(prompts),
        attempts=tuple(d.attempts for d in dispatches),
        skipped=tuple(skipped),
        payloads=tuple(payloads),
    )
    if out_path is not None:
        write_synthetic(result.documents, out_path)
    return result


def write_synthetic(documents: Sequence[SyntheticDocument], path: str | Path) -> None:
    """Write synthetic documents as JSON lines: ``{"text", "label", "terms", "generator_id"}``."""
    with open(path, "w", encoding="utf-8") as handle:
        for doc in documents:
            record = {
                "text": doc.text,
                "label": doc.label,
                "terms": list(doc.source_sequence.terms),
                "generator_id": doc.generator_id,
            }
            handle.write(json.dumps(record) + "\n")


def load_few_shot(path: str | Path) -> list[FewShotExample]:
    """Read client-supplied few-shot examples: JSON lines {"text", "keyphrases"}."""
    examples = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                raw = json.loads(line)
                examples.append(
                    FewShotExample(text=raw["text"], keyphrases=tuple(raw["keyphrases"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed few-shot example: {exc}") from exc
    return examples
