"""Command-line pipeline: extract, privatize-vocab, build-kde, sample,
generate, audit, eval.

A run directory accumulates the released artifacts of one pipeline run plus
its ``budget.json`` ledger. Every artifact is written deterministically
(canonical JSON, relative paths, no timestamps), so identical inputs and
seeds reproduce byte-identical runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import corpus, ensemble, evaluation, generation, sampling, vocab
from .budget import BudgetLedger, LedgerInconsistentError, dumps_canonical
from .embeddings import EmbeddingTable, load_embeddings
from .randomness import child_seeds

logger = logging.getLogger(__name__)

RUN_MANIFEST_FORMAT = "dpkps-kde-run-v1"
VOCAB_CHARGE = "vocabulary_privatization"
KDE_CHARGE = "kde_ensembles"

BUILD_MODES = ("independent", "linear", "log")
SAMPLE_MODES = ("independent", "iterative")


def infer_embedding_dim(path: str | Path) -> int:
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            parts = line.split()
            if parts:
                return len(parts) - 1
    raise ValueError(f"{path}: empty embedding file")


def cmd_extract(args: argparse.Namespace) -> int:
    docs = corpus.load_corpus(args.corpus)
    vocabulary = corpus.load_vocabulary(args.vocab, args.max_words)
    sequences = [corpus.extract_terms(doc, vocabulary, args.limit) for doc in docs]
    if args.out:
        corpus.write_extracted(sequences, vocabulary, args.out)
    else:
        for seq in sequences:
            record = {
                "id": seq.doc_id,
                "label": seq.label,
                "terms": list(corpus.terms_for(seq, vocabulary)),
            }
            print(json.dumps(record))
    logger.info("extracted terms from %d documents", len(sequences))
    return 0


def cmd_privatize_vocab(args: argparse.Namespace) -> int:
    vocabulary = corpus.load_vocabulary(args.vocab, args.max_words)
    records = corpus.read_extracted(args.extracted)
    sequences = corpus.records_to_sequences(records, vocabulary)
    over = [s.doc_id for s in sequences if len(s.term_ids) > args.s]
    if over:
        raise ValueError(
            f"{len(over)} documents carry more than --s {args.s} terms "
            f"(first: {over[0]!r}); re-run extract with --limit {args.s}"
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ledger = BudgetLedger()
    # Charge-then-execute: the budget line is committed before noise is drawn.
    ledger.charge(VOCAB_CHARGE, args.eps_voc, details={"s_per_doc": args.s, "top_n": args.n})
    hist = vocab.privatize_histogram(
        vocab.build_histogram(sequences, len(vocabulary)),
        args.s,
        args.eps_voc,
        np.random.default_rng(args.seed),
    )
    private = vocab.select_top_n(hist, args.n, vocabulary)
    vocab.write_privatized_vocabulary(
        private, out, s_per_doc=args.s, seed=args.seed, source_terms=len(vocabulary)
    )
    ledger.save(out.parent / "budget.json")
    logger.info("released %d of %d terms at epsilon %s", private.size, len(vocabulary), args.eps_voc)
    return 0


def _class_dirname(index: int) -> str:
    return f"class_{index:03d}"


def cmd_build_kde(args: argparse.Namespace) -> int:
    out = Path(args.out)
    manifest_file = out / "manifest.json"
    if manifest_file.exists():
        raise FileExistsError(f"{out} already contains a KDE run; use a fresh directory")
    out.mkdir(parents=True, exist_ok=True)

    private, vocab_manifest = vocab.load_privatized_vocabulary(args.vocab_priv)
    dim = args.dim or infer_embedding_dim(args.embeddings)
    table = load_embeddings(args.embeddings, dim)

    candidates = [p for p in private.phrases if p in table]
    dropped = private.size - len(candidates)
    if dropped:
        logger.warning("dropped %d private-vocabulary terms without embeddings", dropped)
    if not candidates:
        raise ValueError("no private-vocabulary terms have embeddings")

    records = corpus.read_extracted(args.extracted)
    unknown_terms = 0
    by_label: dict[str, list[tuple[str, ...]]] = {}
    for record in records:
        kept = tuple(t for t in record.terms if t in table)
        unknown_terms += len(record.terms) - len(kept)
        by_label.setdefault(record.label, []).append(kept)
    if unknown_terms:
        logger.warning("ignored %d extracted term occurrences without embeddings", unknown_terms)
    labels = sorted(by_label)

    sequence_length = 1 if args.mode == "independent" else args.length
    builder = ensemble.build_log_ensemble if args.mode == "log" else ensemble.build_linear_ensemble

    ledger = _load_or_init_ledger(out, vocab_manifest)
    if ledger.find(KDE_CHARGE) is not None:
        raise LedgerInconsistentError(
            f"{out / 'budget.json'} already records a KDE charge; use a fresh directory"
        )

    # Charge-then-execute: the split is known from mode and L, so the budget
    # line is committed before any noise is drawn.
    if args.mode == "log":
        lengths = ensemble.log_sketch_sizes(sequence_length)
    else:
        lengths = list(range(1, sequence_length + 1))
    per_sketch = Fraction(args.eps_kde) / len(lengths)
    ledger.charge(
        KDE_CHARGE,
        args.eps_kde,
        details={
            "composition": "parallel",
            "classes": labels,
            "mode": args.mode,
            "parts": [{"num_blocks": k, "epsilon": str(per_sketch)} for k in lengths],
        },
    )

    class_entries = []
    class_seeds = child_seeds(args.seed, len(labels))
    ensembles = {}
    for index, (label, class_seed) in enumerate(zip(labels, class_seeds)):
        ensembles[label] = builder(
            by_label[label], table, sequence_length, args.eps_kde, args.features, class_seed
        )
        class_entries.append(
            {
                "label": label,
                "dir": _class_dirname(index),
                "documents": len(by_label[label]),
                "skipped_empty": sum(1 for t in by_label[label] if not t),
            }
        )

    first = ensembles[labels[0]]
    assert [s.num_blocks for s in first.sketches] == lengths
    for index, label in enumerate(labels):
        ensemble.save_ensemble(ensembles[label], out / _class_dirname(index))
    unit_matrix = table.matrix(candidates)
    np.save(out / "candidates.npy", unit_matrix)
    (out / "candidates.txt").write_text(
        "".join(f"{c}\n" for c in candidates), encoding="utf-8"
    )
    manifest = {
        "format": RUN_MANIFEST_FORMAT,
        "mode": args.mode,
        "sequence_length": sequence_length,
        "epsilon_kde": str(Fraction(args.eps_kde)),
        "vocab_epsilon": vocab_manifest["epsilon"],
        "s_per_doc": vocab_manifest["s_per_doc"],
        "num_features": args.features,
        "block_dim": dim,
        "seed": args.seed,
        "candidates": "candidates.txt",
        "candidate_vectors": "candidates.npy",
        "dropped_candidates": dropped,
        "classes": class_entries,
    }
    manifest_file.write_text(dumps_canonical(manifest), encoding="utf-8")
    ledger.save(out / "budget.json")
    logger.info(
        "built %s ensembles for %d classes at epsilon %s", args.mode, len(labels), args.eps_kde
    )
    return 0


def _load_or_init_ledger(out: Path, vocab_manifest: dict) -> BudgetLedger:
    """Reuse a colocated ledger or start one, importing the vocabulary charge."""
    budget_file = out / "budget.json"
    ledger = BudgetLedger.load(budget_file) if budget_file.exists() else BudgetLedger()
    vocab_epsilon = Fraction(vocab_manifest["epsilon"])
    existing = ledger.find(VOCAB_CHARGE)
    if existing is None:
        ledger.charge(
            VOCAB_CHARGE,
            vocab_epsilon,
            details={
                "s_per_doc": vocab_manifest["s_per_doc"],
                "top_n": vocab_manifest["size"],
            },
        )
    elif existing.epsilon != vocab_epsilon:
        raise LedgerInconsistentError(
            f"ledger records vocabulary epsilon {existing.epsilon}, "
            f"manifest says {vocab_epsilon}"
        )
    return ledger


def verify_run(run_dir: str | Path) -> tuple[dict, BudgetLedger]:
    """Check that a run directory's ledger matches its released artifacts."""
    run_dir = Path(run_dir)
    budget_file = run_dir / "budget.json"
    if not budget_file.exists():
        raise LedgerInconsistentError(f"{run_dir}: budget.json is missing")
    ledger = BudgetLedger.load(budget_file)
    manifest_file = run_dir / "manifest.json"
    if not manifest_file.exists():
        raise LedgerInconsistentError(f"{run_dir}: manifest.json is missing")
    manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    if manifest.get("format") != RUN_MANIFEST_FORMAT:
        raise LedgerInconsistentError(f"{run_dir}: unrecognized run manifest format")

    kde_entry = ledger.find(KDE_CHARGE)
    if kde_entry is None:
        raise LedgerInconsistentError(f"{run_dir}: ledger has no KDE charge")
    if kde_entry.epsilon != Fraction(manifest["epsilon_kde"]):
        raise LedgerInconsistentError(
            f"{run_dir}: ledger KDE epsilon {kde_entry.epsilon} != "
            f"manifest {manifest['epsilon_kde']}"
        )
    vocab_entry = ledger.find(VOCAB_CHARGE)
    if vocab_entry is None:
        raise LedgerInconsistentError(f"{run_dir}: ledger has no vocabulary charge")
    if vocab_entry.epsilon != Fraction(manifest["vocab_epsilon"]):
        raise LedgerInconsistentError(
            f"{run_dir}: ledger vocabulary epsilon {vocab_entry.epsilon} != "
            f"manifest {manifest['vocab_epsilon']}"
        )
    for entry in manifest["classes"]:
        ens = ensemble.load_ensemble(run_dir / entry["dir"])
        if ens.epsilon != kde_entry.epsilon:
            raise LedgerInconsistentError(
                f"{run_dir}: class {entry['label']!r} ensemble epsilon {ens.epsilon} "
                f"!= charged {kde_entry.epsilon}"
            )
    return manifest, ledger


def _candidate_table(run_dir: Path, manifest: dict) -> tuple[list[str], EmbeddingTable]:
    phrases = [
        line
        for line in (run_dir / manifest["candidates"]).read_text(encoding="utf-8").splitlines()
        if line
    ]
    matrix = np.load(run_dir / manifest["candidate_vectors"])
    if matrix.shape != (len(phrases), manifest["block_dim"]):
        raise LedgerInconsistentError(f"{run_dir}: candidate matrix shape mismatch")
    table = EmbeddingTable(
        dim=manifest["block_dim"],
        vectors={p: matrix[i] for i, p in enumerate(phrases)},
    )
    return phrases, table


def cmd_sample(args: argparse.Namespace) -> int:
    run_dir = Path(args.ensemble)
    manifest, _ = verify_run(run_dir)
    phrases, table = _candidate_table(run_dir, manifest)
    private = vocab.PrivatizedVocabulary(
        term_ids=tuple(range(len(phrases))),
        epsilon=Fraction(manifest["vocab_epsilon"]),
        phrases=tuple(phrases),
    )
    length = args.length or manifest["sequence_length"]
    labels = [entry["label"] for entry in manifest["classes"]]
    class_seeds = child_seeds(args.seed, len(labels))
    sequences = []
    for entry, class_seed in zip(manifest["classes"], class_seeds):
        ens = ensemble.load_ensemble(run_dir / entry["dir"])
        if args.mode == "independent":
            sketch = next((s for s in ens.sketches if s.num_blocks == 1), None)
            if sketch is None:
                raise ValueError("ensemble has no single-block sketch for independent sampling")
            sequences.extend(
                sampling.sample_independent(
                    sketch, private, table, length, args.count, class_seed, label=entry["label"]
                )
            )
        else:
            sequences.extend(
                sampling.sample_iterative(
                    ens,
                    private,
                    table,
                    length,
                    args.count,
                    class_seed,
                    strategy=args.strategy,
                    top_k=args.top_k,
                    label=entry["label"],
                )
            )
    sampling.save_sequences(sequences, args.out)
    logger.info("sampled %d sequences of length %d", len(sequences), length)
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    sequences = sampling.load_sequences(args.sequences)
    template = generation.PromptTemplate(doc_type=args.doc_type)
    few_shot = generation.load_few_shot(args.few_shot) if args.few_shot else None
    if args.connector == "mock":
        connector: generation.GeneratorConnector = generation.MockConnector(seed=args.mock_seed)
    else:
        endpoint = args.endpoint or os.environ.get(generation.ENDPOINT_ENV)
        if not endpoint:
            raise ValueError(
                f"http connector needs --endpoint or {generation.ENDPOINT_ENV}"
            )
        connector = generation.HttpConnector(
            endpoint,
            token=os.environ.get(generation.TOKEN_ENV),
            timeout=args.timeout,
            max_tokens=args.max_tokens,
            temperature=args.temperature,
        )
    result = generation.generate_corpus(
        sequences,
        template,
        connector,
        concurrency=args.concurrency,
        few_shot=few_shot,
        out_path=args.out,
    )
    print(
        f"dispatched {result.prompts_dispatched} prompts, "
        f"wrote {len(result.documents)} documents, skipped {len(result.skipped)}"
    )
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    budget_file = run_dir / "budget.json"
    if not budget_file.exists():
        print(f"error: {budget_file} is missing", file=sys.stderr)
        return 1
    ledger = BudgetLedger.load(budget_file)
    report = ledger.audit()
    print(json.dumps(report.data, sort_keys=True, indent=2) if args.json else report.text)
    if (run_dir / "manifest.json").exists():
        try:
            verify_run(run_dir)
            print("artifact consistency: ok")
        except LedgerInconsistentError as exc:
            print(f"artifact consistency: FAILED ({exc})", file=sys.stderr)
            return 1
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.mode != "compare":
        raise ValueError(f"unknown eval mode {args.mode!r}")
    spec_data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    grid_data = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    spec = evaluation.ToyCorpusSpec(
        docs_per_class=spec_data["docs_per_class"],
        class_term_pools=tuple(tuple(pool) for pool in spec_data["class_term_pools"]),
        terms_per_doc=spec_data["terms_per_doc"],
        co_occurrence_pairs=tuple(
            (a, b) for a, b in spec_data.get("co_occurrence_pairs", [])
        ),
        seed=spec_data.get("seed", 0),
        embedding_dim=spec_data.get("embedding_dim", 16),
        term_weight_decay=spec_data.get("term_weight_decay", 1.0),
    )
    grid = evaluation.EvalGrid(
        budgets=tuple(
            (Fraction(v), Fraction(k)) for v, k in grid_data["budgets"]
        ),
        modes=tuple(grid_data.get("modes", (evaluation.INDEPENDENT, evaluation.ITERATIVE))),
        s_per_doc=grid_data.get("s_per_doc", 10),
        vocab_top_n=grid_data.get("vocab_top_n", 60),
        sequence_length=grid_data.get("sequence_length", 10),
        sequences_per_class=grid_data.get("sequences_per_class", 100),
        num_features=grid_data.get("num_features", 1000),
        strategy=grid_data.get("strategy", "multinomial"),
        test_docs_per_class=grid_data.get("test_docs_per_class", 100),
        seed=grid_data.get("seed", 0),
    )
    reports = evaluation.compare_modes(spec, grid)
    Path(args.out).write_text(
        dumps_canonical([r.as_dict() for r in reports]), encoding="utf-8"
    )
    print(evaluation.format_report_table(reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpkps",
        description="Differentially private keyphrase sequences for prompt-seeded synthetic text",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("extract", help="extract per-document keyphrase sequences")
    p.add_argument("--corpus", required=True, help="JSON-lines corpus file")
    p.add_argument("--vocab", required=True, help="public vocabulary, one phrase per line")
    p.add_argument("--limit", type=int, required=True, help="max terms per document (S)")
    p.add_argument("--max-words", type=int, default=4, help="max words per vocabulary phrase")
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_extract)

    p = commands.add_parser("privatize-vocab", help="release a private top-N vocabulary")
    p.add_argument("--extracted", required=True, help="output of `dpkps extract`")
    p.add_argument("--vocab", required=True, help="public vocabulary file")
    p.add_argument("--n", type=int, required=True, help="size of the released vocabulary")
    p.add_argument("--s", type=int, required=True, help="terms contributed per document (S)")
    p.add_argument("--eps-voc", type=Fraction, required=True, help="privacy budget for this release")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-words", type=int, default=4)
    p.add_argument("--out", required=True, help="released vocabulary file to write")
    p.set_defaults(func=cmd_privatize_vocab)

    p = commands.add_parser("build-kde", help="build per-class private KDE ensembles")
    p.add_argument("--extracted", required=True)
    p.add_argument("--vocab-priv", required=True, help="released vocabulary from privatize-vocab")
    p.add_argument("--embeddings", required=True, help="whitespace-format embedding file")
    p.add_argument("--dim", type=int, help="embedding dimension (default: inferred)")
    p.add_argument("--mode", choices=BUILD_MODES, required=True)
    p.add_argument("--L", dest="length", type=int, default=10, help="max sequence length")
    p.add_argument("--eps-kde", type=Fraction, required=True)
    p.add_argument("--features", type=int, default=2000, help="random features per sketch")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="run directory to create")
    p.set_defaults(func=cmd_build_kde)

    p = commands.add_parser("sample", help="sample keyphrase sequences from a KDE run")
    p.add_argument("--ensemble", required=True, help="run directory from build-kde")
    p.add_argument("--mode", choices=SAMPLE_MODES, required=True)
    p.add_argument("--strategy", choices=sampling.STRATEGIES, default=sampling.MULTINOMIAL)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--L", dest="length", type=int, help="sequence length (default: from run)")
    p.add_argument("--count", type=int, required=True, help="sequences per class")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="sequence file to write")
    p.set_defaults(func=cmd_sample)

    p = commands.add_parser("generate", help="prompt a generator once per sequence")
    p.add_argument("--sequences", required=True, help="sequence file from sample")
    p.add_argument("--doc-type", required=True, help='e.g. "medical record"')
    p.add_argument("--connector", choices=("mock", "http"), default="mock")
    p.add_argument("--mock-seed", type=int, default=0)
    p.add_argument("--endpoint", help=f"http endpoint (default: ${generation.ENDPOINT_ENV})")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--few-shot", help="JSON-lines few-shot examples (client-supplied)")
    p.add_argument("--concurrency", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = commands.add_parser("audit", help="report and verify a run's privacy budget")
    p.add_argument("--run", required=True, help="run directory containing budget.json")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_audit)

    p = commands.add_parser("eval", help="toy-corpus pipeline comparison")
    p.add_argument("--mode", default="compare")
    p.add_argument("--spec", required=True, help="toy corpus spec (JSON)")
    p.add_argument("--grid", required=True, help="configuration grid (JSON)")
    p.add_argument("--out", required=True, help="report file (JSON)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FileExistsError, LedgerInconsistentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
