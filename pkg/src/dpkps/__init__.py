"""Differentially private keyphrase sequences for prompt-seeded synthetic text.

The pipeline: extract keyphrases from a private corpus against a public
vocabulary, release a private top-N vocabulary from a noisy histogram, build
per-class DP KDE sketches over phrase-embedding prefixes, sample keyphrase
sequences from the sketched densities, and seed generation prompts with
them. Everything downstream of the sketches is post-processing and spends
no additional privacy budget.
"""

from .budget import (
    AuditReport,
    BudgetEntry,
    BudgetExceededError,
    BudgetLedger,
    LedgerInconsistentError,
    as_epsilon,
    audit,
)
from .corpus import (
    Document,
    ExtractedSequence,
    PublicVocabulary,
    TermRecord,
    extract_terms,
    load_corpus,
    load_vocabulary,
    terms_for,
    vocabulary_from_terms,
)
from .embeddings import (
    BlockVector,
    EmbeddingTable,
    UnknownTermError,
    embed_prefix,
    load_embeddings,
)
from .ensemble import (
    KdeEnsemble,
    PrefixDataset,
    build_linear_ensemble,
    build_log_ensemble,
    build_prefix_datasets,
    ensemble_query,
    load_ensemble,
    save_ensemble,
    score_extensions,
)
from .evaluation import (
    EvalGrid,
    EvalReport,
    ToyCorpusSpec,
    centroid_classify,
    compare_modes,
    run_pipeline,
    synth_corpus,
)
from .generation import (
    FewShotExample,
    GenerationResult,
    GeneratorConnector,
    HttpConnector,
    MockConnector,
    PromptTemplate,
    SyntheticDocument,
    generate_corpus,
    render_prompt,
)
from .kde import (
    DpKdeSketch,
    KdeEstimate,
    SketchAccuracyWarning,
    build_sketch,
    exact_kde,
    exact_prefix_kde,
    gaussian_kernel,
    load_sketch,
    query,
    query_prefix,
    save_sketch,
)
from .sampling import (
    KeyphraseSequence,
    ScoreVector,
    sample_independent,
    sample_iterative,
    score_to_distribution,
)
from .vocab import (
    NoisyHistogram,
    PrivatizedVocabulary,
    build_histogram,
    privatize_histogram,
    select_top_n,
)

__version__ = "0.1.0"
