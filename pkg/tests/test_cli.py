import json
from fractions import Fraction

import pytest

from dpkps.budget import BudgetLedger
from dpkps.cli import main
from dpkps.corpus import save_corpus
from dpkps.embeddings import write_embeddings
from dpkps.evaluation import ToyCorpusSpec, synth_corpus


@pytest.fixture
def workspace(tmp_path):
    """Toy corpus, public vocabulary and embedding files on disk."""
    pools = tuple(tuple(f"c{c}term{i:02d}" for i in range(20)) for c in range(2))
    spec = ToyCorpusSpec(
        docs_per_class=60,
        class_term_pools=pools,
        terms_per_doc=6,
        seed=9,
        embedding_dim=8,
        term_weight_decay=0.85,
    )
    docs, table = synth_corpus(spec)
    corpus_path = tmp_path / "corpus.jsonl"
    save_corpus(docs, corpus_path)
    vocab_path = tmp_path / "vocab.txt"
    terms = sorted({t for pool in pools for t in pool})
    vocab_path.write_text("".join(f"{t}\n" for t in terms), encoding="utf-8")
    emb_path = tmp_path / "embeddings.txt"
    write_embeddings(table, emb_path)
    return tmp_path, corpus_path, vocab_path, emb_path


def run_pipeline(root, corpus_path, vocab_path, emb_path, run_name="run"):
    extracted = root / "extracted.jsonl"
    assert main([
        "extract", "--corpus", str(corpus_path), "--vocab", str(vocab_path),
        "--limit", "5", "--max-words", "1", "--out", str(extracted),
    ]) == 0
    run_dir = root / run_name
    run_dir.mkdir()
    vocab_priv = run_dir / "vocab_private.txt"
    assert main([
        "privatize-vocab", "--extracted", str(extracted), "--vocab", str(vocab_path),
        "--n", "15", "--s", "5", "--eps-voc", "1", "--seed", "21",
        "--max-words", "1", "--out", str(vocab_priv),
    ]) == 0
    kde_dir = run_dir / "kde"
    assert main([
        "build-kde", "--extracted", str(extracted), "--vocab-priv", str(vocab_priv),
        "--embeddings", str(emb_path), "--mode", "independent", "--L", "4",
        "--eps-kde", "5", "--features", "128", "--seed", "31", "--out", str(kde_dir),
    ]) == 0
    seqs = run_dir / "seqs.jsonl"
    assert main([
        "sample", "--ensemble", str(kde_dir), "--mode", "independent",
        "--L", "4", "--count", "12", "--seed", "41", "--out", str(seqs),
    ]) == 0
    return extracted, vocab_priv, kde_dir, seqs


class TestPipeline:
    def test_extract_writes_expected_records(self, workspace):
        root, corpus_path, vocab_path, emb_path = workspace
        out = root / "extracted.jsonl"
        assert main([
            "extract", "--corpus", str(corpus_path), "--vocab", str(vocab_path),
            "--limit", "5", "--max-words", "1", "--out", str(out),
        ]) == 0
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 120
        assert all(set(r) == {"id", "label", "terms"} for r in records)
        assert all(len(r["terms"]) <= 5 for r in records)

    def test_extract_stdout_mode(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        assert main([
            "extract", "--corpus", str(corpus_path), "--vocab", str(vocab_path),
            "--limit", "3", "--max-words", "1",
        ]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 120

    def test_full_run_artifacts(self, workspace):
        root, corpus_path, vocab_path, emb_path = workspace
        extracted, vocab_priv, kde_dir, seqs = run_pipeline(root, corpus_path, vocab_path, emb_path)

        released = [l for l in vocab_priv.read_text().splitlines() if l]
        assert len(released) == 15
        manifest = json.loads((kde_dir / "manifest.json").read_text())
        assert manifest["mode"] == "independent"
        assert manifest["sequence_length"] == 1
        assert [c["label"] for c in manifest["classes"]] == ["class0", "class1"]

        ledger = BudgetLedger.load(kde_dir / "budget.json")
        assert ledger.total == Fraction(6)
        assert [e.name for e in ledger.entries] == [
            "vocabulary_privatization",
            "kde_ensembles",
        ]
        kde_details = ledger.entries[1].details
        assert kde_details["composition"] == "parallel"
        assert kde_details["classes"] == ["class0", "class1"]

        records = [json.loads(line) for line in seqs.read_text().splitlines()]
        assert len(records) == 24  # 12 per class
        assert {r["label"] for r in records} == {"class0", "class1"}
        assert all(len(r["terms"]) == 4 for r in records)
        assert all(set(r["terms"]) <= set(released) for r in records)

    def test_generate_with_mock_connector(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        *_, seqs = run_pipeline(root, corpus_path, vocab_path, emb_path)
        out = root / "synth.jsonl"
        assert main([
            "generate", "--sequences", str(seqs), "--doc-type", "medical record",
            "--connector", "mock", "--concurrency", "4", "--out", str(out),
        ]) == 0
        assert "dispatched 24 prompts" in capsys.readouterr().out
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(records) == 24
        for record in records:
            for term in record["terms"]:
                assert term in record["text"]

    def test_audit_reports_and_verifies(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        *_, kde_dir, _ = run_pipeline(root, corpus_path, vocab_path, emb_path)
        assert main(["audit", "--run", str(kde_dir)]) == 0
        out = capsys.readouterr().out
        assert "total epsilon: 6" in out
        assert "artifact consistency: ok" in out

    def test_audit_json_mode(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        *_, kde_dir, _ = run_pipeline(root, corpus_path, vocab_path, emb_path)
        assert main(["audit", "--run", str(kde_dir), "--json"]) == 0
        data = json.loads(capsys.readouterr().out.split("artifact consistency")[0])
        assert data["total"] == "6"

    def test_sample_refuses_missing_ledger(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        *_, kde_dir, _ = run_pipeline(root, corpus_path, vocab_path, emb_path)
        (kde_dir / "budget.json").unlink()
        code = main([
            "sample", "--ensemble", str(kde_dir), "--mode", "independent",
            "--count", "2", "--seed", "1", "--out", str(root / "x.jsonl"),
        ])
        assert code == 1
        assert "budget.json is missing" in capsys.readouterr().err

    def test_sample_refuses_inconsistent_ledger(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        *_, kde_dir, _ = run_pipeline(root, corpus_path, vocab_path, emb_path)
        manifest_path = kde_dir / "manifest.json"
        manifest_path.write_text(
            manifest_path.read_text().replace('"epsilon_kde": "5"', '"epsilon_kde": "4"')
        )
        code = main([
            "sample", "--ensemble", str(kde_dir), "--mode", "independent",
            "--count", "2", "--seed", "1", "--out", str(root / "x.jsonl"),
        ])
        assert code == 1
        assert "epsilon" in capsys.readouterr().err

    def test_iterative_sampling_needs_long_enough_run(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        *_, kde_dir, _ = run_pipeline(root, corpus_path, vocab_path, emb_path)
        code = main([
            "sample", "--ensemble", str(kde_dir), "--mode", "iterative",
            "--L", "3", "--count", "2", "--seed", "1", "--out", str(root / "x.jsonl"),
        ])
        assert code == 1  # independent run only has a 1-block sketch

    def test_build_kde_refuses_existing_run(self, workspace, capsys):
        root, corpus_path, vocab_path, emb_path = workspace
        extracted, vocab_priv, kde_dir, _ = run_pipeline(root, corpus_path, vocab_path, emb_path)
        code = main([
            "build-kde", "--extracted", str(extracted), "--vocab-priv", str(vocab_priv),
            "--embeddings", str(emb_path), "--mode", "independent",
            "--eps-kde", "5", "--features", "64", "--seed", "1", "--out", str(kde_dir),
        ])
        assert code == 1
        assert "fresh directory" in capsys.readouterr().err

    def test_log_mode_builds_log_ensemble(self, workspace):
        root, corpus_path, vocab_path, emb_path = workspace
        extracted = root / "e.jsonl"
        main([
            "extract", "--corpus", str(corpus_path), "--vocab", str(vocab_path),
            "--limit", "5", "--max-words", "1", "--out", str(extracted),
        ])
        vocab_priv = root / "vp.txt"
        main([
            "privatize-vocab", "--extracted", str(extracted), "--vocab", str(vocab_path),
            "--n", "10", "--s", "5", "--eps-voc", "1", "--seed", "2",
            "--max-words", "1", "--out", str(vocab_priv),
        ])
        kde_dir = root / "kde-log"
        assert main([
            "build-kde", "--extracted", str(extracted), "--vocab-priv", str(vocab_priv),
            "--embeddings", str(emb_path), "--mode", "log", "--L", "4",
            "--eps-kde", "5", "--features", "64", "--seed", "3", "--out", str(kde_dir),
        ]) == 0
        ensemble_manifest = json.loads((kde_dir / "class_000" / "ensemble.json").read_text())
        assert [s["num_blocks"] for s in ensemble_manifest["sketches"]] == [1, 2, 4]
        seqs = root / "it.jsonl"
        assert main([
            "sample", "--ensemble", str(kde_dir), "--mode", "iterative",
            "--strategy", "multinomial", "--L", "4", "--count", "3",
            "--seed", "4", "--out", str(seqs),
        ]) == 0
        records = [json.loads(line) for line in seqs.read_text().splitlines()]
        assert len(records) == 6 and all(len(r["terms"]) == 4 for r in records)


class TestBuildModes:
    def test_linear_mode_builds_one_sketch_per_length(self, workspace):
        root, corpus_path, vocab_path, emb_path = workspace
        extracted = root / "e.jsonl"
        main([
            "extract", "--corpus", str(corpus_path), "--vocab", str(vocab_path),
            "--limit", "5", "--max-words", "1", "--out", str(extracted),
        ])
        vocab_priv = root / "vp.txt"
        main([
            "privatize-vocab", "--extracted", str(extracted), "--vocab", str(vocab_path),
            "--n", "10", "--s", "5", "--eps-voc", "1", "--seed", "2",
            "--max-words", "1", "--out", str(vocab_priv),
        ])
        kde_dir = root / "kde-linear"
        assert main([
            "build-kde", "--extracted", str(extracted), "--vocab-priv", str(vocab_priv),
            "--embeddings", str(emb_path), "--mode", "linear", "--L", "4",
            "--eps-kde", "2", "--features", "32", "--seed", "3", "--out", str(kde_dir),
        ]) == 0
        ensemble_manifest = json.loads((kde_dir / "class_000" / "ensemble.json").read_text())
        assert [s["num_blocks"] for s in ensemble_manifest["sketches"]] == [1, 2, 3, 4]
        assert all(s["epsilon"] == "1/2" for s in ensemble_manifest["sketches"])

    def test_generate_http_without_endpoint_fails(self, workspace, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("DPKPS_GEN_ENDPOINT", raising=False)
        seqs = tmp_path / "s.jsonl"
        seqs.write_text('{"label": "", "terms": ["a"], "seed": 0}\n')
        code = main([
            "generate", "--sequences", str(seqs), "--doc-type", "note",
            "--connector", "http", "--out", str(tmp_path / "o.jsonl"),
        ])
        assert code == 1
        assert "endpoint" in capsys.readouterr().err


class TestEvalCommand:
    def test_compare_smoke(self, tmp_path, capsys):
        pools = [[f"c{c}term{i:02d}" for i in range(12)] for c in range(2)]
        (tmp_path / "toy.json").write_text(json.dumps({
            "docs_per_class": 25,
            "class_term_pools": pools,
            "terms_per_doc": 4,
            "seed": 5,
            "embedding_dim": 8,
            "term_weight_decay": 0.85,
        }))
        (tmp_path / "grid.json").write_text(json.dumps({
            "modes": ["independent"],
            "budgets": [["1", "5"]],
            "s_per_doc": 4,
            "vocab_top_n": 10,
            "sequence_length": 3,
            "sequences_per_class": 8,
            "num_features": 64,
            "test_docs_per_class": 8,
            "seed": 1,
        }))
        out = tmp_path / "report.json"
        assert main([
            "eval", "--mode", "compare", "--spec", str(tmp_path / "toy.json"),
            "--grid", str(tmp_path / "grid.json"), "--out", str(out),
        ]) == 0
        reports = json.loads(out.read_text())
        assert len(reports) == 1
        assert "accuracy" in capsys.readouterr().out
