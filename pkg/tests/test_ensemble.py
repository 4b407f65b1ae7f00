import logging
import math
from fractions import Fraction

import numpy as np
import pytest

from dpkps.embeddings import embed_prefix, table_from_vectors
from dpkps.ensemble import (
    build_linear_ensemble,
    build_log_ensemble,
    build_prefix_datasets,
    build_sketch,
    ensemble_query,
    linear_block_norm,
    load_ensemble,
    log_block_norm,
    log_sketch_sizes,
    route,
    route_blocks,
    save_ensemble,
    score_extensions,
)
from dpkps.kde import exact_kde, laplace_scale
from dpkps.randomness import child_seeds

TERMS = [f"w{i}" for i in range(12)]


@pytest.fixture
def table():
    rng = np.random.default_rng(5)
    return table_from_vectors({t: rng.standard_normal(4) for t in TERMS})


@pytest.fixture
def term_lists():
    rng = np.random.default_rng(6)
    return [
        [TERMS[j] for j in rng.integers(0, len(TERMS), size=rng.integers(1, 6))]
        for _ in range(50)
    ]


class TestPrefixDatasets:
    def test_short_documents_cycle(self, table):
        docs = [["w0", "w1"]]
        ds = build_prefix_datasets(docs, table, [4], [1.0])[0]
        d = table.dim
        expected = np.concatenate(
            [table.vector("w0"), table.vector("w1"), table.vector("w0"), table.vector("w1")]
        )
        assert np.allclose(ds.vectors[0], expected)

    def test_k1_u1_is_first_unit_embedding(self, table):
        docs = [["w3", "w4"], ["w5"]]
        ds = build_prefix_datasets(docs, table, [1], [1.0])[0]
        assert np.allclose(ds.vectors[0], table.vector("w3"))
        assert np.allclose(ds.vectors[1], table.vector("w5"))

    def test_one_vector_per_document(self, table, term_lists):
        ds = build_prefix_datasets(term_lists, table, [3], [1.0 / 3])[0]
        assert ds.vectors.shape == (len(term_lists), 3 * table.dim)

    def test_block_norms_are_scaled(self, table):
        u = 0.25
        ds = build_prefix_datasets([["w0", "w1", "w2"]], table, [3], [u])[0]
        blocks = ds.vectors[0].reshape(3, table.dim)
        assert np.allclose(np.sum(blocks**2, axis=1), u)

    def test_empty_documents_skipped_with_log(self, table, caplog):
        docs = [["w0"], [], [], ["w1"]]
        with caplog.at_level(logging.WARNING):
            ds = build_prefix_datasets(docs, table, [1], [1.0])[0]
        assert ds.vectors.shape[0] == 2
        assert "skipping 2 documents" in caplog.text

    def test_all_empty_is_an_error(self, table):
        with pytest.raises(ValueError, match="no documents"):
            build_prefix_datasets([[], []], table, [1], [1.0])


class TestEnsembleShapes:
    def test_log_sketch_sizes_for_l10(self):
        assert log_sketch_sizes(10) == [1, 2, 4, 8, 16]

    @pytest.mark.parametrize(
        "max_len,expected", [(1, [1]), (2, [1, 2]), (3, [1, 2, 4]), (8, [1, 2, 4, 8])]
    )
    def test_log_sketch_sizes(self, max_len, expected):
        assert log_sketch_sizes(max_len) == expected

    def test_log_block_norms(self):
        assert log_block_norm(1) == 1.0
        assert log_block_norm(2) == 1.0
        assert log_block_norm(8) == 0.25

    def test_linear_block_norm_is_inverse_length(self):
        assert linear_block_norm(4) == 0.25

    def test_linear_budget_split(self, table, term_lists):
        ens = build_linear_ensemble(term_lists, table, 10, 5, 16, seed=1)
        assert len(ens.sketches) == 10
        assert all(s.epsilon == Fraction(5, 10) for s in ens.sketches)
        assert [s.num_blocks for s in ens.sketches] == list(range(1, 11))

    def test_log_budget_split_l10(self, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 10, 5, 16, seed=1)
        assert len(ens.sketches) == 5
        assert all(s.epsilon == Fraction(1) for s in ens.sketches)
        assert [s.num_blocks for s in ens.sketches] == [1, 2, 4, 8, 16]

    @pytest.mark.parametrize("epsilon", ["1", "5", "7/3"])
    @pytest.mark.parametrize("max_len", [1, 3, 7, 10])
    def test_budget_conservation_exact(self, table, term_lists, epsilon, max_len):
        for build in (build_linear_ensemble, build_log_ensemble):
            ens = build(term_lists, table, max_len, epsilon, 8, seed=2)
            total = sum((s.epsilon for s in ens.sketches), Fraction(0))
            assert total == Fraction(epsilon)

    def test_degenerate_linear_is_single_full_budget_sketch(self, table, term_lists):
        ens = build_linear_ensemble(term_lists, table, 1, 5, 32, seed=9)
        assert len(ens.sketches) == 1
        assert ens.sketches[0].epsilon == Fraction(5)
        # identical to building the one sketch directly with the derived seed
        ds = build_prefix_datasets(term_lists, table, [1], [1.0])[0]
        direct = build_sketch(
            ds.vectors, epsilon=5, num_features=32, block_dim=table.dim,
            block_sq_norm=1.0, seed=child_seeds(9, 1)[0],
        )
        assert np.array_equal(ens.sketches[0].noisy_means, direct.noisy_means)

    def test_per_sketch_noise_grows_with_budget_split(self):
        # splitting the budget L ways scales the per-sketch noise by L
        full = laplace_scale(Fraction(5), 100, 1000)
        split = laplace_scale(Fraction(5, 10), 100, 1000)
        assert split == pytest.approx(10 * full)


class TestRouting:
    def test_examples(self):
        assert route_blocks("logarithmic", 3) == 4
        assert route_blocks("logarithmic", 1) == 1
        assert route_blocks("linear", 7) == 7

    def test_log_routing_within_factor_two(self):
        for ell in range(1, 33):
            k = route_blocks("logarithmic", ell)
            assert ell <= k <= 2 * ell

    def test_route_returns_matching_sketch(self, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 10, 5, 8, seed=3)
        assert route(ens, 5).num_blocks == 8
        assert route(ens, 8).num_blocks == 8
        assert route(ens, 1).num_blocks == 1

    def test_route_validates_range(self, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 10, 5, 8, seed=3)
        with pytest.raises(ValueError):
            route(ens, 0)
        with pytest.raises(ValueError):
            route(ens, 11)


class TestEnsembleQuery:
    def test_exact_sketch_size_has_unit_blowup(self, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 8, 5, 64, seed=4)
        estimate = ensemble_query(ens, ["w0", "w1"], table)
        assert estimate.blowup == 1.0
        assert estimate.prefix_len == 2

    def test_routed_blowup_value(self, table, term_lists):
        # length 5 routes to 8 blocks at u = 2/8: factor e^(0.25 * 3)
        ens = build_log_ensemble(term_lists, table, 10, 5, 16, seed=4)
        estimate = ensemble_query(ens, ["w0", "w1", "w2", "w3", "w4"], table)
        assert estimate.blowup == pytest.approx(math.exp(0.75))

    def test_linear_routes_directly(self, table, term_lists):
        ens = build_linear_ensemble(term_lists, table, 8, 5, 16, seed=4)
        estimate = ensemble_query(ens, [f"w{i}" for i in range(7)], table)
        assert estimate.blowup == 1.0
        assert route(ens, 7).dim == 7 * table.dim

    def test_length_validation(self, table, term_lists):
        ens = build_linear_ensemble(term_lists, table, 3, 5, 8, seed=4)
        with pytest.raises(ValueError):
            ensemble_query(ens, ["w0", "w1", "w2", "w3"], table)

    def test_noiseless_matches_exact_prefix_oracle(self, table, term_lists):
        # estimates track the brute-force prefix KDE within the padding blowup
        features = 30000
        tolerance = 3.0 / math.sqrt(features)
        for build, norm_fn in (
            (build_linear_ensemble, linear_block_norm),
            (build_log_ensemble, log_block_norm),
        ):
            ens = build(term_lists, table, 4, 5, features, seed=8, noise_disabled=True)
            for prefix in (["w0"], ["w0", "w3"], ["w2", "w1", "w4", "w5"]):
                ell = len(prefix)
                sketch = route(ens, ell)
                ds = build_prefix_datasets(
                    term_lists, table, [sketch.num_blocks], [sketch.block_sq_norm]
                )[0]
                y = embed_prefix(prefix, table, sketch.block_sq_norm, pad_to=ell)
                exact = exact_kde(ds.vectors[:, : ell * table.dim], y.data)
                estimate = ensemble_query(ens, prefix, table)
                assert abs(estimate.value - exact) <= tolerance * estimate.blowup

    def test_score_extensions_match_individual_queries(self, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 6, 5, 64, seed=12)
        candidates = table.matrix(TERMS)
        scores = score_extensions(ens, ["w0", "w1"], candidates, table)
        for i, term in enumerate(TERMS):
            single = ensemble_query(ens, ["w0", "w1", term], table)
            assert scores[i] == pytest.approx(single.value, rel=1e-9)


class TestEnsembleSerialization:
    def test_roundtrip(self, tmp_path, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 6, "5/2", 32, seed=13)
        save_ensemble(ens, tmp_path / "ens")
        loaded = load_ensemble(tmp_path / "ens")
        assert loaded.kind == ens.kind
        assert loaded.max_len == 6
        assert loaded.epsilon == Fraction(5, 2)
        for a, b in zip(loaded.sketches, ens.sketches):
            assert np.array_equal(a.noisy_means, b.noisy_means)

    def test_epsilon_sum_verified_on_load(self, tmp_path, table, term_lists):
        ens = build_log_ensemble(term_lists, table, 6, 5, 32, seed=13)
        save_ensemble(ens, tmp_path / "ens")
        manifest = (tmp_path / "ens" / "ensemble.json").read_text()
        (tmp_path / "ens" / "ensemble.json").write_text(
            manifest.replace('"epsilon": "5"', '"epsilon": "6"')
        )
        with pytest.raises(ValueError, match="sum to"):
            load_ensemble(tmp_path / "ens")
