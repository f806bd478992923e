"""Model kinds: propagation, sampling, training loop, checkpoints."""

import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from lgcf import (DomainError, EmbeddingTable, LabelEncoding, SplitSpec,
                  TrainConfig, TrainedModel, WalkConfig, build_graph, extract,
                  forward_instance, init_embeddings, label_graph,
                  lgcf_ens_score, lightgcn_propagate, load_model, mf_score,
                  normalize_adjacency, one_hot_features, param_count,
                  run_gradcheck, sample_negative, save_model, seed_stream,
                  train)
from lgcf.models import (MODEL_KINDS, LgcfScorer, Propagation,
                         load_adam_states)

CHI2_CRIT_DF19 = 43.82  # alpha = 0.001

TINY_WALK = WalkConfig(restart_prob=0.2, walk_len=8, max_nodes=10)


def tiny_tc(**overrides):
    base = dict(epochs=2, batch_size=8, master_seed=7, walk=TINY_WALK,
                gcn_layers=2, hidden_dim=4, label_cap=8, embed_dim=4,
                lightgcn_layers=2, lr=1e-2)
    base.update(overrides)
    return TrainConfig(**base)


def star_split():
    """5 users, 6 items; 3 validation pairs whose pools stay under K=10."""
    train = ((0, 5), (1, 6), (2, 7), (3, 8), (4, 9), (0, 10))
    val = ((0, 6), (1, 7), (2, 8))
    graph = build_graph(train + val, 5, 6)
    return graph, SplitSpec(train, val, (), 0, "normal", 5, 6)


class TestParamCount:
    def test_lgcf_closed_form(self):
        got = param_count("lgcf", feature_dim=64, hidden_dim=32, gcn_layers=3)
        assert got == 64 * 32 + 2 * 32 * 32 + 32 == 4128

    def test_lgcf_ignores_graph_size(self):
        small = param_count("lgcf", num_users=1, num_items=1)
        huge = param_count("lgcf", num_users=10 ** 6, num_items=10 ** 6)
        assert small == huge

    def test_embedding_kinds_grow_linearly(self):
        assert param_count("mf", num_users=100, num_items=100, embed_dim=32) == 6400
        assert param_count("mf", num_users=10000, num_items=100,
                           embed_dim=32) == 323200
        assert param_count("lightgcn", num_users=19900, num_items=100,
                           embed_dim=32) == 640000

    def test_composite_kinds(self):
        gnn = 64 * 32 + 2 * 32 * 32
        tables = 200 * 32
        emb = param_count("lgcf-emb", num_users=100, num_items=100)
        assert emb == gnn + tables + (32 + 32)
        ens = param_count("lgcf-ens", num_users=100, num_items=100)
        assert ens == gnn + 32 + tables + 1

    def test_unknown_kind(self):
        with pytest.raises(DomainError):
            param_count("gbdt")


class TestPropagation:
    def test_single_edge_one_layer(self):
        g = build_graph([(0, 1)], 1, 1)
        tables = EmbeddingTable(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
        refined = lightgcn_propagate(g, tables, 1)
        assert np.allclose(refined.user_matrix, [[0.5, 0.5]])
        assert np.allclose(refined.item_matrix, [[0.5, 0.5]])

    def test_zero_layers_is_identity(self):
        rng = np.random.default_rng(60)
        g = build_graph([(0, 2), (1, 2), (1, 3)], 2, 2)
        tables = init_embeddings(2, 2, 3, rng)
        refined = lightgcn_propagate(g, tables, 0)
        assert np.array_equal(refined.user_matrix, tables.user_matrix)
        assert np.array_equal(refined.item_matrix, tables.item_matrix)

    def dense_mean_of_powers(self, g, e0, layers):
        a = np.zeros((g.num_nodes, g.num_nodes))
        for u, i in g.edges():
            a[u, i] = a[i, u] = 1.0
        deg = a.sum(axis=1)
        inv = np.zeros_like(deg)
        inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
        s = a * inv[:, None] * inv[None, :]
        acc = e0.copy()
        cur = e0
        for _ in range(layers):
            cur = s @ cur
            acc = acc + cur
        return acc / (layers + 1)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(61)
        for _ in range(10):
            n, m = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            edges = [(u, n + j) for u in range(n) for j in range(m)
                     if rng.random() < 0.4]
            edges = edges or [(0, n)]
            g = build_graph(edges, n, m)
            tables = init_embeddings(n, m, 4, rng)
            layers = int(rng.integers(1, 4))
            refined = lightgcn_propagate(g, tables, layers)
            e0 = np.vstack([tables.user_matrix, tables.item_matrix])
            want = self.dense_mean_of_powers(g, e0, layers)
            got = np.vstack([refined.user_matrix, refined.item_matrix])
            assert np.abs(got - want).max() < 1e-12

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(62)
        n = m = 5
        edges = [(u, n + j) for u in range(n) for j in range(m)
                 if rng.random() < 0.5] or [(0, n)]
        g = build_graph(edges, n, m)
        tables = init_embeddings(n, m, 3, rng)
        pu, pi = rng.permutation(n), rng.permutation(m)
        g2 = build_graph([(int(pu[u]), n + int(pi[i - n])) for u, i in edges], n, m)
        tables2 = EmbeddingTable(tables.user_matrix[np.argsort(pu)],
                                 tables.item_matrix[np.argsort(pi)])
        r1 = lightgcn_propagate(g, tables, 2)
        r2 = lightgcn_propagate(g2, tables2, 2)
        assert np.allclose(r2.user_matrix[pu], r1.user_matrix, atol=1e-12)
        assert np.allclose(r2.item_matrix[pi], r1.item_matrix, atol=1e-12)

    def test_validation(self):
        g = build_graph([(0, 1)], 1, 1)
        with pytest.raises(DomainError):
            Propagation(g, -1)
        with pytest.raises(DomainError):
            Propagation(g, 1).apply(np.zeros((3, 2)))
        with pytest.raises(DomainError):
            EmbeddingTable(np.zeros((2, 3)), np.zeros((2, 4)))


class TestScores:
    def test_mf_score_hand_dot(self):
        tables = EmbeddingTable(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]))
        assert mf_score(tables, 0, 1) == 1.0

    def test_ens_score_late_fusion(self):
        got = lgcf_ens_score(0.3, np.array([1.0, 2.0]), np.array([3.0, -1.0]), 2.0)
        assert got == pytest.approx(2.3, abs=1e-15)


class TestSampleNegative:
    def test_single_free_item_always_chosen(self):
        g = build_graph([(0, 1), (0, 2)], 1, 3)
        for seed in range(20):
            assert sample_negative(g, 0, seed_stream(seed)) == 3

    def test_uniformity_chi_squared(self):
        g = build_graph([(0, 2)] + [(1, j) for j in range(2, 23)], 2, 21)
        rng = seed_stream(13)
        counts = Counter(sample_negative(g, 0, rng) for _ in range(10 ** 4))
        assert set(counts) <= set(range(3, 23))
        expected = 10 ** 4 / 20
        chi2 = sum((counts.get(j, 0) - expected) ** 2 / expected
                   for j in range(3, 23))
        assert chi2 < CHI2_CRIT_DF19

    def test_never_returns_interacted(self):
        rng = np.random.default_rng(63)
        n, m = 4, 12
        edges = [(u, n + j) for u in range(n) for j in range(m)
                 if rng.random() < 0.6]
        g = build_graph(edges or [(0, n)], n, m)
        stream = seed_stream(64)
        for _ in range(20000):
            u = int(rng.integers(n))
            if g.degree(u) == m:
                continue
            assert not g.has_edge(u, sample_negative(g, u, stream))

    def test_saturated_user_rejected(self):
        g = build_graph([(0, 1), (0, 2), (0, 3)], 1, 3)
        with pytest.raises(DomainError):
            sample_negative(g, 0, seed_stream(0))


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig()

    @pytest.mark.parametrize("bad", [
        dict(epochs=0), dict(batch_size=0), dict(negatives_per_positive=0),
        dict(eval_every=0), dict(master_seed=-1), dict(lambda_mode="bogus"),
        dict(val_negatives=0),
    ])
    def test_rejects(self, bad):
        with pytest.raises(DomainError):
            TrainConfig(**bad)


class TestTrainBasics:
    def test_unknown_kind(self):
        g, split = star_split()
        with pytest.raises(DomainError):
            train("gbdt", g, split, tiny_tc())

    def test_split_graph_mismatch(self):
        g, split = star_split()
        with pytest.raises(DomainError):
            train("mf", g, replace(split, num_items=7), tiny_tc())

    def test_empty_train_edges(self):
        g, split = star_split()
        with pytest.raises(DomainError):
            train("mf", g, replace(split, train_edges=()), tiny_tc())

    def test_single_edge_descent(self):
        """One Adam step on one pair lowers the one-pair BPR objective."""
        g = build_graph([(0, 1)], 1, 2)
        split = SplitSpec(((0, 1),), (), (), 0, "normal", 1, 2)
        tc = TrainConfig(epochs=1, batch_size=1, master_seed=2, embed_dim=4)
        result = train("mf", g, split, tc)
        assert len(result.history) == 1
        assert result.best_epoch is None
        recorded = result.history[0].train_loss
        tables = result.model.tables
        # The only possible negative for user 0 is item 2.
        post = math.log(1 + math.exp(-(mf_score(tables, 0, 1)
                                       - mf_score(tables, 0, 2))))
        assert post < recorded < math.log(2)

    def test_history_is_deterministic(self):
        g, split = star_split()

        def run():
            res = train("lgcf", g, split, tiny_tc())
            return res

        a, b = run(), run()
        for ra, rb in zip(a.history, b.history, strict=True):
            assert (ra.epoch, ra.train_loss, ra.val_hr10, ra.val_ndcg10) == \
                   (rb.epoch, rb.train_loss, rb.val_hr10, rb.val_ndcg10)
        for wa, wb in zip(a.model.gnn.arrays(), b.model.gnn.arrays()):
            assert np.array_equal(wa, wb)

    def test_seed_changes_trajectory(self):
        g, split = star_split()
        a = train("mf", g, split, tiny_tc(epochs=3))
        b = train("mf", g, split, tiny_tc(epochs=3, master_seed=8))
        assert a.history[-1].train_loss != b.history[-1].train_loss

    def test_early_stopping_truncates_history(self):
        """Tiny candidate pools pin val HR@10 at 1, so patience must fire."""
        g, split = star_split()
        tc = tiny_tc(epochs=60, early_stop_patience=2, eval_every=1)
        result = train("mf", g, split, tc)
        assert len(result.history) == 3
        assert result.best_epoch == 1
        assert all(rec.val_hr10 == 1.0 for rec in result.history)

    def test_cache_subgraphs_deterministic(self):
        g, split = star_split()
        tc = tiny_tc(cache_subgraphs=True)
        a = train("lgcf", g, split, tc)
        b = train("lgcf", g, split, tc)
        losses = [(ra.train_loss, rb.train_loss)
                  for ra, rb in zip(a.history, b.history, strict=True)]
        assert all(x == y for x, y in losses)


class TestLgcfLearning:
    def test_separates_connected_from_isolated_item(self):
        edges = [(u, i) for u in range(5) for i in range(5, 9)]
        g = build_graph(edges, 5, 5)  # item 9 never interacts
        split = SplitSpec(tuple(edges), (), (), 0, "normal", 5, 5)
        tc = TrainConfig(epochs=15, batch_size=8, master_seed=3, lr=1e-2,
                         walk=WalkConfig(0.15, 12, 12, True), gcn_layers=2,
                         hidden_dim=8, label_cap=16)
        scorer = train("lgcf", g, split, tc).model.make_scorer(g)
        assert scorer.score(0, 5) > scorer.score(0, 9)

    def test_scorer_is_stable_across_calls(self):
        g, split = star_split()
        model = train("lgcf", g, split, tiny_tc(epochs=1)).model
        scorer = model.make_scorer(g)
        first = [scorer.score(u, i) for u, i in split.val_edges]
        second = [scorer.score(u, i) for u, i in split.val_edges]
        assert first == second
        again = model.make_scorer(g)
        assert first == [again.score(u, i) for u, i in split.val_edges]

    def test_score_invariant_to_context_node_order(self):
        """Reordering non-target nodes must not move the score."""
        rng = np.random.default_rng(65)
        g, _ = star_split()
        model = train("lgcf", g, star_split()[1], tiny_tc(epochs=1)).model
        enc = LabelEncoding(model.gnn.feature_dim)
        worst = 0.0
        for trial in range(25):
            lg = label_graph(extract(g, int(rng.integers(5)),
                                     5 + int(rng.integers(6)),
                                     WalkConfig(0.1, 30, 10), seed_stream(trial)))
            k = len(lg.nodes)
            if k < 3:
                continue
            perm = np.concatenate([[0, 1], 2 + rng.permutation(k - 2)])
            base = forward_instance(one_hot_features(lg.labels, enc),
                                    normalize_adjacency(lg.adjacency),
                                    model.gnn).score_value
            shuffled = forward_instance(
                one_hot_features(lg.labels[perm], enc),
                normalize_adjacency(lg.adjacency[np.ix_(perm, perm)]),
                model.gnn).score_value
            worst = max(worst, abs(base - shuffled))
        assert worst <= 1e-12


class TestEnsembleLambda:
    def test_fixed_mode_keeps_value(self):
        g, split = star_split()
        tc = tiny_tc(lambda_mode="fixed", lambda_ens=2.5)
        model = train("lgcf-ens", g, split, tc).model
        assert model.lam == 2.5

    def test_grid_mode_picks_from_grid(self):
        g, split = star_split()
        tc = tiny_tc(lambda_mode="grid", lambda_grid=(0.1, 1.0))
        model = train("lgcf-ens", g, split, tc).model
        assert model.lam in tc.lambda_grid

    def test_learnable_mode_is_finite(self):
        g, split = star_split()
        tc = tiny_tc(lambda_mode="learnable")
        model = train("lgcf-ens", g, split, tc).model
        assert math.isfinite(model.lam)

    def test_history_spans_both_stages(self):
        g, split = star_split()
        result = train("lgcf-ens", g, split, tiny_tc(lambda_mode="fixed"))
        assert [r.epoch for r in result.history] == [1, 2, 3, 4]


class TestCheckpoints:
    @pytest.mark.parametrize("kind", MODEL_KINDS)
    def test_roundtrip(self, kind, tmp_path):
        g, split = star_split()
        tc = tiny_tc(epochs=1, lambda_mode="fixed")
        result = train(kind, g, split, tc)
        path = tmp_path / "checkpoint.json"
        save_model(path, result.model, result.adam)
        back = load_model(path)
        assert back.to_dict() == result.model.to_dict()
        scorer_a = result.model.make_scorer(g)
        scorer_b = back.make_scorer(g)
        for u, i in split.val_edges:
            assert scorer_a.score(u, i) == scorer_b.score(u, i)
        states = load_adam_states(path)
        if result.adam is None:
            assert states is None
        else:
            assert set(states) == set(result.adam)
            for name, st in states.items():
                assert st.t == result.adam[name].t

    def test_version_gate(self, tmp_path):
        g, split = star_split()
        model = train("mf", g, split, tiny_tc(epochs=1)).model
        payload = model.to_dict()
        payload["format_version"] = 999
        with pytest.raises(DomainError):
            TrainedModel.from_dict(payload)

    def test_scorer_kinds(self):
        g, split = star_split()
        for kind in MODEL_KINDS:
            model = train(kind, g, split, tiny_tc(epochs=1,
                                                  lambda_mode="fixed")).model
            scorer = model.make_scorer(g)
            assert scorer.kind == kind
            assert math.isfinite(scorer.score(0, 6))

    def test_make_scorer_unknown_kind(self):
        g, _ = star_split()
        bogus = TrainedModel("gbdt", TINY_WALK, 8, 2, 0)
        with pytest.raises(DomainError):
            bogus.make_scorer(g)


class TestGradcheckEntry:
    def test_lgcf_small(self):
        report = run_gradcheck("lgcf", seed=5, instances=2)
        assert report.passed, report.max_rel_err

    def test_lgcf_emb_small(self):
        report = run_gradcheck("lgcf-emb", seed=6, instances=2)
        assert report.passed, report.max_rel_err

    def test_unknown_kind(self):
        with pytest.raises(DomainError):
            run_gradcheck("mf")
