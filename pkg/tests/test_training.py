"""Tests for negative sampling, BPR losses, epochs and early stopping."""

import math

import numpy as np
import pytest
from scipy import stats

from prefrank.compute import Tensor
from prefrank.config import ModelConfig
from prefrank.dataio import SplitPart
from prefrank.errors import ConfigError, SamplingError
from prefrank.graph import build_graph
from prefrank.model import EMBEDDING, Mode, init_params
from prefrank.models import MetricsReport
from prefrank.services import training_service
from prefrank.services.training_service import (
    NegativeSampler,
    Trainer,
    TripletBatch,
    batch_loss,
    bpr_loss,
    bpr_triplet_loss,
    fit,
    sample_negatives,
    total_loss,
    train_epoch,
)


@pytest.mark.unit
class TestBprLoss:
    def test_equal_scores(self):
        assert bpr_triplet_loss(0.0) == pytest.approx(math.log(2), abs=1e-9)
        assert bpr_triplet_loss(0.0) == pytest.approx(0.693147, abs=1e-6)

    def test_margin_two(self):
        assert bpr_triplet_loss(2.0) == pytest.approx(0.126928, abs=1e-6)
        assert bpr_triplet_loss(2.0) == pytest.approx(math.log1p(math.exp(-2.0)), abs=1e-12)

    def test_strictly_decreasing(self):
        rng = np.random.default_rng(0)
        margins = np.sort(rng.uniform(-20, 20, size=1000))
        losses = bpr_triplet_loss(margins)
        assert np.all(np.diff(losses) < 0)
        assert bpr_triplet_loss(40.0) < 1e-15

    def test_sum_over_batch(self):
        reps = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        batch = TripletBatch(np.array([0, 0]), np.array([0, 0]), np.array([1, 0]))
        # margins are 1 and 0
        expected = float(bpr_triplet_loss(1.0) + bpr_triplet_loss(0.0))
        assert float(bpr_loss(reps, batch, num_users=1).value) == pytest.approx(expected, abs=1e-12)


@pytest.mark.unit
class TestTotalLoss:
    def test_single_task_identity(self):
        assert float(total_loss([Tensor(np.array(0.7))]).value) == pytest.approx(0.7)

    def test_mean(self):
        assert float(total_loss([Tensor(np.array(0.6)), Tensor(np.array(1.0))]).value) == pytest.approx(0.8)

    def test_order_invariant(self):
        terms = [Tensor(np.array(v)) for v in (0.3, 1.7, 0.25, 2.0)]
        assert float(total_loss(terms).value) == pytest.approx(float(total_loss(terms[::-1]).value), abs=1e-15)

    def test_batch_loss_scales_by_batch_size(self, tiny_split):
        graph = build_graph(tiny_split)
        config = ModelConfig(num_tasks=2, layer_dims=(4, 4), dropout=0.0)
        store = init_params(config, graph.num_entities, seed=0)
        batch = TripletBatch(np.array([0, 1, 2]), np.array([0, 1, 2]), np.array([4, 0, 1]))
        total, tasks = batch_loss(store.constants(), graph, config, batch, Mode.EVAL)
        embedding = store.constants()[EMBEDDING]
        assert float(tasks[0].value) == pytest.approx(float(bpr_loss(embedding, batch, 5).value) / 3, abs=1e-12)
        assert float(total.value) == pytest.approx((float(tasks[0].value) + float(tasks[1].value)) / 2, abs=1e-12)


@pytest.mark.unit
class TestNegativeSampling:
    def test_forced_outcome(self, make_corpus):
        data = make_corpus([(0, 0), (0, 1), (0, 2), (0, 3)], num_items=5)
        rng = np.random.default_rng(0)
        assert {sample_negatives(data, 0, rng) for _ in range(50)} == {4}

    def test_never_a_training_positive(self, make_random_corpus):
        rng = np.random.default_rng(1)
        data = make_random_corpus(rng, 20, 15, per_user=(1, 10), part_probs=(0.8, 0.1, 0.1))
        sampler = NegativeSampler(data)
        users = rng.integers(20, size=100_000)
        users = users[np.array([len(items) < 15 for items in data.user_items(SplitPart.TRAIN)])[users]]
        negatives = sampler.sample(users, rng)
        keys = set(map(tuple, data.train.tolist()))
        assert not any((int(u), int(j)) in keys for u, j in zip(users, negatives))

    def test_uniform_over_non_interacted(self, make_corpus):
        data = make_corpus([(0, 0), (0, 3), (0, 5)], num_items=10)
        sampler = NegativeSampler(data)
        draws = sampler.sample(np.zeros(100_000, dtype=np.int64), np.random.default_rng(2))
        candidates = [1, 2, 4, 6, 7, 8, 9]
        counts = np.array([np.sum(draws == c) for c in candidates])
        assert counts.sum() == 100_000
        assert stats.chisquare(counts).pvalue > 0.01

    def test_held_out_items_are_valid_negatives(self, make_corpus):
        data = make_corpus([(0, 0), (0, 1)], [SplitPart.TRAIN, SplitPart.TEST], num_items=2)
        assert sample_negatives(data, 0, np.random.default_rng(0)) == 1

    def test_sampling_without_training_pairs(self, make_corpus):
        data = make_corpus([(0, 1), (1, 2)], [SplitPart.TEST, SplitPart.VALIDATION], num_items=3)
        rng = np.random.default_rng(3)
        assert 0 <= sample_negatives(data, 0, rng) < 3
        draws = NegativeSampler(data).sample(np.array([0, 1, 1]), rng)
        assert draws.shape == (3,)

    def test_user_with_every_item(self, make_corpus):
        data = make_corpus([(0, 0), (0, 1), (1, 0)])
        with pytest.raises(SamplingError, match="user 0"):
            sample_negatives(data, 0, np.random.default_rng(0))


@pytest.mark.unit
class TestTrainEpoch:
    def test_zero_learning_rate_leaves_parameters(self, tiny_split, make_config):
        config = make_config(lr=0.0)
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        before = store.copy()
        train_epoch(store, graph, tiny_split, config)
        for name in store.names:
            np.testing.assert_array_equal(store[name], before[name])

    def test_bit_identical_with_fixed_seed(self, tiny_split, make_config):
        config = make_config(dropout=0.2, batch_size=4)
        graph = build_graph(tiny_split)
        stores = []
        for _ in range(2):
            store = init_params(config.network(), graph.num_entities, config.seed)
            train_epoch(store, graph, tiny_split, config)
            stores.append(store)
        assert stores[0].equals(stores[1])

    def test_batches_cover_every_positive_once(self, tiny_split, make_config):
        config = make_config(batch_size=4)
        graph = build_graph(tiny_split)
        trainer = Trainer(init_params(config.network(), graph.num_entities, 0), graph, tiny_split,
                          config.network(), config.training())
        batches = trainer.batches()
        assert [len(b) for b in batches] == [4, 4, 4, 3]
        seen = sorted((int(u), int(i)) for b in batches for u, i in zip(b.users, b.positives))
        assert seen == sorted(map(tuple, tiny_split.train.tolist()))

    def test_one_step_decreases_triplet_loss(self, tiny_split, make_config):
        rng = np.random.default_rng(3)
        graph = build_graph(tiny_split)
        for trial in range(5):
            config = make_config(lr=1e-4, num_tasks=2, layer_dims="3,3", seed=trial)
            store = init_params(config.network(), graph.num_entities, seed=trial)
            trainer = Trainer(store, graph, tiny_split, config.network(), config.training())
            u, i = tiny_split.train[int(rng.integers(len(tiny_split.train)))]
            j = trainer.sampler.sample_one(int(u), rng)
            batch = TripletBatch(np.array([u]), np.array([i]), np.array([j]))
            before = float(batch_loss(store.constants(), graph, config.network(), batch, Mode.EVAL)[0].value)
            trainer.train_step(batch)
            after = float(batch_loss(store.constants(), graph, config.network(), batch, Mode.EVAL)[0].value)
            assert after < before

    def test_single_task_has_only_embeddings(self, tiny_split, make_config):
        config = make_config(num_tasks=1, layer_dims="8")
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        train_epoch(store, graph, tiny_split, config)
        assert store.names == [EMBEDDING]

    def test_smoke_convergence(self, tiny_split, make_config):
        config = make_config(num_tasks=2, layer_dims="8,8", lr=0.05, dropout=0.0, batch_size=4)
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        trainer = Trainer(store, graph, tiny_split, config.network(), config.training())
        losses = [trainer.train_epoch(epoch).total_loss for epoch in range(1, 51)]
        assert losses[0] == pytest.approx(math.log(2), abs=0.2)
        assert min(losses) < 0.3

    def test_no_training_pairs(self, make_corpus, make_config):
        data = make_corpus([(0, 0)], [SplitPart.TEST], num_items=2)
        config = make_config()
        graph = build_graph(data)
        with pytest.raises(ConfigError):
            Trainer(init_params(config.network(), graph.num_entities, 0), graph, data,
                    config.network(), config.training())


@pytest.mark.unit
class TestFit:
    def test_patience_zero_runs_one_epoch(self, tiny_split, make_config):
        config = make_config(patience=0, max_epochs=10)
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        _, result = fit(store, graph, tiny_split, config)
        assert result.epochs_run == 1
        assert result.best_epoch == 1

    def test_best_is_maximum(self, tiny_split, make_config, tmp_path):
        config = make_config(patience=3, max_epochs=12, lr=0.05)
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        saved = []
        best, result = fit(
            store, graph, tiny_split, config,
            log_path=tmp_path / "epochs.csv",
            on_improvement=lambda s, st: saved.append(st.epoch),
        )
        recalls = [s.val_recall for s in result.history]
        assert result.best_val_recall == max(recalls)
        assert result.best_epoch == recalls.index(max(recalls)) + 1
        assert saved[-1] == result.best_epoch
        assert (tmp_path / "epochs.csv").read_text().count("\n") == result.epochs_run + 1

    def test_stops_after_patience(self, tiny_split, make_config):
        config = make_config(patience=2, max_epochs=50, lr=0.0)
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        _, result = fit(store, graph, tiny_split, config)
        # lr=0 never improves after epoch 1
        assert result.epochs_run == 3
        assert result.best_epoch == 1

    def test_monotone_run_returns_last_epoch(self, tiny_split, make_config, monkeypatch):
        scores = iter([0.1, 0.2, 0.3, 0.4])

        def rising(self, embeddings, per_user=False):
            return MetricsReport(n=self.n, split=self.split, recall_at_n=next(scores), ndcg_at_n=0.0, num_users=5)

        monkeypatch.setattr(training_service.Evaluator, "evaluate", rising)
        config = make_config(max_epochs=4, patience=1)
        graph = build_graph(tiny_split)
        store = init_params(config.network(), graph.num_entities, config.seed)
        best, result = fit(store, graph, tiny_split, config)
        assert result.best_epoch == 4
        assert best.equals(store)

    def test_requires_validation(self, make_corpus, make_config):
        data = make_corpus([(0, 0), (0, 1), (1, 0)], [SplitPart.TRAIN, SplitPart.TEST, SplitPart.TRAIN], num_items=3)
        config = make_config()
        graph = build_graph(data)
        with pytest.raises(ConfigError, match="validation"):
            fit(init_params(config.network(), graph.num_entities, 0), graph, data, config)
