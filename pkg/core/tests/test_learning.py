import json
import unittest

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, override_settings

from core import graphs, learning, nn
from core.datasets import EDGE_REGRESSION, NODE_CLASSIFICATION, Dataset, build_recipe
from core.exceptions import ConfigError, GraphError, RoundTimeoutError, ShapeError
from core.metrics import ACC, MAE, PCC, RMSE
from core.node import ExchangeResult

from .support import TEST_CNL, cluster, complete, task

CODEC_TOLERANCE = 2.0 ** -21


def two_groups():
    """Six nodes in two triangles; the feature sign gives the label"""
    features = [[1.0], [2.0], [1.5], [-1.0], [-2.0], [-1.5]]
    edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]
    graph = graphs.Graph(6, edges, features, [1, 1, 1, 0, 0, 0])
    partition = graphs.AgencyPartition((0,) * 6, 1)
    return Dataset(graph, partition, meta={'task_kind': NODE_CLASSIFICATION, 'num_classes': 2})


def train_everything_plan():
    return learning.SplitPlan(NODE_CLASSIFICATION, node_sets={'train': set(range(6)), 'val': set(), 'test': set()})


class CountingExchanger:

    def __init__(self, dim):
        self.dim = dim
        self.calls = []

    def exchange(self, agency, round_index, vector):
        self.calls.append((agency, round_index))
        return ExchangeResult(np.zeros(self.dim), 0)


@override_settings(CNL=TEST_CNL)
class ProblemTests(SimpleTestCase):

    def test_default_task_for_edges(self):
        config = learning.default_task('rate', EDGE_REGRESSION)
        self.assertEqual(config.optimizer, 'sgd')
        self.assertEqual(config.epochs, 5000)
        self.assertEqual(len(config.seeds), 10)
        self.assertEqual(learning.default_task('rate', EDGE_REGRESSION, epochs=3).epochs, 3)

    def test_node_regression_windows(self):
        dataset = build_recipe('er_sis', nodes=40, edges=120, agencies=2, steps=130, seed=0)
        config = learning.default_task('sis', dim=4, lookback=5, horizon=1, epochs=2)
        plan = learning.plan_splits(dataset, config, seed=0)
        members = dataset.partition.members(1)
        problem = learning.build_problem(dataset, plan, config, members)
        train = problem.splits['train']
        windows = plan.time_blocks['train'].shape[0] - 5
        self.assertEqual(train.x.shape, (windows, len(members), 5))
        self.assertEqual(train.target.shape, (windows, len(members)))
        self.assertEqual(problem.in_width, 5)
        self.assertEqual(problem.node_ids, sorted(members))

    def test_classification_masks(self):
        dataset = build_recipe('toy_classify', seed=1)
        config = learning.default_task('toy', NODE_CLASSIFICATION, dim=4)
        plan = learning.plan_splits(dataset, config, seed=0)
        problem = learning.build_problem(dataset, plan, config)
        masked = sum(problem.splits[name].size for name in learning.SPLITS)
        self.assertEqual(masked, dataset.graph.node_count)
        self.assertEqual(problem.num_classes, 2)

    def test_edge_problem_passes_messages_on_train_edges(self):
        dataset = build_recipe('toy_bipartite', seed=0)
        config = learning.default_task('rate', EDGE_REGRESSION, dim=4)
        plan = learning.plan_splits(dataset, config, seed=0)
        problem = learning.build_problem(dataset, plan, config)
        self.assertEqual(problem.graph.edge_count, len(plan.edge_sets['train']))
        self.assertEqual(problem.splits['test'].edge_pairs.shape, (len(plan.edge_sets['test']), 2))

    def test_missing_series_is_a_config_error(self):
        with self.assertRaises(ConfigError):
            learning.plan_splits(two_groups(), learning.default_task('x'), seed=0)

    def test_empty_node_set(self):
        with self.assertRaises(GraphError):
            learning.build_problem(two_groups(), train_everything_plan(), learning.default_task('x', NODE_CLASSIFICATION), [])


@override_settings(CNL=TEST_CNL)
class FitTests(SimpleTestCase):

    def setUp(self):
        self.task = learning.default_task('toy', NODE_CLASSIFICATION, dim=4, lr=0.05, epochs=200)
        self.problem = learning.build_problem(two_groups(), train_everything_plan(), self.task)

    def test_separable_graph_is_learned(self):
        network = learning.build_model(self.problem, self.task, seed=0)
        learning.fit(network, self.problem, self.task)
        prediction = learning.predict(network, self.problem, 'train')
        score = learning.score_agency(self.problem, prediction, split='train')
        self.assertEqual(score['agency'][ACC], 1.0)

    def test_same_seed_same_history(self):
        runs = []
        for _ in range(2):
            network = learning.build_model(self.problem, self.task, seed=3)
            runs.append(learning.fit(network, self.problem, self.task, epochs=20).history)
        self.assertEqual(runs[0], runs[1])

    def test_zero_epochs_keeps_initial_weights(self):
        fresh = learning.build_model(self.problem, self.task, seed=0)
        network = learning.build_model(self.problem, self.task, seed=0)
        result = learning.fit(network, self.problem, self.task, epochs=0)
        self.assertEqual(result.history, [])
        self.assertEqual(result.best_epoch, -1)
        x, ctx = self.problem.splits['train'].x, self.problem.context('train')
        np.testing.assert_array_equal(network.encode(x, ctx), fresh.encode(x, ctx))

    def test_train_local_record(self):
        _, record, prediction = learning.train_local(self.problem, self.task, seed=0)
        self.assertEqual(record.dim, 4)
        self.assertEqual(record.agency.shape, (4,))
        self.assertEqual(set(record.local), set(learning.SPLITS))
        self.assertIsNotNone(prediction.class_logits)

    def test_lr_grid_picks_a_listed_rate(self):
        dataset = build_recipe('toy_classify', seed=0)
        config = learning.default_task('toy', NODE_CLASSIFICATION, dim=4, epochs=10)
        plan = learning.plan_splits(dataset, config, seed=0)
        problem = learning.build_problem(dataset, plan, config, dataset.partition.members(0))
        _, result = learning.fit_with_grid(lambda: learning.build_model(problem, config), problem, config, (0.01, 0.1))
        self.assertIn(result.lr, (0.01, 0.1))


class PoolingTests(SimpleTestCase):

    def test_mean_over_samples_and_nodes(self):
        record = learning.EmbeddingRecord(local={'train': np.array([[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]])})
        np.testing.assert_allclose(learning.pool_agency(record), [3.0, 4.0])

    def test_single_node_agency(self):
        record = learning.EmbeddingRecord(local={'train': np.array([[[0.5, -1.0]]])})
        np.testing.assert_allclose(learning.pool_agency(record), [0.5, -1.0])

    def test_empty_agency(self):
        with self.assertRaises(GraphError):
            learning.pool_agency(learning.EmbeddingRecord(local={'train': np.zeros((1, 0, 3))}))

    def test_dims_must_agree(self):
        with self.assertRaises(ShapeError):
            learning.EmbeddingRecord(local={'train': np.zeros((1, 2, 3)), 'val': np.zeros((1, 2, 4))})
        with self.assertRaises(ShapeError):
            learning.EmbeddingRecord(local={'train': np.zeros((1, 2, 3))}, agency=np.zeros(4))


def identity_model(dim):
    model = learning.GlobalModel(dim, seed=0)
    model.w_self.value = np.eye(dim)
    model.w_neigh.value = np.eye(dim)
    model.bias.value = np.zeros(dim)
    return model


@override_settings(CNL=TEST_CNL)
class GlobalModelTests(SimpleTestCase):

    def test_update_without_neighbor_weights(self):
        model = identity_model(3)
        model.w_neigh.value = np.zeros((3, 3))
        np.testing.assert_allclose(model.update([1.0, -2.0, 0.5], [9.0, 9.0, 9.0]), [1.0, 0.0, 0.5])

    def test_agency_target(self):
        problem = learning.build_problem(two_groups(), train_everything_plan(),
                                         learning.default_task('toy', NODE_CLASSIFICATION))
        self.assertEqual(learning.agency_target(problem), 1)

    def test_one_round_means_one_exchange(self):
        exchanger = CountingExchanger(4)
        result = learning.train_global(learning.GlobalModel(4), 0, np.ones(4), exchanger, task(task_iter=1), 1.0, 'mse')
        self.assertEqual(exchanger.calls, [(0, 0)])
        self.assertEqual(len(result.losses), settings.CNL['GLOBAL_EPOCHS_PER_ROUND'])
        self.assertEqual(result.partial_rounds, [])

    def test_constant_target_is_fitted(self):
        config = task(task_iter=30, lr=0.05)
        result = learning.train_global(learning.GlobalModel(4, seed=1), 0, np.ones(4), CountingExchanger(4),
                                       config, 2.0, 'mse')
        self.assertLess(result.losses[-1], 0.05 * result.losses[0])

    def test_neighbors_change_the_vector(self):
        global_graph = graphs.build_global_graph(graphs.AgencyPartition(tuple(range(5)), 5))
        exchanger = learning.PlaintextExchanger(global_graph, timeout=5.0)
        models = {a: learning.GlobalModel(3, seed=a) for a in range(5)}
        vectors = {a: np.full(3, a + 1.0) for a in range(5)}
        jobs = {a: (lambda a=a: learning.global_exchange_round(models[a], a, vectors[a], exchanger, 0))
                for a in range(5)}
        results = learning.run_concurrently(jobs)
        for a, (vector, _) in results.items():
            alone = models[a].update(vectors[a], np.zeros(3))
            self.assertFalse(np.allclose(vector, alone))


@override_settings(CNL=TEST_CNL)
class ExchangerTests(SimpleTestCase):

    def vectors(self):
        return {a: np.array([a + 1.0, 0.5 * a, 2.0, 0.25]) for a in range(4)}

    def expected(self, vectors, agency):
        neighbors = [vectors[b] for b in vectors if b != agency]
        return vectors[agency] + np.mean(neighbors, axis=0)

    def run_round(self, exchanger, vectors):
        jobs = {a: (lambda a=a: learning.global_exchange_round(identity_model(4), a, vectors[a], exchanger, 0))
                for a in vectors}
        return learning.run_concurrently(jobs)

    def test_plaintext_round(self):
        vectors = self.vectors()
        global_graph = graphs.Graph(4, complete(4))
        results = self.run_round(learning.PlaintextExchanger(global_graph), vectors)
        for a, (vector, result) in results.items():
            self.assertEqual(result.addend_count, 3)
            np.testing.assert_allclose(vector, self.expected(vectors, a))

    def test_plaintext_rounds_are_forgotten_once_read(self):
        exchanger = learning.PlaintextExchanger(graphs.Graph(4, [(0, 1), (1, 2), (2, 3)]))
        for round_index in range(5):
            results = learning.run_concurrently({
                a: (lambda a=a: exchanger.exchange(a, round_index, np.full(2, float(a)))) for a in range(4)})
            self.assertEqual(results[1].neighbor_sum.tolist(), [2.0, 2.0])
            self.assertEqual(exchanger._published, {})

    def test_encrypted_round_matches_plaintext(self):
        vectors = self.vectors()
        nodes = cluster(4, complete(4)).start()
        self.addCleanup(nodes.stop)
        nodes.announce(task('glob'))
        results = self.run_round(nodes.exchanger('glob'), vectors)
        for a, (vector, result) in results.items():
            self.assertEqual(result.addend_count, 3)
            self.assertFalse(result.partial)
            np.testing.assert_allclose(vector, self.expected(vectors, a), atol=4 * CODEC_TOLERANCE)

    def test_isolated_agency_gets_zeros(self):
        exchanger = learning.PlaintextExchanger(graphs.Graph(2, []))
        result = exchanger.exchange(0, 0, np.ones(3))
        self.assertEqual(result.addend_count, 0)
        np.testing.assert_array_equal(result.neighbor_mean(), np.zeros(3))

    def test_silent_neighbor_times_out(self):
        exchanger = learning.PlaintextExchanger(graphs.Graph(2, [(0, 1)]), timeout=0.2)
        with self.assertRaises(RoundTimeoutError):
            exchanger.exchange(0, 0, np.ones(3))


@override_settings(CNL=TEST_CNL)
class IntegratedTests(SimpleTestCase):

    def test_virtual_node_wiring(self):
        g = graphs.Graph(3, [(0, 1), (1, 2)])
        integrated = learning.build_integrated_graph(g, np.ones(2), node_features=np.zeros((3, 2)))
        self.assertEqual(integrated.virtual_index, 3)
        self.assertEqual(integrated.graph.node_count, 4)
        self.assertEqual(integrated.graph.edge_count, 5)
        np.testing.assert_array_equal(integrated.features[3], [1.0, 1.0])
        with self.assertRaises(ShapeError):
            learning.build_integrated_graph(g, np.ones(3), node_features=np.zeros((3, 2)))

    def integrated_problem(self, vector, weight):
        config = learning.default_task('toy', NODE_CLASSIFICATION, dim=4, epochs=5)
        problem = learning.build_problem(two_groups(), train_everything_plan(), config)
        _, record, _ = learning.train_local(problem, config, seed=0)
        record.agency = np.asarray(vector, dtype=float)
        return config, learning.build_integrated_problem(problem, record, virtual_weight=weight)

    def test_virtual_target_is_masked(self):
        _, problem = self.integrated_problem([1.0, 2.0, 3.0, 4.0], 1.0)
        train = problem.splits['train']
        self.assertEqual(problem.virtual_index, 6)
        self.assertEqual(train.x.shape[1], 7)
        self.assertEqual(train.mask[0, 6], 0.0)
        self.assertEqual(problem.real_nodes, 6)

    def real_predictions(self, vector, weight):
        config, problem = self.integrated_problem(vector, weight)
        network = learning.build_model(problem, config, learning.integrated_model_kind(config), seed=0)
        return learning.predict(network, problem, 'train').values[:, :6]

    def test_zero_weight_isolates_the_agency_vector(self):
        np.testing.assert_allclose(self.real_predictions([1.0, 2.0, 3.0, 4.0], 0.0),
                                   self.real_predictions([-5.0, 0.0, 7.0, 1.0], 0.0))
        self.assertFalse(np.allclose(self.real_predictions([1.0, 2.0, 3.0, 4.0], 1.0),
                                     self.real_predictions([-5.0, 0.0, 7.0, 1.0], 1.0)))

    def test_zero_weight_virtual_node_reproduces_the_local_model(self):
        g = graphs.Graph(8, [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (2, 6), (1, 5)])
        integrated = learning.build_integrated_graph(g, np.zeros(4), virtual_weight=0.0)
        local_ctx = nn.GraphContext.from_graph(g)
        joined_ctx = nn.GraphContext.from_graph(integrated.graph)
        for model in (nn.GCN, nn.SAGE_MEAN):
            for seed in range(10):
                with self.subTest(model=model, seed=seed):
                    rng = np.random.default_rng(seed)
                    xi = rng.normal(size=(2, 8, 4))
                    virtual = rng.normal(scale=50.0, size=(2, 1, 4))
                    network = nn.Network(nn.ModelSpec.for_model(model, dim=3, hidden=5), 4, seed)
                    local = network.forward(xi, local_ctx)
                    joined = network.forward(np.concatenate([xi, virtual], axis=1), joined_ctx)
                    self.assertTrue(np.array_equal(joined[:, :8], local))

    def test_temporal_model_continues_with_gcn(self):
        self.assertEqual(learning.integrated_model_kind(task(model=nn.CUSTOMIZED_TEMPORAL)), nn.GCN)
        self.assertEqual(learning.integrated_model_kind(task(model=nn.SAGE_MEAN)), nn.SAGE_MEAN)


class ReportTests(SimpleTestCase):

    def test_add_scores(self):
        report = learning.ExperimentReport(header={})
        score = {'agency': {RMSE: 0.0}, 'single_node': {RMSE: 0.1},
                 'truth': np.array([1.0, 2.0]), 'pred': np.array([1.0, 2.0])}
        report.add_scores(learning.LOCAL, 0, {0: score, 1: None}, (RMSE,), learning.SCOPES)
        scopes = [(row.agency, row.scope) for row in report.rows]
        self.assertEqual(scopes, [('0', learning.SINGLE_NODE), ('0', learning.SINGLE_AGENCY),
                                  (learning.ALL_AGENCIES, learning.MULTI_AGENCY)])
        self.assertEqual(report.rows[-1].value, 0.0)
        self.assertFalse(report.partial)

    def test_scopes_can_be_narrowed(self):
        report = learning.ExperimentReport(header={})
        score = {'agency': {RMSE: 0.5}, 'single_node': None, 'truth': np.ones(1), 'pred': np.ones(1)}
        report.add_scores(learning.LOCAL, 0, {0: score}, (RMSE,), (learning.SINGLE_AGENCY,))
        self.assertEqual(len(report.rows), 1)


class ExperimentConfigTests(SimpleTestCase):

    def test_validation(self):
        with self.assertRaises(ConfigError):
            learning.ExperimentConfig(task=task(), models=('local', 'oracle'))
        with self.assertRaises(ConfigError):
            learning.ExperimentConfig(task=task(), exchange='carrier')
        with self.assertRaises(ConfigError):
            learning.ExperimentConfig(task=task(), seeds=())
        with self.assertRaises(ConfigError):
            learning.ExperimentConfig.from_dict({'models': ['local']})
        with self.assertRaises(ConfigError):
            learning.ExperimentConfig.from_dict({'task': {'task_id': 't'}, 'colour': 'red'})

    def test_from_dict_and_overrides(self):
        config = learning.ExperimentConfig.from_dict(
            {'task': {'task_id': 't', 'seeds': [3, 4]}, 'dataset_dir': 'data'}, base_dir='/tmp/exp')
        self.assertEqual(config.seeds, (3, 4))
        self.assertEqual(config.dataset_dir, '/tmp/exp/data')
        changed = config.with_overrides(seeds=(1,), exchange=None)
        self.assertEqual(changed.seeds, (1,))
        self.assertEqual(changed.exchange, learning.ENCRYPTED)
        self.assertEqual(changed.eval_split, 'test')

    def test_needs_protocol(self):
        self.assertFalse(learning.ExperimentConfig(task=task(), models=('centralized',), exchange='encrypted').needs_protocol)
        self.assertTrue(learning.ExperimentConfig(task=task(), exchange='encrypted').needs_protocol)
        self.assertFalse(learning.ExperimentConfig(task=task(), exchange='plaintext').needs_protocol)

    def test_integrated_runs_encrypt_by_default(self):
        config = learning.ExperimentConfig(task=task(), models=(learning.INTEGRATED,))
        self.assertEqual(config.exchange, learning.ENCRYPTED)
        self.assertTrue(config.needs_protocol)
        self.assertEqual(config.header()['exchange'], 'encrypted')

    def test_eval_split(self):
        self.assertEqual(learning.ExperimentConfig(task=task(), eval_split='val').header()['eval_split'], 'val')
        with self.assertRaises(ConfigError):
            learning.ExperimentConfig(task=task(), eval_split='train')


@override_settings(CNL=TEST_CNL)
class ExperimentTests(SimpleTestCase):

    def test_classification_experiment(self):
        dataset = build_recipe('toy_classify', seed=0)
        config = learning.ExperimentConfig(
            task=learning.default_task('toy', NODE_CLASSIFICATION, dim=8, epochs=40, lr=0.05),
            exchange=learning.PLAINTEXT)
        report = learning.run_experiment(config, dataset)
        self.assertEqual(report.failures, [])
        self.assertEqual({row.model for row in report.rows}, set(learning.MODEL_KINDS))
        for row in report.rows:
            self.assertEqual(row.metric, ACC)
            self.assertTrue(0.0 <= row.value <= 1.0)
        multi = [row for row in report.rows if row.scope == learning.MULTI_AGENCY]
        self.assertEqual(len(multi), 3)

    def test_regression_experiment_is_deterministic(self):
        dataset = build_recipe('er_sis', nodes=40, edges=120, agencies=2, steps=130, seed=0)
        config = learning.ExperimentConfig(
            task=learning.default_task('sis', dim=4, lookback=5, horizon=1, epochs=5), exchange=learning.PLAINTEXT)
        first = learning.run_experiment(config, dataset)
        second = learning.run_experiment(config, dataset)
        self.assertEqual(first.failures, [])
        self.assertEqual({row.metric for row in first.rows}, {RMSE, PCC})
        self.assertEqual(json.dumps(first.to_dict(), sort_keys=True), json.dumps(second.to_dict(), sort_keys=True))

    def test_edge_experiment(self):
        dataset = build_recipe('toy_bipartite', seed=0)
        config = learning.ExperimentConfig(
            task=learning.default_task('rate', EDGE_REGRESSION, dim=4, epochs=20, lr=0.01),
            models=(learning.LOCAL, learning.INTEGRATED), seeds=(0,), exchange=learning.PLAINTEXT)
        report = learning.run_experiment(config, dataset)
        self.assertEqual(report.failures, [])
        self.assertTrue(report.rows)
        self.assertEqual({row.metric for row in report.rows}, {MAE})
        self.assertNotIn(learning.SINGLE_NODE, {row.scope for row in report.rows})

    def test_task_kind_mismatch(self):
        dataset = build_recipe('toy_classify', seed=0)
        with self.assertRaises(ConfigError):
            learning.run_experiment(learning.ExperimentConfig(task=task()), dataset)

    def test_encrypted_exchange_needs_a_factory(self):
        dataset = build_recipe('toy_classify', seed=0)
        config = learning.ExperimentConfig(task=learning.default_task('toy', NODE_CLASSIFICATION, dim=4, epochs=2))
        with self.assertRaises(ConfigError):
            learning.run_experiment(config, dataset)

    def test_validation_split_scores(self):
        dataset = build_recipe('toy_classify', seed=0)
        toy = learning.default_task('toy', NODE_CLASSIFICATION, dim=4, epochs=10, lr=0.05)
        reports = {
            split: learning.run_experiment(learning.ExperimentConfig(
                task=toy, models=(learning.LOCAL, learning.INTEGRATED, learning.CENTRALIZED),
                scopes=(learning.MULTI_AGENCY,), exchange=learning.PLAINTEXT, eval_split=split), dataset)
            for split in ('val', 'test')
        }
        for split, report in reports.items():
            self.assertEqual(report.failures, [])
            self.assertEqual(report.header['eval_split'], split)
            self.assertEqual({row.model for row in report.rows}, set(learning.MODEL_KINDS))

        plan = learning.plan_splits(dataset, toy, 0)
        members = dataset.partition.members(0)
        problem = learning.build_problem(dataset, plan, toy, members)
        network, _, _ = learning.train_local(problem, toy, seed=0)
        score = learning.score_agency(problem, learning.predict(network, problem, 'val'), split='val')
        self.assertEqual(len(score['truth']), int(problem.splits['val'].mask.sum()))

    def test_local_stage_failure_is_reported_under_the_requested_model(self):
        dataset = build_recipe('toy_classify', seed=0)
        config = learning.ExperimentConfig(
            task=learning.default_task('toy', NODE_CLASSIFICATION, dim=4, epochs=5, lr=1e300),
            models=(learning.INTEGRATED,), exchange=learning.PLAINTEXT)
        with np.errstate(all='ignore'):
            report = learning.run_experiment(config, dataset)
        self.assertEqual(report.rows, [])
        self.assertEqual([failure['model'] for failure in report.failures], [learning.INTEGRATED])
        self.assertIn('TrainingDivergedError', report.failures[0]['error'])


@unittest.skipUnless(settings.CNL['SLOW_TESTS'], 'set CNL_SLOW_TESTS=1 for the cooperation check')
@override_settings(CNL=TEST_CNL)
class CooperationTests(SimpleTestCase):
    """Per-seed comparisons of the integrated and local models on held-out splits"""

    SEEDS = tuple(range(5))

    def per_seed(self, dataset, config_task, metric, split):
        config = learning.ExperimentConfig(
            task=config_task, models=(learning.LOCAL, learning.INTEGRATED), seeds=self.SEEDS,
            scopes=(learning.MULTI_AGENCY,), exchange=learning.PLAINTEXT, eval_split=split)
        report = learning.run_experiment(config, dataset)
        self.assertEqual(report.failures, [])
        values = {(row.model, row.seed): row.value for row in report.rows if row.metric == metric}
        return [(values[(learning.LOCAL, seed)], values[(learning.INTEGRATED, seed)]) for seed in self.SEEDS]

    def test_integrated_wins_validation_accuracy_on_planted_context(self):
        dataset = build_recipe('toy_classify', agencies=3, seed=0)
        pairs = self.per_seed(dataset, learning.default_task('toy', NODE_CLASSIFICATION, dim=8, lr=0.05, task_iter=3),
                              ACC, 'val')
        wins = sum(integrated > local for local, integrated in pairs)
        self.assertGreaterEqual(wins, 4, pairs)

    def test_integrated_keeps_up_on_contagion_series(self):
        dataset = build_recipe('er_sis', nodes=300, edges=1200, agencies=5, seed=0)
        pairs = self.per_seed(dataset, learning.default_task('sis', lookback=20, horizon=5), PCC, 'test')
        wins = sum(integrated >= local for local, integrated in pairs)
        self.assertGreaterEqual(wins, 3, pairs)
