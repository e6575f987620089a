"""
Local, global, integrated and centralized training.

Every model trains on a ``Problem``: a message-passing graph, input tensors
of shape (samples, nodes, features) per split, and targets with masks. Local
problems cover one agency's subgraph, centralized problems the whole graph,
and integrated problems an agency's subgraph plus one virtual node carrying
the agency embedding obtained through the encrypted exchange.
"""
import json
import logging
import math
import threading
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from django.conf import settings

from . import graphs, nn
from .datasets import EDGE_REGRESSION, NODE_CLASSIFICATION, NODE_REGRESSION
from .exceptions import (
    CNLError, ConfigError, GraphError, RoundTimeoutError, ShapeError, TrainingDivergedError,
)
from .metrics import ACC, MAE, PCC, RMSE, evaluate_metrics, mean_defined
from .node import ExchangeResult, TaskConfig

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')

LOCAL = 'local'
INTEGRATED = 'integrated'
CENTRALIZED = 'centralized'
MODEL_KINDS = (LOCAL, INTEGRATED, CENTRALIZED)

SINGLE_NODE = 'single_node'
SINGLE_AGENCY = 'single_agency'
MULTI_AGENCY = 'multi_agency'
SCOPES = (SINGLE_NODE, SINGLE_AGENCY, MULTI_AGENCY)
ALL_AGENCIES = 'all'

PLAINTEXT = 'plaintext'
ENCRYPTED = 'encrypted'

LR_GRID = (0.001, 0.005, 0.01, 0.05, 0.1)
HIDDEN_WIDTH = 32
VIRTUAL_EDGE_WEIGHT = 1.0

# Link-prediction settings: SGD, lr 0.003, weight decay 0.001, 5000 iterations, 10 repeats
EDGE_TASK_DEFAULTS = {'lr': 0.003, 'weight_decay': 0.001, 'optimizer': 'sgd', 'epochs': 5000, 'seeds': tuple(range(10))}

METRICS_BY_KIND = {
    NODE_REGRESSION: (RMSE, PCC),
    NODE_CLASSIFICATION: (ACC,),
    EDGE_REGRESSION: (MAE,),
}


def default_task(task_id, task_kind=NODE_REGRESSION, **overrides):
    """TaskConfig with the usual defaults for the task kind"""
    values = dict(EDGE_TASK_DEFAULTS) if task_kind == EDGE_REGRESSION else {}
    values.update(overrides)
    return TaskConfig(task_id=task_id, task_kind=task_kind, **values)


@dataclass
class EmbeddingRecord:
    """Local node embeddings per split, the pooled agency vector and exchange metadata"""

    local: dict
    agency: np.ndarray = None
    fused: bool = False
    round: int = 0
    addend_count: int = 0
    partial: bool = False

    def __post_init__(self):
        widths = {np.asarray(v).shape[-1] for v in self.local.values()}
        if len(widths) > 1:
            raise ShapeError('local embeddings disagree on dim')
        if self.agency is not None and widths and np.asarray(self.agency).shape[-1] not in widths:
            raise ShapeError('agency embedding dim differs from local embeddings')

    @property
    def dim(self):
        return np.asarray(next(iter(self.local.values()))).shape[-1]


@dataclass(frozen=True)
class PredictionOutput:
    continuous: np.ndarray = None
    class_logits: np.ndarray = None
    scope: str = 'node'

    def __post_init__(self):
        if (self.continuous is None) == (self.class_logits is None):
            raise ShapeError('exactly one of continuous or class_logits must be set')

    @property
    def values(self):
        return self.continuous if self.continuous is not None else self.class_logits


@dataclass
class SplitData:
    x: np.ndarray
    target: np.ndarray
    mask: np.ndarray = None
    edge_pairs: np.ndarray = None

    @property
    def size(self):
        if self.mask is None:
            return int(np.asarray(self.target).size)
        return int(np.count_nonzero(self.mask))


@dataclass
class Problem:
    """What one model trains and is evaluated on"""

    graph: graphs.Graph
    kind: str
    splits: dict
    node_ids: list
    num_classes: int = 1
    virtual_index: int = None
    _context: nn.GraphContext = field(default=None, repr=False)

    @property
    def in_width(self):
        return self.splits['train'].x.shape[-1]

    @property
    def real_nodes(self):
        return len(self.node_ids)

    def has(self, split):
        data = self.splits.get(split)
        return data is not None and data.size > 0

    def context(self, split='train'):
        if self._context is None:
            self._context = nn.GraphContext.from_graph(self.graph)
        pairs = self.splits[split].edge_pairs
        return self._context if pairs is None else self._context.with_edges(pairs)

    @property
    def loss_kind(self):
        return 'ce' if self.kind == NODE_CLASSIFICATION else 'mse'

    @property
    def decoder(self):
        if self.kind == NODE_CLASSIFICATION:
            return nn.CLASS_LOGITS
        if self.kind == EDGE_REGRESSION:
            return nn.EDGE_SCALAR
        return nn.NODE_SCALAR


@dataclass
class SplitPlan:
    """Splits drawn once per seed over the whole graph so every model sees the same partition of data"""

    kind: str
    node_sets: dict = None
    edge_sets: dict = None
    time_blocks: dict = None


def plan_splits(dataset, task, seed):
    kind = dataset.task_kind
    if kind == NODE_REGRESSION:
        if dataset.panel is None:
            raise ConfigError('node regression needs series.csv')
        blocks = graphs.chronological_split(dataset.panel, (0.5, 0.2, 0.3), min_length=task.lookback + task.horizon)
        return SplitPlan(kind, time_blocks=dict(zip(SPLITS, (b.values for b in blocks))))
    if kind == NODE_CLASSIFICATION:
        sets = graphs.node_split(dataset.graph.node_count, (0.6, 0.2, 0.2), seed)
        return SplitPlan(kind, node_sets={name: set(idx.tolist()) for name, idx in zip(SPLITS, sets)})
    if kind == EDGE_REGRESSION:
        sets = graphs.edge_split(dataset.graph.edge_count, (0.8, 0.1, 0.1), seed)
        return SplitPlan(kind, edge_sets={name: sorted(idx.tolist()) for name, idx in zip(SPLITS, sets)})
    raise ConfigError(f'unknown task kind {kind!r}')


def _node_features(graph):
    if graph.node_features is None:
        raise ConfigError('this task needs node features (features.csv)')
    return graph.node_features


def build_problem(dataset, plan, task, nodes=None):
    """Problem over the induced subgraph of ``nodes`` (the whole graph when None)"""
    full = dataset.graph
    node_ids = sorted(nodes) if nodes is not None else list(range(full.node_count))
    if not node_ids:
        raise GraphError('cannot train on an empty node set')
    index = {old: new for new, old in enumerate(node_ids)}
    inside = [(i, (s, d, w)) for i, (s, d, w) in enumerate(full.edges) if s in index and d in index]

    if plan.kind == NODE_REGRESSION:
        graph = graphs.Graph(len(node_ids), [(index[s], index[d], w) for _, (s, d, w) in inside])
        splits = {}
        for name in SPLITS:
            windows, targets = nn.make_windows(plan.time_blocks[name][:, node_ids], task.lookback, task.horizon)
            splits[name] = SplitData(windows, targets)
        return Problem(graph, plan.kind, splits, node_ids)

    features = _node_features(full)[node_ids]
    if plan.kind == NODE_CLASSIFICATION:
        if full.node_labels is None:
            raise ConfigError('node classification needs labels.csv')
        graph = graphs.Graph(len(node_ids), [(index[s], index[d], w) for _, (s, d, w) in inside])
        labels = np.array([full.node_labels[i] for i in node_ids], dtype=np.int64)[None, :]
        splits = {}
        for name in SPLITS:
            mask = np.array([[1.0 if i in plan.node_sets[name] else 0.0 for i in node_ids]])
            splits[name] = SplitData(features[None, :, :], labels, mask)
        return Problem(graph, plan.kind, splits, node_ids, num_classes=int(dataset.meta.get('num_classes', max(full.node_labels) + 1)))

    train_edges = set(plan.edge_sets['train'])
    graph = graphs.Graph(len(node_ids), [(index[s], index[d], w) for i, (s, d, w) in inside if i in train_edges])
    splits = {}
    for name in SPLITS:
        members = set(plan.edge_sets[name])
        chosen = [(index[s], index[d], w) for i, (s, d, w) in inside if i in members]
        pairs = np.array([(s, d) for s, d, _ in chosen], dtype=np.int64).reshape(-1, 2)
        weights = np.array([[w for _, _, w in chosen]])
        splits[name] = SplitData(features[None, :, :], weights, edge_pairs=pairs)
    return Problem(graph, plan.kind, splits, node_ids)


def build_model(problem, task, model=None, seed=0):
    spec = nn.ModelSpec.for_model(
        model or task.model, dim=task.dim, hidden=HIDDEN_WIDTH, decoder=problem.decoder,
        out_width=problem.num_classes if problem.kind == NODE_CLASSIFICATION else 1)
    return nn.Network(spec, problem.in_width, seed)


def split_loss(network, problem, split):
    data = problem.splits[split]
    loss, _ = nn.compute_loss(problem.loss_kind, network.forward(data.x, problem.context(split)), data.target, data.mask)
    return loss


@dataclass
class FitResult:
    history: list
    best_epoch: int
    best_val_loss: float
    lr: float


def fit(network, problem, task, lr=None, epochs=None):
    """
    Full-batch training with early stopping on validation loss.

    The parameters with the lowest validation loss are restored at the end;
    without a validation split the final parameters are kept.
    """
    lr = lr or task.lr
    epochs = task.epochs if epochs is None else epochs
    optimizer = nn.make_optimizer(task.optimizer, network.parameters(), lr, task.weight_decay)
    train = problem.splits['train']
    ctx = problem.context('train')
    validate = problem.has('val')
    best_state, best_loss, best_epoch, stale = network.state(), math.inf, -1, 0
    history = []
    for epoch in range(epochs):
        network.zero_grad()
        loss, grad = nn.compute_loss(problem.loss_kind, network.forward(train.x, ctx), train.target, train.mask)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f'loss became {loss} at epoch {epoch}', epoch, history)
        network.backward(grad)
        optimizer.step()
        val_loss = split_loss(network, problem, 'val') if validate else loss
        history.append((loss, val_loss))
        if epoch % 50 == 0:
            logger.debug('epoch %d loss %.6f val %.6f', epoch, loss, val_loss)
        if val_loss < best_loss:
            best_state, best_loss, best_epoch, stale = network.state(), val_loss, epoch, 0
        else:
            stale += 1
            if validate and stale >= task.patience:
                logger.debug('early stop at epoch %d, best %d', epoch, best_epoch)
                break
    if validate and best_epoch >= 0:
        network.load_state(best_state)
    return FitResult(history, best_epoch, best_loss, lr)


def predict(network, problem, split):
    data = problem.splits[split]
    out = network.forward(data.x, problem.context(split))
    if problem.kind == NODE_CLASSIFICATION:
        return PredictionOutput(class_logits=out, scope='node')
    return PredictionOutput(continuous=out[..., 0], scope='edge' if problem.kind == EDGE_REGRESSION else 'node')


def fit_with_grid(make_network, problem, task, lr_grid=()):
    """Classification picks the lr with the best validation accuracy; other kinds train once"""
    if problem.kind != NODE_CLASSIFICATION or not lr_grid or not problem.has('val'):
        network = make_network()
        return network, fit(network, problem, task)
    best = None
    for lr in lr_grid:
        network = make_network()
        result = fit(network, problem, task, lr=lr)
        truth, pred, _ = _selected(problem, 'val', predict(network, problem, 'val'))
        accuracy = evaluate_metrics(pred, truth, (ACC,))[ACC]
        logger.debug('lr %.3g val acc %.3f', lr, accuracy)
        if best is None or accuracy > best[0]:
            best = (accuracy, network, result)
    return best[1], best[2]


def train_local(problem, task, seed=0, lr_grid=()):
    """Train the local GNN; returns (network, EmbeddingRecord, test PredictionOutput)"""
    network, result = fit_with_grid(lambda: build_model(problem, task, seed=seed), problem, task, lr_grid)
    record = EmbeddingRecord(local=encode_splits(network, problem))
    record.agency = pool_agency(record)
    logger.info('Local model on %d nodes: best epoch %d, val loss %.5f', problem.real_nodes, result.best_epoch,
                result.best_val_loss)
    return network, record, predict(network, problem, 'test')


def encode_splits(network, problem):
    return {name: network.encode(problem.splits[name].x, problem.context(name)).copy() for name in SPLITS}


def pool_agency(record):
    """Permutation-invariant mean of the training embeddings over samples and nodes"""
    local = np.asarray(record.local['train'] if isinstance(record.local, dict) else record.local)
    if local.ndim == 3:
        local = local.mean(axis=0)
    if local.shape[0] == 0:
        raise GraphError('cannot pool an empty agency')
    return nn.mean_pool(local, range(local.shape[0]))


class GlobalModel:
    """
    Agency-private update of the agency embedding from its neighbors' mean.

    ``update`` computes ReLU(v W_self + agg W_neigh + b); a linear head maps
    the updated vector onto the agency-level target for training.
    """

    def __init__(self, dim, out_width=1, seed=0):
        rng = np.random.default_rng(seed)
        self.w_self = nn.glorot('global.w_self', dim, dim, rng)
        self.w_neigh = nn.glorot('global.w_neigh', dim, dim, rng)
        self.bias = nn.zeros('global.bias', (dim,))
        self.head = nn.LinearLayer(dim, out_width, rng, name='global.head')

    def parameters(self):
        return [self.w_self, self.w_neigh, self.bias] + self.head.parameters()

    def _pre(self, vector, aggregate):
        return vector @ self.w_self.value + aggregate @ self.w_neigh.value + self.bias.value

    def update(self, vector, aggregate):
        return np.maximum(self._pre(np.asarray(vector, dtype=np.float64), np.asarray(aggregate, dtype=np.float64)), 0.0)

    def step(self, vector, aggregate, target, loss_kind, optimizer):
        for p in self.parameters():
            p.zero_grad()
        pre = self._pre(vector, aggregate)
        out = self.head.forward(np.maximum(pre, 0.0)[None, None, :])
        loss, grad = nn.compute_loss(loss_kind, out, np.asarray([[target]]))
        if not math.isfinite(loss):
            raise TrainingDivergedError(f'global loss became {loss}')
        dpre = self.head.backward(grad)[0, 0] * (pre > 0)
        self.w_self.grad += np.outer(vector, dpre)
        self.w_neigh.grad += np.outer(aggregate, dpre)
        self.bias.grad += dpre
        optimizer.step()
        return loss


def agency_target(problem):
    """Regression: mean training target; classification: majority training label"""
    train = problem.splits['train']
    if problem.kind == NODE_CLASSIFICATION:
        labels = train.target[train.mask > 0] if train.mask is not None else train.target.ravel()
        if labels.size == 0:
            return 0
        return int(np.bincount(labels.astype(np.int64), minlength=problem.num_classes).argmax())
    values = np.asarray(train.target, dtype=np.float64)
    return float(values.mean()) if values.size else 0.0


def neighbor_aggregate(result, raw_sum=False):
    return result.neighbor_sum if raw_sum else result.neighbor_mean()


def global_exchange_round(model, agency, vector, exchanger, round_index, raw_sum=False):
    """One exchange: fetch the neighbor sum and apply the private update"""
    result = exchanger.exchange(agency, round_index, vector)
    return model.update(vector, neighbor_aggregate(result, raw_sum)), result


@dataclass
class GlobalResult:
    vector: np.ndarray
    losses: list
    partial_rounds: list
    rounds: int


def train_global(model, agency, vector, exchanger, task, target, loss_kind):
    """task_iter exchange rounds, each followed by gradient steps on the agency-level loss"""
    optimizer = nn.make_optimizer(task.optimizer, model.parameters(), task.lr, task.weight_decay)
    epochs = settings.CNL['GLOBAL_EPOCHS_PER_ROUND']
    vector = np.asarray(vector, dtype=np.float64)
    losses, partial_rounds = [], []
    for round_index in range(task.task_iter):
        result = exchanger.exchange(agency, round_index, vector)
        if result.partial:
            partial_rounds.append(round_index)
        aggregate = neighbor_aggregate(result, task.raw_sum)
        for _ in range(epochs):
            losses.append(model.step(vector, aggregate, target, loss_kind, optimizer))
        vector = model.update(vector, aggregate)
        logger.debug('agency %s round %d: %d addends, loss %.5f', agency, round_index, result.addend_count,
                     losses[-1] if losses else float('nan'))
    return GlobalResult(vector, losses, partial_rounds, task.task_iter)


def run_concurrently(jobs):
    """Run callables keyed by agency on their own threads; re-raise the first failure"""
    results, errors = {}, {}

    def run(key, job):
        try:
            results[key] = job()
        except Exception as exc:  # noqa: BLE001 - re-raised on the caller's thread
            errors[key] = exc

    threads = [threading.Thread(target=run, args=item, daemon=True) for item in jobs.items()]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    if errors:
        key = sorted(errors, key=str)[0]
        raise errors[key]
    return results


class PlaintextExchanger:
    """In-process neighbor sums in the clear; the reference the encrypted path must match"""

    def __init__(self, global_graph, timeout=None):
        self.neighbors = global_graph.neighbors()
        self.timeout = timeout or settings.CNL['TIMEOUT_SECS']
        self._published = {}
        self._readers = {}
        self._cond = threading.Condition()

    def exchange(self, agency, round_index, vector):
        with self._cond:
            if self.neighbors[agency]:
                self._published[(round_index, agency)] = np.array(vector, dtype=np.float64)
                self._readers[(round_index, agency)] = set(self.neighbors[agency])
            self._cond.notify_all()
            neighbors = self.neighbors[agency]
            ready = self._cond.wait_for(
                lambda: all((round_index, b) in self._published for b in neighbors), timeout=self.timeout)
            if not ready:
                raise RoundTimeoutError(f'agency {agency} round {round_index}: neighbors did not publish in time')
            vectors = [self._published[(round_index, b)] for b in neighbors]
            for b in neighbors:
                readers = self._readers[(round_index, b)]
                readers.discard(agency)
                if not readers:
                    del self._published[(round_index, b)], self._readers[(round_index, b)]
        dim = len(vector)
        total = np.sum(vectors, axis=0) if vectors else np.zeros(dim)
        return ExchangeResult(total, len(vectors))


class NodeExchanger:
    """Encrypted exchange through a running node service"""

    def __init__(self, nodes, task_id):
        self.nodes = nodes
        self.task_id = task_id

    def exchange(self, agency, round_index, vector):
        return self.nodes[agency].exchange(self.task_id, round_index, vector)


@dataclass
class IntegratedGraph:
    graph: graphs.Graph
    features: np.ndarray
    virtual_index: int


def build_integrated_graph(g, agency_vector, node_features=None, virtual_weight=VIRTUAL_EDGE_WEIGHT):
    """Local graph plus one virtual node (last index) wired to every local node"""
    features = g.node_features if node_features is None else node_features
    agency_vector = np.asarray(agency_vector, dtype=np.float64)
    n = g.node_count
    edges = list(g.edges) + [(i, n, virtual_weight) for i in range(n)]
    graph = graphs.Graph(n + 1, edges, directed=g.directed)
    rows = None
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != agency_vector.shape[-1]:
            raise ShapeError('node features and agency vector must share a width')
        rows = np.concatenate([features, agency_vector[None, :]], axis=-2)
    return IntegratedGraph(graph, rows, n)


def build_integrated_problem(problem, record, virtual_weight=VIRTUAL_EDGE_WEIGHT):
    """Problem whose inputs are the local embeddings plus the virtual node row; its target is masked"""
    vector = record.agency
    integrated = build_integrated_graph(problem.graph, vector, virtual_weight=virtual_weight)
    splits = {}
    for name in SPLITS:
        data = problem.splits[name]
        xi = record.local[name]
        virtual = np.broadcast_to(vector, (xi.shape[0], 1, len(vector)))
        x = np.concatenate([xi, virtual], axis=1)
        if problem.kind == EDGE_REGRESSION:
            splits[name] = SplitData(x, data.target, edge_pairs=data.edge_pairs)
            continue
        target = np.concatenate([data.target, np.zeros((data.target.shape[0], 1), dtype=data.target.dtype)], axis=1)
        mask = np.ones(data.target.shape) if data.mask is None else data.mask
        mask = np.concatenate([mask, np.zeros((mask.shape[0], 1))], axis=1)
        splits[name] = SplitData(x, target, mask)
    return Problem(integrated.graph, problem.kind, splits, problem.node_ids, problem.num_classes, integrated.virtual_index)


def integrated_model_kind(task):
    """Embeddings are already temporal features, so the customized model continues with GCN layers"""
    return nn.GCN if task.model == nn.CUSTOMIZED_TEMPORAL else task.model


def train_integrated(problem, task, seed=0, lr_grid=()):
    network, result = fit_with_grid(
        lambda: build_model(problem, task, integrated_model_kind(task), seed), problem, task, lr_grid)
    logger.info('Integrated model: best epoch %d, val loss %.5f', result.best_epoch, result.best_val_loss)
    return network, predict(network, problem, 'test')


def train_centralized(dataset, plan, task, seed=0, lr_grid=()):
    problem = build_problem(dataset, plan, task)
    network, _ = fit_with_grid(lambda: build_model(problem, task, seed=seed), problem, task, lr_grid)
    return network, problem, predict(network, problem, 'test')


# Evaluation

def _selected(problem, split, prediction, rows=None):
    """(truth, pred, per-row index) restricted to real, unmasked entries of the chosen rows"""
    data = problem.splits[split]
    values = prediction.values
    if problem.kind == EDGE_REGRESSION:
        pairs = data.edge_pairs
        keep = np.ones(len(pairs), dtype=bool) if rows is None else np.isin(pairs, list(rows)).all(axis=1)
        return data.target[0, keep], values[0, keep], None
    rows = list(range(problem.real_nodes)) if rows is None else sorted(rows)
    target = data.target[:, rows]
    values = values[:, rows]
    if data.mask is None:
        per_row = np.broadcast_to(np.arange(len(rows)), target.shape)
        return target.ravel(), values.reshape((-1,) + values.shape[2:]), per_row.ravel()
    keep = data.mask[:, rows] > 0
    per_row = np.broadcast_to(np.arange(len(rows)), target.shape)
    return target[keep], values[keep], per_row[keep]


def score_agency(problem, prediction, rows=None, split='test'):
    """Metrics for one agency: single-agency values, single-node averages and the raw pairs"""
    kinds = METRICS_BY_KIND[problem.kind]
    if not problem.has(split):
        return None
    truth, pred, per_row = _selected(problem, split, prediction, rows)
    if truth.size == 0:
        return None
    agency = evaluate_metrics(pred, truth, kinds)
    single_node = None
    if per_row is not None:
        per_node = [evaluate_metrics(pred[per_row == r], truth[per_row == r], kinds)
                    for r in np.unique(per_row)]
        single_node = {kind: mean_defined([m[kind] for m in per_node]) for kind in kinds}
    return {'agency': agency, 'single_node': single_node, 'truth': truth, 'pred': pred}


@dataclass
class MetricRow:
    model: str
    agency: str
    scope: str
    metric: str
    seed: int
    value: float

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ExperimentReport:
    header: dict
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def partial(self):
        return bool(self.failures)

    def add_scores(self, model, seed, scores, kinds, scopes):
        """scores: agency -> score_agency output"""
        for agency in sorted(scores):
            score = scores[agency]
            if score is None:
                continue
            for kind in kinds:
                if SINGLE_NODE in scopes and score['single_node'] is not None:
                    self.rows.append(MetricRow(model, str(agency), SINGLE_NODE, kind, seed, score['single_node'][kind]))
                if SINGLE_AGENCY in scopes:
                    self.rows.append(MetricRow(model, str(agency), SINGLE_AGENCY, kind, seed, score['agency'][kind]))
        defined = [s for s in scores.values() if s is not None]
        if MULTI_AGENCY in scopes and defined:
            truth = np.concatenate([s['truth'] for s in defined])
            pred = np.concatenate([s['pred'] for s in defined])
            for kind, value in evaluate_metrics(pred, truth, kinds).items():
                self.rows.append(MetricRow(model, ALL_AGENCIES, MULTI_AGENCY, kind, seed, value))

    def to_dict(self):
        return {'header': self.header, 'rows': [r.to_dict() for r in self.rows], 'failures': self.failures}


@dataclass
class ExperimentConfig:
    task: TaskConfig
    dataset_dir: str = None
    models: tuple = MODEL_KINDS
    seeds: tuple = (0,)
    scopes: tuple = SCOPES
    global_mode: str = graphs.FULLY_CONNECTED
    exchange: str = ENCRYPTED
    eval_split: str = 'test'
    lr_grid: tuple = ()
    output_dir: str = 'report'
    base_port: int = 0

    def __post_init__(self):
        self.models = tuple(self.models)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.scopes = tuple(self.scopes)
        self.lr_grid = tuple(float(lr) for lr in self.lr_grid)
        unknown = set(self.models) - set(MODEL_KINDS)
        if unknown or not self.models:
            raise ConfigError(f'models must be chosen from {MODEL_KINDS}')
        if set(self.scopes) - set(SCOPES):
            raise ConfigError(f'scopes must be chosen from {SCOPES}')
        if self.exchange not in (PLAINTEXT, ENCRYPTED):
            raise ConfigError(f'exchange must be {PLAINTEXT!r} or {ENCRYPTED!r}')
        if self.eval_split not in ('val', 'test'):
            raise ConfigError(f"eval_split must be 'val' or 'test', not {self.eval_split!r}")
        if self.global_mode not in (graphs.FULLY_CONNECTED, graphs.BY_REALITY):
            raise ConfigError(f'unknown global graph mode {self.global_mode!r}')
        if not self.seeds:
            raise ConfigError('at least one seed is required')

    @property
    def needs_protocol(self):
        """Centralized-only runs never touch the node service"""
        return INTEGRATED in self.models and self.exchange == ENCRYPTED

    def header(self):
        return {
            'task': self.task.to_dict(),
            'models': list(self.models),
            'seeds': list(self.seeds),
            'scopes': list(self.scopes),
            'global_mode': self.global_mode,
            'exchange': self.exchange,
            'eval_split': self.eval_split,
            'lr_grid': list(self.lr_grid),
            'dataset_dir': str(self.dataset_dir) if self.dataset_dir else None,
            'global_epochs_per_round': settings.CNL['GLOBAL_EPOCHS_PER_ROUND'],
            'hidden_width': HIDDEN_WIDTH,
        }

    @classmethod
    def from_dict(cls, data, base_dir=None):
        data = dict(data)
        try:
            task = TaskConfig.from_dict(data.pop('task'))
        except KeyError as exc:
            raise ConfigError('experiment config needs a "task" section') from exc
        known = {f.name for f in fields(cls)} - {'task'}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f'unknown experiment fields {sorted(unknown)}')
        if data.get('dataset_dir') and base_dir is not None:
            data['dataset_dir'] = str(Path(base_dir) / data['dataset_dir'])
        data.setdefault('seeds', task.seeds)
        try:
            return cls(task=task, **data)
        except TypeError as exc:
            raise ConfigError(f'malformed experiment config: {exc}') from exc

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f'cannot read experiment config {path}: {exc}') from exc
        return cls.from_dict(data, base_dir=path.parent)

    def with_overrides(self, **values):
        return replace(self, **{k: v for k, v in values.items() if v is not None})


@dataclass
class AgencyRun:
    problem: Problem
    network: nn.Network
    record: EmbeddingRecord
    prediction: PredictionOutput


def train_global_all(runs, task, exchanger, seed=0):
    """Run every agency's global training concurrently; returns agency -> GlobalResult"""
    jobs = {}
    for agency, run in runs.items():
        out_width = run.problem.num_classes if run.problem.kind == NODE_CLASSIFICATION else 1
        model = GlobalModel(task.dim, out_width, seed=seed * 1000 + agency)
        loss_kind = 'ce' if run.problem.kind == NODE_CLASSIFICATION else 'mse'
        target = agency_target(run.problem)
        jobs[agency] = (lambda m=model, a=agency, r=run, t=target, k=loss_kind:
                        train_global(m, a, r.record.agency, exchanger, task, t, k))
    return run_concurrently(jobs)


def run_experiment(config, dataset, exchanger_factory=None):
    """
    Train and evaluate every requested model kind for every seed.

    ``exchanger_factory(global_graph, task, seed)`` supplies the exchange used
    by the integrated model. Plaintext runs default to the in-process
    exchanger; encrypted runs must be given a factory (see
    ``harness.run_experiment``). Scores are taken on ``config.eval_split``.
    Failures are recorded in the report rather than raised.
    """
    report = ExperimentReport(header=config.header())
    task = config.task
    split = config.eval_split
    kinds = METRICS_BY_KIND[dataset.task_kind]
    if dataset.task_kind != task.task_kind:
        raise ConfigError(f'dataset holds a {dataset.task_kind} task, config asks for {task.task_kind}')
    if exchanger_factory is None:
        if config.needs_protocol:
            raise ConfigError('an encrypted exchange needs an exchanger factory')
        exchanger_factory = _plaintext_factory
    global_graph = graphs.build_global_graph(dataset.partition, config.global_mode, dataset.graph)
    agencies = range(dataset.partition.agency_count)

    for seed in config.seeds:
        plan = plan_splits(dataset, task, seed)
        runs = {}
        if LOCAL in config.models or INTEGRATED in config.models:
            try:
                for agency in agencies:
                    problem = build_problem(dataset, plan, task, dataset.partition.members(agency))
                    network, record, prediction = train_local(problem, task, seed, config.lr_grid)
                    runs[agency] = AgencyRun(problem, network, record, prediction)
                if LOCAL in config.models:
                    scores = {a: score_agency(r.problem, _on_split(r, split), split=split) for a, r in runs.items()}
                    report.add_scores(LOCAL, seed, scores, kinds, config.scopes)
            except CNLError as exc:
                # integrated-only runs still train the local stage first
                _record_failure(report, LOCAL if LOCAL in config.models else INTEGRATED, seed, exc)
                runs = {}

        if INTEGRATED in config.models and runs:
            try:
                exchanger = exchanger_factory(global_graph, task, seed)
                try:
                    results = train_global_all(runs, task, exchanger, seed)
                finally:
                    close = getattr(exchanger, 'close', None)
                    if close:
                        close()
                scores = {}
                for agency, run in runs.items():
                    result = results[agency]
                    run.record.agency = result.vector
                    run.record.fused = True
                    run.record.round = result.rounds
                    if result.partial_rounds:
                        run.record.partial = True
                        report.failures.append({'model': INTEGRATED, 'seed': seed, 'agency': agency,
                                                'error': f'partial exchange in rounds {result.partial_rounds}'})
                    problem = build_integrated_problem(run.problem, run.record)
                    network, _ = train_integrated(problem, task, seed, config.lr_grid)
                    scores[agency] = score_agency(problem, predict(network, problem, split),
                                                  rows=range(problem.real_nodes), split=split)
                report.add_scores(INTEGRATED, seed, scores, kinds, config.scopes)
            except CNLError as exc:
                _record_failure(report, INTEGRATED, seed, exc)

        if CENTRALIZED in config.models:
            try:
                network, problem, _ = train_centralized(dataset, plan, task, seed, config.lr_grid)
                prediction = predict(network, problem, split)
                position = {node: i for i, node in enumerate(problem.node_ids)}
                scores = {
                    agency: score_agency(problem, prediction, rows=[position[n] for n in dataset.partition.members(agency)],
                                         split=split)
                    for agency in agencies
                }
                report.add_scores(CENTRALIZED, seed, scores, kinds, config.scopes)
            except CNLError as exc:
                _record_failure(report, CENTRALIZED, seed, exc)
        logger.info('Seed %d finished with %d rows so far', seed, len(report.rows))
    return report


def _on_split(run, split):
    return run.prediction if split == 'test' else predict(run.network, run.problem, split)


def _plaintext_factory(global_graph, task, seed):
    return PlaintextExchanger(global_graph, task.effective_timeout())


def _record_failure(report, model, seed, exc):
    logger.error('%s model failed for seed %d: %s', model, seed, exc)
    report.failures.append({'model': model, 'seed': seed, 'agency': None, 'error': f'{type(exc).__name__}: {exc}'})
