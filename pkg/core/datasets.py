"""
Dataset files and synthetic recipes.

A dataset directory holds ``edges.csv`` (``src,dst[,weight]``, 0-indexed),
``features.csv`` (one row per node), ``labels.csv`` (one integer per line),
``series.csv`` (rows are time steps, header of node ids), ``partition.json``
and a small ``meta.json`` recording the recipe and task kind.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import graphs
from .exceptions import ConfigError, GraphError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'

NODE_REGRESSION = 'node_regression'
NODE_CLASSIFICATION = 'node_classification'
EDGE_REGRESSION = 'edge_regression'
TASK_KINDS = (NODE_REGRESSION, NODE_CLASSIFICATION, EDGE_REGRESSION)


@dataclass
class Dataset:
    graph: graphs.Graph
    partition: graphs.AgencyPartition
    panel: graphs.TimeSeriesPanel = None
    meta: dict = field(default_factory=dict)

    @property
    def task_kind(self):
        return self.meta.get('task_kind', NODE_REGRESSION)


def write_dataset(directory, dataset):
    """Write every dataset file; identical datasets produce identical bytes"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f'cannot create dataset directory {directory}: {exc}') from exc

    graph = dataset.graph
    edges = pd.DataFrame(graph.edges, columns=['src', 'dst', 'weight'])
    edges.to_csv(directory / 'edges.csv', header=False, index=False, float_format=FLOAT_FORMAT)

    if graph.node_features is not None:
        pd.DataFrame(graph.node_features).to_csv(
            directory / 'features.csv', header=False, index=False, float_format=FLOAT_FORMAT)

    labels = graph.node_labels if graph.node_labels is not None else [0] * graph.node_count
    pd.Series(labels, dtype='int64').to_csv(directory / 'labels.csv', header=False, index=False)

    if dataset.panel is not None:
        series = pd.DataFrame(dataset.panel.values, columns=[str(i) for i in range(dataset.panel.values.shape[1])])
        series.to_csv(directory / 'series.csv', index=False, float_format=FLOAT_FORMAT)

    (directory / 'partition.json').write_text(json.dumps(dataset.partition.to_dict()) + '\n', encoding='utf-8')
    (directory / 'meta.json').write_text(json.dumps(dataset.meta, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    logger.info('Wrote dataset %s (%d nodes, %d edges)', directory, graph.node_count, graph.edge_count)
    return directory


def _read_matrix(path):
    if not path.exists() or path.stat().st_size == 0:
        return None
    try:
        return pd.read_csv(path, header=None, dtype=float).to_numpy()
    except (ValueError, pd.errors.ParserError) as exc:
        raise ConfigError(f'{path.name} is not a numeric CSV: {exc}') from exc


def load_dataset(directory):
    """Load and validate a dataset directory"""
    directory = Path(directory)
    if not (directory / 'edges.csv').exists() or not (directory / 'partition.json').exists():
        raise ConfigError(f'{directory} is missing edges.csv or partition.json')
    try:
        partition = graphs.AgencyPartition.from_dict(json.loads((directory / 'partition.json').read_text(encoding='utf-8')))
        meta_path = directory / 'meta.json'
        meta = json.loads(meta_path.read_text(encoding='utf-8')) if meta_path.exists() else {}
    except (KeyError, TypeError, json.JSONDecodeError, GraphError) as exc:
        raise ConfigError(f'invalid partition.json or meta.json in {directory}: {exc}') from exc

    node_count = len(partition.assignment)
    raw_edges = _read_matrix(directory / 'edges.csv')
    edges = []
    if raw_edges is not None:
        if raw_edges.shape[1] not in (2, 3):
            raise ConfigError('edges.csv rows must be src,dst[,weight]')
        for row in raw_edges:
            if row[0] != int(row[0]) or row[1] != int(row[1]):
                raise ConfigError('edges.csv node ids must be integers')
            weight = row[2] if raw_edges.shape[1] == 3 else 1.0
            edges.append((int(row[0]), int(row[1]), float(weight)))

    features = _read_matrix(directory / 'features.csv')
    labels_path = directory / 'labels.csv'
    labels = None
    if labels_path.exists() and labels_path.stat().st_size > 0:
        labels = pd.read_csv(labels_path, header=None).iloc[:, 0].astype(int).tolist()

    try:
        graph = graphs.Graph(node_count, edges, features, labels)
        panel = None
        series_path = directory / 'series.csv'
        if series_path.exists():
            frame = pd.read_csv(series_path)
            if frame.shape[1] != node_count:
                raise ConfigError('series.csv must have one column per node')
            panel = graphs.TimeSeriesPanel(frame.to_numpy(dtype=float), region_ids=[int(c) for c in frame.columns])
    except GraphError as exc:
        raise ConfigError(f'invalid dataset {directory}: {exc}') from exc
    return Dataset(graph=graph, partition=partition, panel=panel, meta=meta)


def _pad_absorbing(panel, length):
    """Repeat the final row so a stopped SIR run keeps the requested length"""
    missing = length - panel.length
    if missing <= 0:
        return panel
    values = np.vstack([panel.values, np.repeat(panel.values[-1:], missing, axis=0)])
    states = np.vstack([panel.states, np.repeat(panel.states[-1:], missing, axis=0)])
    return graphs.TimeSeriesPanel(values, states=states)


def contagion_recipe(generator, dynamics, nodes=300, edges=1200, attach=4, agencies=5, steps=200,
                     beta=0.2, mu=0.1, seed_fraction=0.01, seed=0):
    """ER/BA network plus an SIS/SIR run, split into agencies by spectral clustering"""
    if generator == 'er':
        graph = graphs.generate_er(nodes, edges, seed)
    else:
        graph = graphs.generate_ba(nodes, attach, seed)
    rng = np.random.default_rng(seed)
    seed_count = max(1, math.ceil(seed_fraction * nodes))
    initial = sorted(rng.choice(nodes, size=seed_count, replace=False).tolist())
    simulate = graphs.simulate_sis if dynamics == 'sis' else graphs.simulate_sir
    panel = _pad_absorbing(simulate(graph, beta, mu, steps, initial, seed), steps + 1)

    degree = graph.adjacency().sum(axis=1)
    features = (degree / max(degree.max(), 1.0))[:, None]
    ever_infected = (panel.values.max(axis=0) > 0).astype(int).tolist()
    graph = graphs.Graph(graph.node_count, graph.edges, features, ever_infected)
    partition = graphs.spectral_partition(graph, agencies, seed)
    meta = {
        'recipe': f'{generator}_{dynamics}', 'task_kind': NODE_REGRESSION, 'seed': seed,
        'beta': beta, 'mu': mu, 'steps': steps, 'initial_infected': initial,
    }
    return Dataset(graph=graph, partition=partition, panel=panel, meta=meta)


def planted_signal_recipe(agencies=3, nodes_per_agency=30, feature_dim=4, seed=0):
    """
    Classification data whose labels depend on the other agencies' mean feature.

    Node i of agency a gets features [u_i, o_a + noise, noise...] and label
    1 when u_i + mean(o_b for b != a) > 0, so the decision threshold of each
    agency is set by context that only lives in its neighbors.
    """
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, 1.5, size=agencies)
    n = agencies * nodes_per_agency
    assignment = np.repeat(np.arange(agencies), nodes_per_agency)
    features = rng.normal(0.0, 1.0, size=(n, feature_dim))
    features[:, 1] = offsets[assignment] + rng.normal(0.0, 0.3, size=n)
    context = np.array([(offsets.sum() - offsets[a]) / max(agencies - 1, 1) for a in range(agencies)])
    labels = (features[:, 0] + context[assignment] > 0).astype(int)

    edges = set()
    for a in range(agencies):
        members = np.flatnonzero(assignment == a)
        for i in members:
            same = members[(labels[members] == labels[i]) & (members != i)]
            if len(same):
                for j in rng.choice(same, size=min(2, len(same)), replace=False):
                    edges.add((min(i, j), max(i, j)))
    for _ in range(n // 2):
        i, j = rng.choice(n, size=2, replace=False)
        if assignment[i] != assignment[j]:
            edges.add((min(i, j), max(i, j)))
    graph = graphs.Graph(n, [(int(i), int(j), 1.0) for i, j in sorted(edges)], features, labels.tolist())
    partition = graphs.AgencyPartition(tuple(assignment.tolist()), agencies)
    meta = {'recipe': 'toy_classify', 'task_kind': NODE_CLASSIFICATION, 'seed': seed, 'num_classes': 2}
    return Dataset(graph=graph, partition=partition, meta=meta)


def bipartite_rating_recipe(agencies=3, users_per_agency=20, items=30, ratings_per_user=8, latent_dim=3, seed=0):
    """Users rate items 1..5 from latent factors; agencies are user communities"""
    rng = np.random.default_rng(seed)
    users = agencies * users_per_agency
    community = np.repeat(np.arange(agencies), users_per_agency)
    centers = rng.normal(0.0, 1.0, size=(agencies, latent_dim))
    user_latent = centers[community] + rng.normal(0.0, 0.3, size=(users, latent_dim))
    item_latent = rng.normal(0.0, 1.0, size=(items, latent_dim))

    edges = []
    raters = [[] for _ in range(items)]
    for u in range(users):
        for item in sorted(rng.choice(items, size=min(ratings_per_user, items), replace=False).tolist()):
            rating = float(np.clip(np.rint(3.0 + user_latent[u] @ item_latent[item]), 1, 5))
            edges.append((u, users + item, rating))
            raters[item].append(community[u])

    latent = np.vstack([user_latent, item_latent])
    features = latent + rng.normal(0.0, 0.5, size=latent.shape)
    item_owner = [int(np.bincount(r, minlength=agencies).argmax()) if r else i % agencies for i, r in enumerate(raters)]
    assignment = community.tolist() + item_owner
    graph = graphs.Graph(users + items, edges, features, [0] * users + [1] * items)
    partition = graphs.AgencyPartition(tuple(assignment), agencies)
    meta = {'recipe': 'toy_bipartite', 'task_kind': EDGE_REGRESSION, 'seed': seed, 'users': users, 'items': items}
    return Dataset(graph=graph, partition=partition, meta=meta)


RECIPES = {
    'er_sis': lambda **kw: contagion_recipe('er', 'sis', **kw),
    'er_sir': lambda **kw: contagion_recipe('er', 'sir', **kw),
    'ba_sis': lambda **kw: contagion_recipe('ba', 'sis', **kw),
    'ba_sir': lambda **kw: contagion_recipe('ba', 'sir', **kw),
    'toy_classify': planted_signal_recipe,
    'toy_bipartite': bipartite_rating_recipe,
}


def build_recipe(name, **params):
    """Build a named synthetic dataset, ignoring parameters set to None"""
    if name not in RECIPES:
        raise ConfigError(f'unknown recipe {name!r}; choose from {sorted(RECIPES)}')
    params = {key: value for key, value in params.items() if value is not None}
    try:
        return RECIPES[name](**params)
    except TypeError as exc:
        raise ConfigError(f'bad parameters for recipe {name}: {exc}') from exc
