"""
Graph representation, synthetic generators, contagion simulators, agency
partitioning and dataset splits.

Everything here is a pure function over value types, so it can be called
from any thread.
"""
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from sklearn.cluster import KMeans

from .exceptions import GraphError

SUSCEPTIBLE = 0
INFECTED = 1
RECOVERED = 2

FULLY_CONNECTED = 'fully_connected'
BY_REALITY = 'by_reality'

DEGREE_GUARD = 1e-10
KMEANS_MAX_ITER = 100
KMEANS_RETRIES = 10


@dataclass
class Graph:
    """Simple graph with optional node features and labels"""

    node_count: int
    edges: list = field(default_factory=list)
    node_features: np.ndarray = None
    node_labels: list = None
    directed: bool = False

    def __post_init__(self):
        if self.node_count < 0:
            raise GraphError('node_count must be non-negative')
        cleaned = {}
        for edge in self.edges:
            src, dst = int(edge[0]), int(edge[1])
            weight = float(edge[2]) if len(edge) > 2 else 1.0
            if not (0 <= src < self.node_count and 0 <= dst < self.node_count):
                raise GraphError(f'edge ({src}, {dst}) references a node outside [0, {self.node_count})')
            if src == dst:
                raise GraphError(f'self-loop on node {src} is not allowed')
            if not self.directed and src > dst:
                src, dst = dst, src
            cleaned[(src, dst)] = weight
        self.edges = [(src, dst, weight) for (src, dst), weight in sorted(cleaned.items())]
        if self.node_features is not None:
            self.node_features = np.asarray(self.node_features, dtype=np.float64)
            if self.node_features.ndim != 2 or self.node_features.shape[0] != self.node_count:
                raise GraphError('node_features must have one row per node')
        if self.node_labels is not None:
            self.node_labels = [int(label) for label in self.node_labels]
            if len(self.node_labels) != self.node_count:
                raise GraphError('node_labels must cover every node')

    @property
    def edge_count(self):
        return len(self.edges)

    def adjacency(self):
        """Dense weighted adjacency matrix (symmetric unless directed)"""
        matrix = np.zeros((self.node_count, self.node_count))
        for src, dst, weight in self.edges:
            matrix[src, dst] = weight
            if not self.directed:
                matrix[dst, src] = weight
        return matrix

    def neighbors(self):
        """Sorted neighbor lists per node"""
        lists = [[] for _ in range(self.node_count)]
        for src, dst, _ in self.edges:
            lists[src].append(dst)
            if not self.directed:
                lists[dst].append(src)
        return [sorted(items) for items in lists]

    def to_networkx(self):
        graph = nx.DiGraph() if self.directed else nx.Graph()
        graph.add_nodes_from(range(self.node_count))
        graph.add_weighted_edges_from(self.edges)
        return graph

    @classmethod
    def from_networkx(cls, graph):
        nodes = sorted(graph.nodes())
        index = {node: i for i, node in enumerate(nodes)}
        edges = [(index[u], index[v], float(data.get('weight', 1.0))) for u, v, data in graph.edges(data=True)]
        return cls(node_count=len(nodes), edges=edges, directed=graph.is_directed())


@dataclass(frozen=True)
class AgencyPartition:
    """Assignment of every node to one of K agencies"""

    assignment: tuple
    agency_count: int

    def __post_init__(self):
        object.__setattr__(self, 'assignment', tuple(int(a) for a in self.assignment))
        if self.agency_count < 1:
            raise GraphError('agency_count must be at least 1')
        owned = set(self.assignment)
        if any(a < 0 or a >= self.agency_count for a in owned):
            raise GraphError(f'agency ids must lie in [0, {self.agency_count})')
        if len(owned) != self.agency_count:
            missing = sorted(set(range(self.agency_count)) - owned)
            raise GraphError(f'agencies {missing} own no nodes')

    def members(self, agency):
        if not 0 <= agency < self.agency_count:
            raise GraphError(f'unknown agency {agency}')
        return [node for node, owner in enumerate(self.assignment) if owner == agency]

    def to_dict(self):
        return {'agency_count': self.agency_count, 'assignment': list(self.assignment)}

    @classmethod
    def from_dict(cls, data):
        return cls(assignment=tuple(data['assignment']), agency_count=int(data['agency_count']))


@dataclass
class TimeSeriesPanel:
    """Rows are time steps, columns are nodes"""

    values: np.ndarray
    region_ids: list = None
    # Compartment per node and step, kept by the epidemic simulators
    states: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise GraphError('panel values must be a T x N matrix')
        if not np.all(np.isfinite(self.values)):
            raise GraphError('panel contains missing or non-finite entries')
        if self.region_ids is not None and len(self.region_ids) != self.values.shape[1]:
            raise GraphError('region_ids must align with panel columns')

    @property
    def length(self):
        return self.values.shape[0]

    def compartment_counts(self):
        """(S, I, R) counts per step"""
        if self.states is None:
            raise GraphError('panel was not produced by a simulator')
        return tuple((self.states == state).sum(axis=1) for state in (SUSCEPTIBLE, INFECTED, RECOVERED))

    def slice(self, start, stop):
        states = self.states[start:stop] if self.states is not None else None
        return TimeSeriesPanel(self.values[start:stop], self.region_ids, states)


@dataclass
class LocalSubgraph:
    """Induced agency subgraph; node_ids[new] is the original node id"""

    graph: Graph
    node_ids: list

    @property
    def index(self):
        return {old: new for new, old in enumerate(self.node_ids)}


def generate_er(n, m, seed):
    """Erdős–Rényi G(n, m): m distinct edges drawn uniformly without replacement"""
    max_edges = n * (n - 1) // 2
    if m > max_edges:
        raise GraphError(f'{m} edges exceed the {max_edges} possible in a simple graph on {n} nodes')
    return Graph.from_networkx(nx.gnm_random_graph(n, m, seed=seed))


def generate_ba(n, m_attach, seed):
    """Barabási–Albert preferential attachment grown from a complete seed graph"""
    if not 1 <= m_attach < n:
        raise GraphError(f'm_attach must satisfy 1 <= m_attach < n, got {m_attach} for n={n}')
    seed_graph = nx.complete_graph(m_attach + 1)
    if n == m_attach + 1:
        return Graph.from_networkx(seed_graph)
    return Graph.from_networkx(nx.barabasi_albert_graph(n, m_attach, seed=seed, initial_graph=seed_graph))


def _check_rates(beta, mu, initial_infected, n):
    if not (0.0 <= beta <= 1.0 and 0.0 <= mu <= 1.0):
        raise GraphError(f'rates must lie in [0, 1], got beta={beta}, mu={mu}')
    if not initial_infected:
        raise GraphError('initial_infected must be non-empty')
    if any(not 0 <= node < n for node in initial_infected):
        raise GraphError('initial_infected references unknown nodes')


def _infection_pressure(adjacency, state, beta):
    infected_neighbors = adjacency @ (state == INFECTED).astype(np.float64)
    return 1.0 - np.power(1.0 - beta, infected_neighbors)


def simulate_sis(g, beta, mu, steps, initial_infected, seed):
    """Synchronous discrete-time SIS; row t holds infection indicators after t steps"""
    n = g.node_count
    _check_rates(beta, mu, initial_infected, n)
    rng = np.random.default_rng(seed)
    adjacency = (g.adjacency() != 0).astype(np.float64)
    state = np.full(n, SUSCEPTIBLE, dtype=np.int8)
    state[sorted(initial_infected)] = INFECTED
    history = [state.copy()]
    for _ in range(steps):
        draws = rng.random(n)
        pressure = _infection_pressure(adjacency, state, beta)
        infected = state == INFECTED
        new_state = state.copy()
        new_state[~infected & (draws < pressure)] = INFECTED
        new_state[infected & (draws < mu)] = SUSCEPTIBLE
        state = new_state
        history.append(state.copy())
    states = np.stack(history)
    return TimeSeriesPanel((states == INFECTED).astype(np.float64), states=states)


def simulate_sir(g, beta, mu, steps, initial_infected, seed):
    """Synchronous discrete-time SIR; stops early once nobody is infected"""
    n = g.node_count
    _check_rates(beta, mu, initial_infected, n)
    rng = np.random.default_rng(seed)
    adjacency = (g.adjacency() != 0).astype(np.float64)
    state = np.full(n, SUSCEPTIBLE, dtype=np.int8)
    state[sorted(initial_infected)] = INFECTED
    history = [state.copy()]
    for _ in range(steps):
        if not np.any(state == INFECTED):
            break
        draws = rng.random(n)
        pressure = _infection_pressure(adjacency, state, beta)
        new_state = state.copy()
        new_state[(state == SUSCEPTIBLE) & (draws < pressure)] = INFECTED
        new_state[(state == INFECTED) & (draws < mu)] = RECOVERED
        state = new_state
        history.append(state.copy())
    states = np.stack(history)
    return TimeSeriesPanel((states == INFECTED).astype(np.float64), states=states)


def aggregate_region_counts(panel, region_ids):
    """Sum per-node indicators into per-region counts, regions in sorted order"""
    region_ids = list(region_ids)
    if len(region_ids) != panel.values.shape[1]:
        raise GraphError('region_ids must align with panel columns')
    regions = sorted(set(region_ids))
    columns = [panel.values[:, [i for i, r in enumerate(region_ids) if r == region]].sum(axis=1) for region in regions]
    return TimeSeriesPanel(np.stack(columns, axis=1), region_ids=regions)


def _relabel_by_first_node(labels):
    order = {}
    for label in labels:
        order.setdefault(int(label), len(order))
    return [order[int(label)] for label in labels]


def spectral_partition(g, k, seed):
    """Normalized-Laplacian spectral clustering into k non-empty agencies"""
    n = g.node_count
    if not 2 <= k <= n:
        raise GraphError(f'k must satisfy 2 <= k <= node_count, got k={k}, n={n}')
    adjacency = g.adjacency()
    degree = adjacency.sum(axis=1) + DEGREE_GUARD
    inv_sqrt = 1.0 / np.sqrt(degree)
    laplacian = np.eye(n) - inv_sqrt[:, None] * adjacency * inv_sqrt[None, :]
    _, vectors = np.linalg.eigh(laplacian)
    embedding = vectors[:, :k]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = embedding / np.where(norms > 0, norms, 1.0)

    for attempt in range(KMEANS_RETRIES):
        kmeans = KMeans(n_clusters=k, init='k-means++', n_init=1, max_iter=KMEANS_MAX_ITER,
                        random_state=seed + attempt)
        labels = kmeans.fit_predict(embedding)
        if len(set(labels.tolist())) == k:
            return AgencyPartition(assignment=tuple(_relabel_by_first_node(labels)), agency_count=k)
    raise GraphError(f'k-means left an empty cluster after {KMEANS_RETRIES} re-seeds')


def local_subgraph(g, p, a):
    """Induced subgraph of agency a, cross-agency edges dropped"""
    node_ids = p.members(a)
    index = {old: new for new, old in enumerate(node_ids)}
    edges = [(index[src], index[dst], weight) for src, dst, weight in g.edges if src in index and dst in index]
    features = g.node_features[node_ids] if g.node_features is not None else None
    labels = [g.node_labels[i] for i in node_ids] if g.node_labels is not None else None
    graph = Graph(len(node_ids), edges, features, labels, g.directed)
    return LocalSubgraph(graph=graph, node_ids=node_ids)


def cross_agency_edges(g, p):
    return [(src, dst, weight) for src, dst, weight in g.edges if p.assignment[src] != p.assignment[dst]]


def build_global_graph(p, mode=FULLY_CONNECTED, g=None):
    """Agency-level graph, complete or wired by real cross-agency edges"""
    k = p.agency_count
    if mode == FULLY_CONNECTED:
        edges = [(a, b, 1.0) for a in range(k) for b in range(a + 1, k)]
        return Graph(k, edges)
    if mode == BY_REALITY:
        if g is None:
            raise GraphError('by_reality global graph needs the source graph')
        counts = {}
        for src, dst, _ in cross_agency_edges(g, p):
            key = tuple(sorted((p.assignment[src], p.assignment[dst])))
            counts[key] = counts.get(key, 0) + 1
        return Graph(k, [(a, b, float(count)) for (a, b), count in counts.items()])
    raise GraphError(f'unknown global graph mode {mode!r}')


def homophily(g, labels):
    """Fraction of edges whose endpoints share a label"""
    labels = list(labels)
    if len(labels) < g.node_count:
        raise GraphError('labels must cover every node')
    if g.edge_count == 0:
        raise GraphError('homophily is undefined on a graph without edges')
    same = sum(1 for src, dst, _ in g.edges if labels[src] == labels[dst])
    return same / g.edge_count


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise GraphError(f'split ratios must be three non-negative values summing to 1, got {ratios}')


def chronological_split(panel, ratios=(0.5, 0.2, 0.3), min_length=1):
    """Contiguous train/val/test blocks; each must hold at least min_length steps"""
    _check_ratios(ratios)
    total = panel.length
    first = math.floor(ratios[0] * total + 1e-9)
    second = math.floor((ratios[0] + ratios[1]) * total + 1e-9)
    blocks = (panel.slice(0, first), panel.slice(first, second), panel.slice(second, total))
    for name, block in zip(('train', 'val', 'test'), blocks):
        if block.length < max(min_length, 1):
            raise GraphError(f'{name} split holds {block.length} steps, needs {max(min_length, 1)}')
    return blocks


def node_split(n, ratios=(0.6, 0.2, 0.2), seed=0):
    """Random disjoint train/val/test node indices; rounding remainder goes to train"""
    _check_ratios(ratios)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise GraphError(f'split of {n} nodes with ratios {ratios} leaves an empty set')
    order = np.random.default_rng(seed).permutation(n)
    train = np.sort(order[:n_train])
    val = np.sort(order[n_train:n_train + n_val])
    test = np.sort(order[n_train + n_val:])
    return train, val, test


def edge_split(edge_count, ratios=(0.8, 0.1, 0.1), seed=0):
    """Same rule as node_split, applied to edge indices"""
    return node_split(edge_count, ratios, seed)
