"""
In-process clusters, the per-agency runtime used by served nodes, and
report files.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings

from . import graphs, learning, wire
from .datasets import NODE_CLASSIFICATION, load_dataset
from .exceptions import CNLError, ConfigError, ProtocolError, UnknownTaskError
from .metrics import better, format_metric
from .node import CooperativeNode, Neighbor, PeerConfig, TaskConfig, TaskState

logger = logging.getLogger(__name__)

EXPLICIT = 'explicit'
TOPOLOGIES = (graphs.FULLY_CONNECTED, graphs.BY_REALITY, EXPLICIT)
LOOPBACK = '127.0.0.1'
REPORT_COLUMNS = ['model', 'agency', 'scope', 'metric', 'seed', 'value']
KEY_SHARE_PAUSE_SECS = 0.1


def node_name(agency):
    return f'agency-{agency}'


@dataclass
class ClusterSpec:
    agency_count: int
    topology: str = graphs.FULLY_CONNECTED
    edges: list = field(default_factory=list)
    host: str = LOOPBACK
    base_port: int = 0
    dataset_dir: str = None
    key_dir: str = None
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        if self.agency_count < 1:
            raise ConfigError('a cluster needs at least one agency')
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f'topology must be one of {TOPOLOGIES}')
        if self.base_port and self.base_port + self.agency_count > 65536:
            raise ConfigError('port range exceeds 65535')
        self.edges = [tuple(sorted((int(a), int(b)))) for a, b in self.edges]
        if any(a == b or not (0 <= a < self.agency_count and 0 <= b < self.agency_count) for a, b in self.edges):
            raise ConfigError('explicit edges must join two distinct agencies')
        self.tasks = [t if isinstance(t, TaskConfig) else TaskConfig.from_dict(t) for t in self.tasks]

    @property
    def node_ids(self):
        return [node_name(k) for k in range(self.agency_count)]

    def ports(self):
        """Distinct ports per agency; zeros ask the OS to choose"""
        if not self.base_port:
            return [0] * self.agency_count
        return [self.base_port + k for k in range(self.agency_count)]

    def links(self, dataset=None):
        if self.topology == EXPLICIT:
            return sorted(set(self.edges))
        if self.topology == graphs.BY_REALITY:
            if dataset is None:
                if not self.dataset_dir:
                    raise ConfigError('by_reality topology needs dataset_dir')
                dataset = load_dataset(self.dataset_dir)
            global_graph = graphs.build_global_graph(dataset.partition, graphs.BY_REALITY, dataset.graph)
            return [(a, b) for a, b, _ in global_graph.edges]
        k = self.agency_count
        return [(a, b) for a in range(k) for b in range(a + 1, k)]

    def peer_configs(self, links=None):
        links = self.links() if links is None else links
        ports = self.ports()
        adjacency = {k: [] for k in range(self.agency_count)}
        for a, b in links:
            adjacency[a].append(b)
            adjacency[b].append(a)
        configs = []
        for k in range(self.agency_count):
            neighbors = tuple(Neighbor(node_name(j), (self.host, ports[j])) for j in sorted(adjacency[k]))
            key_path = Path(self.key_dir) / f'{node_name(k)}.pem' if self.key_dir else None
            configs.append(PeerConfig(node_name(k), (self.host, ports[k]), neighbors,
                                      data_dir=self.dataset_dir, identity_key_path=key_path))
        return configs

    @classmethod
    def from_dict(cls, data, base_dir=None):
        data = dict(data)
        base = Path(base_dir) if base_dir else None
        for key in ('dataset_dir', 'key_dir'):
            if data.get(key) and base is not None:
                data[key] = str(base / data[key])
        try:
            return cls(
                agency_count=int(data.pop('agency_count')),
                topology=data.pop('topology', graphs.FULLY_CONNECTED),
                edges=data.pop('edges', []),
                host=data.pop('host', LOOPBACK),
                base_port=int(data.pop('base_port', 0)),
                dataset_dir=data.pop('dataset_dir', None),
                key_dir=data.pop('key_dir', None),
                tasks=data.pop('tasks', []),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f'malformed cluster spec: {exc}') from exc

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f'cannot read cluster spec {path}: {exc}') from exc
        return cls.from_dict(data, base_dir=path.parent)


class SimulatedCluster:
    """K node services on loopback wired by the cluster topology"""

    def __init__(self, spec, links=None, record_traffic=False):
        self.spec = spec
        self.links = spec.links() if links is None else list(links)
        self.record_traffic = record_traffic
        self.nodes = {}

    @property
    def link_count(self):
        return len(self.links)

    def start(self):
        configs = self.spec.peer_configs(self.links)
        try:
            for agency, config in enumerate(configs):
                self.nodes[agency] = CooperativeNode(config, record_traffic=self.record_traffic).start()
        except CNLError:
            self.stop()
            raise
        for node in self.nodes.values():
            for neighbor in node.config.neighbor_ids:
                agency = int(neighbor.rsplit('-', 1)[1])
                node.connect(neighbor, self.nodes[agency].address)
        logger.info('Cluster of %d nodes up with %d links', len(self.nodes), self.link_count)
        return self

    def stop(self):
        for node in self.nodes.values():
            node.stop()
        self.nodes = {}

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc_info):
        self.stop()

    def node(self, agency):
        return self.nodes[agency]

    def hello_all(self):
        return {node.node_id: node.hello_neighbors() for node in self.nodes.values()}

    def announce(self, task, initiator=0):
        """Flood the task from one agency, then have every node share its public key"""
        self.nodes[initiator].announce_task(task)
        missing = [node.node_id for node in self.nodes.values() if task.task_id not in node.seen_tasks]
        if missing:
            logger.warning('Task %s did not reach %s', task.task_id, missing)
        jobs = {agency: node.share_public_key for agency, node in self.nodes.items() if task.task_id in node.seen_tasks}
        learning.run_concurrently({agency: (lambda share=share: share(task.task_id)) for agency, share in jobs.items()})

    def exchanger(self, task_id):
        return learning.NodeExchanger(self.nodes, task_id)


class ClusterExchanger(learning.NodeExchanger):
    """Encrypted exchanger that owns a private cluster and stops it when closed"""

    def __init__(self, cluster, task_id):
        super().__init__(cluster.nodes, task_id)
        self.cluster = cluster

    def close(self):
        for node in self.cluster.nodes.values():
            if self.task_id in node.seen_tasks:
                node.complete_task(self.task_id)
        self.cluster.stop()


def encrypted_exchanger_factory(base_port=0, record_traffic=False):
    """Factory for run_experiment that routes the integrated exchange through a loopback cluster"""

    def build(global_graph, task, seed):
        spec = ClusterSpec(global_graph.node_count, EXPLICIT, [(a, b) for a, b, _ in global_graph.edges],
                           base_port=base_port)
        cluster = SimulatedCluster(spec, record_traffic=record_traffic).start()
        seeded = TaskConfig.from_dict({**task.to_dict(), 'task_id': f'{task.task_id}-seed{seed}'})
        try:
            cluster.announce(seeded)
        except CNLError:
            cluster.stop()
            raise
        return ClusterExchanger(cluster, seeded.task_id)

    return build


class AgencyRuntime:
    """
    One agency's cooperative pipeline on a served node: background local
    training, key sharing, encrypted global rounds and the integrated model.
    """

    def __init__(self, node, task, dataset_dir, agency, seed=0, lr_grid=()):
        self.node = node
        self.task = task
        self.dataset_dir = str(dataset_dir)
        self.agency = agency
        self.seed = seed
        self.lr_grid = tuple(lr_grid)

    def wait_for_task(self, timeout=None):
        deadline = time.monotonic() + (timeout or self.task.effective_timeout())
        while self.task.task_id not in self.node.seen_tasks:
            if time.monotonic() >= deadline:
                raise UnknownTaskError(f'{self.node.node_id} never received task {self.task.task_id}')
            time.sleep(KEY_SHARE_PAUSE_SECS)

    def share_key(self):
        """Share until every neighbor has registered the task and stored the key, or time runs out"""
        deadline = time.monotonic() + self.task.effective_timeout()
        while True:
            delivered = self.node.share_public_key(self.task.task_id)
            if all(delivered.values()) or time.monotonic() >= deadline:
                return delivered
            time.sleep(KEY_SHARE_PAUSE_SECS)

    def run(self):
        from .tasks import train_local_job

        task_id = self.task.task_id
        self.wait_for_task()
        self.node.mark_state(task_id, TaskState.EMBEDDING_COMPUTING)
        payload = train_local_job.delay(self.dataset_dir, self.agency, self.task.to_dict(), self.seed,
                                        list(self.lr_grid)).get()
        record = learning.EmbeddingRecord(
            local={name: np.asarray(values) for name, values in payload['embeddings'].items()},
            agency=np.asarray(payload['agency_vector']))
        self.share_key()

        dataset = load_dataset(self.dataset_dir)
        plan = learning.plan_splits(dataset, self.task, self.seed)
        problem = learning.build_problem(dataset, plan, self.task, dataset.partition.members(self.agency))
        out_width = problem.num_classes if problem.kind == NODE_CLASSIFICATION else 1
        model = learning.GlobalModel(self.task.dim, out_width, seed=self.seed * 1000 + self.agency)
        result = learning.train_global(
            model, self.agency, record.agency, learning.NodeExchanger({self.agency: self.node}, task_id),
            self.task, learning.agency_target(problem), problem.loss_kind)
        record.agency, record.fused, record.round = result.vector, True, result.rounds
        record.partial = bool(result.partial_rounds)

        integrated = learning.build_integrated_problem(problem, record)
        _, prediction = learning.train_integrated(integrated, self.task, self.seed, self.lr_grid)
        report = learning.ExperimentReport(header={'task': self.task.to_dict(), 'agency': self.agency, 'seed': self.seed})
        kinds = learning.METRICS_BY_KIND[problem.kind]
        report.add_scores(learning.LOCAL, self.seed, {self.agency: _local_score(payload)}, kinds,
                          (learning.SINGLE_AGENCY,))
        report.add_scores(learning.INTEGRATED, self.seed,
                          {self.agency: learning.score_agency(integrated, prediction, rows=range(integrated.real_nodes))},
                          kinds, (learning.SINGLE_NODE, learning.SINGLE_AGENCY))
        if record.partial:
            report.failures.append({'model': learning.INTEGRATED, 'seed': self.seed, 'agency': self.agency,
                                    'error': f'partial exchange in rounds {result.partial_rounds}'})
        self.node.complete_task(task_id)
        return report


def _local_score(payload):
    metrics = payload.get('metrics')
    if metrics is None:
        return None
    return {'agency': metrics, 'single_node': None, 'truth': np.empty(0), 'pred': np.empty(0)}


def load_experiment(path, overrides=None):
    config = learning.ExperimentConfig.from_file(path)
    if overrides:
        config = config.with_overrides(**overrides)
    if not config.dataset_dir:
        raise ConfigError('experiment config needs dataset_dir')
    return config, load_dataset(config.dataset_dir)


def run_experiment(config, dataset):
    factory = None
    if config.needs_protocol:
        factory = encrypted_exchanger_factory(config.base_port)
    return learning.run_experiment(config, dataset, factory)


def merge_reports(reports, into=None):
    """Concatenate per-agency reports; rows keep a stable (model, agency, scope, metric, seed) order"""
    merged = into or learning.ExperimentReport(header={})
    for report in reports:
        if not merged.header:
            merged.header = {key: value for key, value in report.header.items() if key != 'agency'}
        merged.rows.extend(report.rows)
        merged.failures.extend(report.failures)
    merged.rows.sort(key=lambda row: (row.model, row.agency, row.scope, row.metric, row.seed))
    return merged


def report_frame(report):
    return pd.DataFrame([row.to_dict() for row in report.rows], columns=REPORT_COLUMNS)


def write_report(report, output_dir):
    """report.csv plus a report.json mirror; identical reports give identical bytes"""
    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f'cannot create report directory {output_dir}: {exc}') from exc
    csv_path = output_dir / 'report.csv'
    json_path = output_dir / 'report.json'
    report_frame(report).to_csv(csv_path, index=False, float_format='%.17g', lineterminator='\n')
    json_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2, allow_nan=True) + '\n',
                         encoding='utf-8')
    logger.info('Wrote %d report rows to %s', len(report.rows), output_dir)
    return csv_path, json_path


def read_report(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
        rows = [learning.MetricRow(**row) for row in data['rows']]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f'cannot read report {path}: {exc}') from exc
    return learning.ExperimentReport(header=data.get('header', {}), rows=rows, failures=data.get('failures', []))


def summary_table(report):
    """
    Mean over seeds per (agency, scope, metric) with one column per model.

    Integrated cells that beat the local model are marked with ``*``.
    """
    frame = report_frame(report)
    if frame.empty:
        return 'no results'
    frame = frame.dropna(subset=['value'])
    table = frame.pivot_table(index=['agency', 'scope', 'metric'], columns='model', values='value', aggfunc='mean')
    models = [m for m in learning.MODEL_KINDS if m in table.columns]
    lines = [' | '.join(['agency', 'scope', 'metric'] + models)]
    for (agency, scope, metric), row in table.iterrows():
        cells = []
        for model in models:
            value = row.get(model)
            value = None if pd.isna(value) else float(value)
            text = format_metric(metric, value)
            if model == learning.INTEGRATED and better(metric, value, _value(row, learning.LOCAL)):
                text += '*'
            cells.append(text)
        lines.append(' | '.join([str(agency), scope, metric] + cells))
    if report.failures:
        lines.append(f'{len(report.failures)} failure(s):')
        lines.extend(f'  {f["model"]} seed {f["seed"]}: {f["error"]}' for f in report.failures)
    return '\n'.join(lines)


def _value(row, model):
    value = row.get(model)
    return None if value is None or pd.isna(value) else float(value)


def render_csv(report):
    return report_frame(report).to_csv(index=False, float_format='%.17g', lineterminator='\n')


def parse_seeds(text):
    """'0..4' or '0,2,5' -> tuple of ints"""
    if text is None:
        return None
    try:
        if '..' in text:
            start, stop = text.split('..')
            return tuple(range(int(start), int(stop) + 1))
        return tuple(int(part) for part in text.split(',') if part.strip())
    except ValueError as exc:
        raise ConfigError(f'seeds must look like 0..4 or 0,1,2, got {text!r}') from exc


def parse_models(text):
    if text is None:
        return None
    models = tuple(part.strip() for part in text.split(',') if part.strip())
    unknown = set(models) - set(learning.MODEL_KINDS)
    if unknown or not models:
        raise ConfigError(f'models must be chosen from {learning.MODEL_KINDS}')
    return models


def address_of(node):
    return wire.format_address(node.address)


def default_timeout():
    return settings.CNL['TIMEOUT_SECS']
