import json
import logging
import threading
from pathlib import Path

from core import harness, wire
from core.exceptions import CNLError, ConfigError
from core.node import CooperativeNode, PeerConfig, TaskConfig

from ._base import CNLCommand, wait_for_shutdown

logger = logging.getLogger(__name__)


class Command(CNLCommand):
    help = 'Run one cooperative network node service until interrupted'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Peer config JSON')
        parser.add_argument('--task', help='Task config JSON this node takes part in')
        parser.add_argument('--agency', type=int, help='Agency index of this node in the dataset partition')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--initiate', action='store_true', help='Announce the task to the network')
        parser.add_argument('--out', help='Directory for this agency\'s report')

    def run(self, **options):
        config = PeerConfig.from_file(options['config'])
        task = self._load_task(options['task']) if options['task'] else None
        if task is not None and options['agency'] is not None and not config.data_dir:
            raise ConfigError('running a task needs data_dir in the peer config')

        node = CooperativeNode(config).start()
        self.stdout.write(f'{node.node_id} listening on {wire.format_address(node.address)}')
        stop_event = threading.Event()
        try:
            if task is not None:
                worker = threading.Thread(target=self._take_part, args=(node, task, config, options, stop_event),
                                          daemon=True)
                worker.start()
            wait_for_shutdown(stop_event)
        finally:
            node.stop()
        self.stdout.write(f'{node.node_id} stopped')

    def _take_part(self, node, task, config, options, stop_event):
        try:
            node.hello_neighbors()
            if options['initiate']:
                node.announce_task(task)
            if options['agency'] is None:
                return
            runtime = harness.AgencyRuntime(node, task, config.data_dir, options['agency'], options['seed'])
            report = runtime.run()
            if options['out']:
                harness.write_report(report, options['out'])
            self.stdout.write(harness.summary_table(report))
        except CNLError as exc:
            logger.error('Node %s failed task %s: %s', node.node_id, task.task_id, exc)
            self.stderr.write(f'{type(exc).__name__}: {exc}')
        finally:
            if options['agency'] is not None:
                stop_event.set()

    @staticmethod
    def _load_task(path):
        path = Path(path)
        try:
            return TaskConfig.from_dict(json.loads(path.read_text(encoding='utf-8')))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f'cannot read task config {path}: {exc}') from exc
