from core import harness, learning, wire
from core.datasets import load_dataset
from core.exceptions import ConfigError

from ._base import CNLCommand, wait_for_shutdown


class Command(CNLCommand):
    help = 'Start K node services on loopback and optionally run the cluster file tasks through them'

    def add_arguments(self, parser):
        parser.add_argument('--spec', required=True, help='Cluster spec JSON')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--out', help='Report directory for the tasks run on the cluster')
        parser.add_argument('--once', action='store_true', help='Stop after the tasks instead of waiting for a signal')

    def run(self, **options):
        spec = harness.ClusterSpec.from_file(options['spec'])
        dataset = None
        if spec.dataset_dir:
            dataset = load_dataset(spec.dataset_dir)
            if dataset.partition.agency_count != spec.agency_count:
                raise ConfigError(f'dataset has {dataset.partition.agency_count} agencies, '
                                  f'cluster spec asks for {spec.agency_count}')
        if spec.tasks and dataset is None:
            raise ConfigError('running tasks needs dataset_dir in the cluster spec')

        with harness.SimulatedCluster(spec, spec.links(dataset)) as cluster:
            reachable = cluster.hello_all()
            failed = sum(1 for peers in reachable.values() for ok in peers.values() if not ok)
            self.stdout.write(f'{len(cluster.nodes)} nodes up, {cluster.link_count} links, {failed} failed HELLOs')
            for agency, node in sorted(cluster.nodes.items()):
                self.stdout.write(f'  {node.node_id} {wire.format_address(node.address)}')

            report = None
            for task in spec.tasks:
                cluster.announce(task)
                runtimes = {
                    agency: harness.AgencyRuntime(node, task, spec.dataset_dir, agency, options['seed'])
                    for agency, node in cluster.nodes.items()
                }
                reports = learning.run_concurrently({agency: rt.run for agency, rt in runtimes.items()})
                report = harness.merge_reports(reports.values(), report)
            if report is not None:
                self.stdout.write(harness.summary_table(report))
                if options['out']:
                    harness.write_report(report, options['out'])
            if not options['once']:
                wait_for_shutdown()
        self.stdout.write('cluster stopped')
        if report is not None and report.partial:
            self.partial(len(report.failures))
