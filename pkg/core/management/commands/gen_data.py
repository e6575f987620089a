from core.datasets import RECIPES, build_recipe, write_dataset

from ._base import CNLCommand


class Command(CNLCommand):
    help = 'Generate a synthetic dataset directory (edges, features, labels, series, partition)'

    def add_arguments(self, parser):
        parser.add_argument('--recipe', choices=sorted(RECIPES), default='er_sis')
        parser.add_argument('--out', required=True, help='Output dataset directory')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--nodes', type=int, help='Node count (contagion recipes)')
        parser.add_argument('--edges', type=int, help='ER edge count')
        parser.add_argument('--attach', type=int, help='BA edges per new node')
        parser.add_argument('--agencies', type=int, help='Number of agencies')
        parser.add_argument('--steps', type=int, help='Simulation steps')
        parser.add_argument('--beta', type=float, help='Infection rate')
        parser.add_argument('--mu', type=float, help='Recovery rate')

    def run(self, **options):
        params = {key: options[key] for key in ('nodes', 'edges', 'attach', 'agencies', 'steps', 'beta', 'mu')}
        dataset = build_recipe(options['recipe'], seed=options['seed'], **params)
        directory = write_dataset(options['out'], dataset)
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {options['recipe']} dataset ({dataset.graph.node_count} nodes, "
            f"{dataset.graph.edge_count} edges, {dataset.partition.agency_count} agencies) to {directory}"))
