from core import harness, learning
from core.exceptions import ConfigError
from core.models import ExperimentRun

from ._base import CNLCommand


class Command(CNLCommand):
    help = 'Render a stored report as a summary table or CSV'

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument('--in', dest='path', help='report.json written by run')
        source.add_argument('--run', type=int, help='Id of a recorded run')
        parser.add_argument('--format', choices=['table', 'csv'], default='table')

    def run(self, **options):
        report = harness.read_report(options['path']) if options['path'] else self._from_database(options['run'])
        if options['format'] == 'csv':
            self.stdout.write(harness.render_csv(report), ending='')
        else:
            self.stdout.write(harness.summary_table(report))

    @staticmethod
    def _from_database(run_id):
        try:
            run = ExperimentRun.objects.get(id=run_id)
        except ExperimentRun.DoesNotExist as exc:
            raise ConfigError(f'no recorded run {run_id}') from exc
        rows = [
            learning.MetricRow(m.model, m.agency, m.scope, m.metric, m.seed,
                               float('nan') if m.value is None else m.value)
            for m in run.metrics.all()
        ]
        return learning.ExperimentReport(header=run.header, rows=rows, failures=run.failures)
