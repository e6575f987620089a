from core import harness
from core.tasks import run_experiment_job

from ._base import CNLCommand


class Command(CNLCommand):
    help = 'Train and evaluate local, integrated and centralized models; writes report.csv and report.json'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Experiment config JSON')
        parser.add_argument('--models', help='Comma separated subset of local,integrated,centralized')
        parser.add_argument('--seeds', help='Seed range like 0..4 or list like 0,1,2')
        parser.add_argument('--exchange', choices=['plaintext', 'encrypted'], help='Integrated exchange (default: encrypted)')
        parser.add_argument('--eval-split', choices=['val', 'test'], help='Split the scores are taken on (default: test)')
        parser.add_argument('--out', help='Report directory (default: output_dir from the config)')
        parser.add_argument('--record', action='store_true', help='Also store the run in the database')

    def run(self, **options):
        overrides = {
            'models': harness.parse_models(options['models']),
            'seeds': harness.parse_seeds(options['seeds']),
            'exchange': options['exchange'],
            'eval_split': options['eval_split'],
        }
        result = run_experiment_job.delay(options['config'], options['out'], options['record'], overrides).get()
        report = harness.read_report(result['json'])
        self.stdout.write(harness.summary_table(report))
        self.stdout.write(f"Wrote {result['rows']} rows to {result['csv']}")
        if result['run_id'] is not None:
            self.stdout.write(f"Recorded as run {result['run_id']}")
        if result['partial']:
            self.partial(len(report.failures))
