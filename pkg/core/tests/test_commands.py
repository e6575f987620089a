import json
import re
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from core.management.commands._base import EXIT_CONFIG, EXIT_PARTIAL, EXIT_RUNTIME, CNLCommand
from core.models import ExperimentRun

from .support import TEST_CNL

CLASSIFY_TASK = {'task_id': 'cmd', 'task_kind': 'node_classification', 'dim': 4, 'epochs': 5, 'key_bits': 512}


def quiet(*args, **options):
    out = StringIO()
    call_command(*args, stdout=out, stderr=StringIO(), **options)
    return out.getvalue()


class WorkspaceMixin:

    def setUp(self):
        super().setUp()
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)

    def toy_dataset(self, agencies=3):
        quiet('gen_data', recipe='toy_classify', out=str(self.root / 'data'), agencies=agencies, seed=0)

    def write_json(self, name, data):
        path = self.root / name
        path.write_text(json.dumps(data), encoding='utf-8')
        return str(path)


class GenDataTests(WorkspaceMixin, SimpleTestCase):

    def test_same_seed_same_bytes(self):
        for name in ('a', 'b'):
            quiet('gen_data', recipe='er_sis', out=str(self.root / name), nodes=30, edges=60, agencies=2, steps=20,
                  seed=4)
        files = sorted(p.name for p in (self.root / 'a').iterdir())
        self.assertEqual(files, ['edges.csv', 'labels.csv', 'meta.json', 'partition.json', 'series.csv'])
        for name in files:
            self.assertEqual((self.root / 'a' / name).read_bytes(), (self.root / 'b' / name).read_bytes())

    def test_features_for_classification(self):
        self.toy_dataset()
        self.assertTrue((self.root / 'data' / 'features.csv').exists())

    def test_bad_recipe_parameters(self):
        with self.assertRaises(CommandError) as ctx:
            quiet('gen_data', recipe='toy_classify', out=str(self.root / 'x'), steps=10)
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)


@override_settings(CNL=TEST_CNL)
class KeygenTests(WorkspaceMixin, SimpleTestCase):

    def test_writes_both_keys(self):
        out = quiet('keygen', identity=str(self.root / 'id.pem'), paillier=str(self.root / 'he.json'), bits=512, seed=1)
        self.assertIn('BEGIN PUBLIC KEY', out)
        public = json.loads((self.root / 'he.json').read_text())
        private = json.loads((self.root / 'he.private.json').read_text())
        self.assertEqual(set(private), {'p', 'q'})
        self.assertEqual(int(public['n'], 16), int(private['p'], 16) * int(private['q'], 16))
        self.assertEqual((self.root / 'he.private.json').stat().st_mode & 0o777, 0o600)

    def test_refuses_to_overwrite(self):
        quiet('keygen', identity=str(self.root / 'id.pem'))
        with self.assertRaises(CommandError) as ctx:
            quiet('keygen', identity=str(self.root / 'id.pem'))
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)
        quiet('keygen', identity=str(self.root / 'id.pem'), force=True)

    def test_nothing_requested(self):
        with self.assertRaises(CommandError) as ctx:
            quiet('keygen')
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)


@override_settings(CNL=TEST_CNL)
class RunCommandTests(WorkspaceMixin, TestCase):

    def experiment(self, **changes):
        self.toy_dataset()
        data = {'task': CLASSIFY_TASK, 'dataset_dir': 'data', 'models': ['centralized'], 'output_dir': 'report'}
        data.update(changes)
        return self.write_json('experiment.json', data)

    def test_centralized_run_writes_reports(self):
        out = quiet('run', config=self.experiment(), out=str(self.root / 'out'))
        self.assertIn('centralized', out)
        self.assertTrue((self.root / 'out' / 'report.csv').exists())
        table = quiet('report', path=str(self.root / 'out' / 'report.json'))
        self.assertTrue(table.startswith('agency | scope | metric | centralized'))
        csv = quiet('report', path=str(self.root / 'out' / 'report.json'), format='csv')
        self.assertTrue(csv.startswith('model,agency,scope,metric,seed,value\n'))

    def test_output_dir_from_config(self):
        quiet('run', config=self.experiment(), seeds='0..1')
        rows = json.loads((self.root / 'report' / 'report.json').read_text())['rows']
        self.assertEqual({row['seed'] for row in rows}, {0, 1})

    def test_recorded_run(self):
        out = quiet('run', config=self.experiment(), out=str(self.root / 'out'), models='local,centralized',
                    record=True)
        run_id = int(re.search(r'Recorded as run (\d+)', out).group(1))
        run = ExperimentRun.objects.get(id=run_id)
        self.assertEqual(run.status, 'done')
        self.assertEqual(run.task_id, 'cmd')
        self.assertEqual(set(run.metrics.values_list('model', flat=True)), {'local', 'centralized'})
        stored = quiet('report', run=run_id, format='csv')
        written = quiet('report', path=str(self.root / 'out' / 'report.json'), format='csv')
        self.assertEqual(sorted(stored.splitlines()), sorted(written.splitlines()))

    def test_validation_split_option(self):
        quiet('run', config=self.experiment(), out=str(self.root / 'out'), eval_split='val')
        header = json.loads((self.root / 'out' / 'report.json').read_text())['header']
        self.assertEqual(header['eval_split'], 'val')
        self.assertEqual(header['exchange'], 'encrypted')

    def test_unknown_run(self):
        with self.assertRaises(CommandError) as ctx:
            quiet('report', run=9999)
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)

    def test_config_errors(self):
        with self.assertRaises(CommandError) as ctx:
            quiet('run', config=str(self.root / 'missing.json'))
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)
        with self.assertRaises(CommandError) as ctx:
            quiet('run', config=self.experiment(), models='local,oracle')
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)

    def test_runtime_error(self):
        quiet('gen_data', recipe='er_sis', out=str(self.root / 'short'), nodes=30, edges=60, agencies=2, steps=20)
        config = self.write_json('short.json', {
            'task': {'task_id': 'short', 'dim': 4, 'epochs': 1, 'lookback': 50},
            'dataset_dir': 'short', 'models': ['local'],
        })
        with self.assertRaises(CommandError) as ctx:
            quiet('run', config=config, out=str(self.root / 'out'))
        self.assertEqual(ctx.exception.returncode, EXIT_RUNTIME)

    def test_partial_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            CNLCommand().partial(2)
        self.assertEqual(ctx.exception.returncode, EXIT_PARTIAL)


@override_settings(CNL=TEST_CNL)
class SimulateCommandTests(WorkspaceMixin, SimpleTestCase):

    def test_runs_tasks_once(self):
        self.toy_dataset(agencies=2)
        spec = self.write_json('cluster.json', {'agency_count': 2, 'dataset_dir': 'data', 'tasks': [CLASSIFY_TASK]})
        out = quiet('simulate', spec=spec, once=True, out=str(self.root / 'sim'))
        self.assertIn('2 nodes up, 1 links, 0 failed HELLOs', out)
        self.assertIn('cluster stopped', out)
        rows = json.loads((self.root / 'sim' / 'report.json').read_text())['rows']
        self.assertEqual({row['model'] for row in rows}, {'local', 'integrated'})

    def test_agency_count_mismatch(self):
        self.toy_dataset(agencies=3)
        spec = self.write_json('cluster.json', {'agency_count': 2, 'dataset_dir': 'data'})
        with self.assertRaises(CommandError) as ctx:
            quiet('simulate', spec=spec, once=True)
        self.assertEqual(ctx.exception.returncode, EXIT_CONFIG)

    def test_bare_cluster(self):
        spec = self.write_json('cluster.json', {'agency_count': 3, 'topology': 'explicit', 'edges': [[0, 1], [1, 2]]})
        out = quiet('simulate', spec=spec, once=True)
        self.assertIn('3 nodes up, 2 links', out)
