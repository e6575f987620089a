import logging

from celery import shared_task

from . import learning
from .datasets import load_dataset
from .node import TaskConfig

logger = logging.getLogger(__name__)


@shared_task
def train_local_job(dataset_dir, agency, task_data, seed=0, lr_grid=()):
    """Background local training for one agency; returns its embeddings and test metrics as plain lists"""
    task = TaskConfig.from_dict(task_data)
    dataset = load_dataset(dataset_dir)
    plan = learning.plan_splits(dataset, task, seed)
    problem = learning.build_problem(dataset, plan, task, dataset.partition.members(agency))
    _, record, prediction = learning.train_local(problem, task, seed, tuple(lr_grid))
    score = learning.score_agency(problem, prediction)
    logger.info('Local training for agency %s (seed %s) finished', agency, seed)
    return {
        'agency': agency,
        'seed': seed,
        'embeddings': {name: values.tolist() for name, values in record.local.items()},
        'agency_vector': record.agency.tolist(),
        'metrics': score['agency'] if score else None,
    }


@shared_task
def run_experiment_job(config_path, output_dir=None, record=False, overrides=None):
    """Run a whole experiment, write its report and optionally store it in the database"""
    from .harness import load_experiment, run_experiment, write_report
    from .models import ExperimentRun

    config, dataset = load_experiment(config_path, overrides)
    output_dir = output_dir or config.output_dir
    run = None
    if record:
        run = ExperimentRun.objects.create(
            task_id=config.task.task_id, task_kind=config.task.task_kind,
            dataset_dir=str(config.dataset_dir or ''), exchange=config.exchange, output_dir=str(output_dir))
    try:
        report = run_experiment(config, dataset)
    except Exception as exc:
        if run is not None:
            run.fail(exc)
        raise
    csv_path, json_path = write_report(report, output_dir)
    if run is not None:
        run.finish(report)
    return {
        'run_id': run.id if run else None,
        'csv': str(csv_path),
        'json': str(json_path),
        'partial': report.partial,
        'rows': len(report.rows),
    }
