import math

from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """One recorded harness run and where its report files live"""

    STATUS_CHOICES = [
        ('running', 'Running'),
        ('done', 'Done'),
        ('partial', 'Partial'),
        ('failed', 'Failed'),
    ]

    EXCHANGE_CHOICES = [
        ('plaintext', 'Plaintext'),
        ('encrypted', 'Encrypted'),
    ]

    task_id = models.CharField(max_length=100)
    task_kind = models.CharField(max_length=40)
    dataset_dir = models.CharField(max_length=500, blank=True)
    exchange = models.CharField(max_length=20, choices=EXCHANGE_CHOICES, default='encrypted')
    output_dir = models.CharField(max_length=500)
    header = models.JSONField(default=dict)
    failures = models.JSONField(default=list)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='running')

    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.task_id} ({self.get_status_display()})"

    def finish(self, report):
        """Store the outcome and every metric row of a finished report"""
        self.header = report.header
        self.failures = report.failures
        self.status = 'partial' if report.partial else 'done'
        self.finished_at = timezone.now()
        self.save()
        MetricRecord.objects.bulk_create([
            MetricRecord(run=self, model=row.model, agency=row.agency, scope=row.scope,
                         metric=row.metric, seed=row.seed, value=_defined(row.value))
            for row in report.rows
        ])

    def fail(self, error):
        self.failures = self.failures + [{'model': None, 'seed': None, 'agency': None, 'error': str(error)}]
        self.status = 'failed'
        self.finished_at = timezone.now()
        self.save()


class MetricRecord(models.Model):
    """A single report row; value is null when the metric is undefined"""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name='metrics')
    model = models.CharField(max_length=20)
    agency = models.CharField(max_length=20)
    scope = models.CharField(max_length=20)
    metric = models.CharField(max_length=10)
    seed = models.IntegerField()
    value = models.FloatField(null=True, blank=True)

    class Meta:
        ordering = ['model', 'agency', 'scope', 'metric', 'seed']

    def __str__(self):
        return f"{self.model}/{self.agency}/{self.scope} {self.metric}={self.value}"


def _defined(value):
    return None if value is None or math.isnan(value) else float(value)
