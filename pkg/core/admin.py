from django.contrib import admin
from .models import ExperimentRun, MetricRecord


class MetricRecordInline(admin.TabularInline):
    model = MetricRecord
    extra = 0
    can_delete = False
    readonly_fields = ('model', 'agency', 'scope', 'metric', 'seed', 'value')


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('task_id', 'task_kind', 'exchange', 'status', 'failure_count', 'started_at', 'finished_at')
    list_filter = ('status', 'exchange', 'task_kind')
    search_fields = ('task_id', 'dataset_dir', 'output_dir')
    readonly_fields = ('started_at', 'finished_at')
    inlines = [MetricRecordInline]

    fieldsets = (
        ('Run', {
            'fields': ('task_id', 'task_kind', 'exchange', 'status')
        }),
        ('Files', {
            'fields': ('dataset_dir', 'output_dir')
        }),
        ('Report', {
            'fields': ('header', 'failures'),
            'classes': ('collapse',)
        }),
        ('Timing', {
            'fields': ('started_at', 'finished_at')
        })
    )

    def failure_count(self, obj):
        return len(obj.failures)
    failure_count.short_description = 'Failures'


@admin.register(MetricRecord)
class MetricRecordAdmin(admin.ModelAdmin):
    list_display = ('run', 'model', 'agency', 'scope', 'metric', 'seed', 'value')
    list_filter = ('model', 'scope', 'metric')
    search_fields = ('run__task_id', 'agency')

    def has_add_permission(self, request):
        return False  # rows come from finished reports
