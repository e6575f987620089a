# Generated by Django 5.2 on 2026-10-17 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('task_id', models.CharField(max_length=100)),
                ('task_kind', models.CharField(max_length=40)),
                ('dataset_dir', models.CharField(blank=True, max_length=500)),
                ('exchange', models.CharField(choices=[('plaintext', 'Plaintext'), ('encrypted', 'Encrypted')], default='plaintext', max_length=20)),
                ('output_dir', models.CharField(max_length=500)),
                ('header', models.JSONField(default=dict)),
                ('failures', models.JSONField(default=list)),
                ('status', models.CharField(choices=[('running', 'Running'), ('done', 'Done'), ('partial', 'Partial'), ('failed', 'Failed')], default='running', max_length=20)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
        migrations.CreateModel(
            name='MetricRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('model', models.CharField(max_length=20)),
                ('agency', models.CharField(max_length=20)),
                ('scope', models.CharField(max_length=20)),
                ('metric', models.CharField(max_length=10)),
                ('seed', models.IntegerField()),
                ('value', models.FloatField(blank=True, null=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='core.experimentrun')),
            ],
            options={
                'ordering': ['model', 'agency', 'scope', 'metric', 'seed'],
            },
        ),
    ]
