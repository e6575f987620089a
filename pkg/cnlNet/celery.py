import os
from celery import Celery

# Set the default Django settings module for the 'celery' program.
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'cnlNet.settings')

app = Celery('cnlNet')

# Configuration comes from Django settings, CELERY_ prefixed keys only.
app.config_from_object('django.conf:settings', namespace='CELERY')

# Picks up core/tasks.py (local and integrated training jobs).
app.autodiscover_tasks()
