"""
Django settings for the cnlNet project.

The project hosts one application (``core``) implementing cooperative network
learning: agency node services, encrypted embedding exchange and the experiment
harness. Everything runs through management commands; the only web surface is
the Django admin over recorded experiment runs.
"""

from pathlib import Path
import os
from dotenv import load_dotenv
import dj_database_url

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Only used by Django internals; nothing here is signed for users.
SECRET_KEY = os.getenv('SECRET_KEY', 'cnl-local-insecure-key')

DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'

ALLOWED_HOSTS = os.getenv('ALLOWED_HOSTS', 'localhost').split(',')


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'core',  # Cooperative network learning
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'cnlNet.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'cnlNet.wsgi.application'


# Database
# Experiment runs are persisted here when `run --record` is used.

DATABASES = {
    'default': dj_database_url.parse(
        os.getenv('DATABASE_URL', f"sqlite:///{BASE_DIR / 'db.sqlite3'}")
    )
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

TIME_ZONE = 'UTC'

USE_TZ = True


# Static files (admin assets only)

STATIC_URL = '/static/'
STATIC_ROOT = BASE_DIR / 'staticfiles'


# Redis Configuration (for Celery)
REDIS_URL = os.getenv('REDIS_URL', 'redis://localhost:6379/0')

# Celery Configuration
# Jobs run eagerly on the calling worker thread unless a broker is deployed,
# so the single-process cluster simulator needs no Redis.
CELERY_BROKER_URL = os.getenv('CELERY_BROKER_URL', REDIS_URL)
CELERY_RESULT_BACKEND = os.getenv('CELERY_RESULT_BACKEND', REDIS_URL)
CELERY_TASK_ALWAYS_EAGER = os.getenv('CELERY_TASK_ALWAYS_EAGER', 'True').lower() == 'true'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = 'UTC'


def _optional_int(name):
    value = os.getenv(name)
    return int(value) if value not in (None, '') else None


# Cooperative network node service configuration
CNL = {
    'TIMEOUT_SECS': float(os.getenv('CNL_TIMEOUT_SECS', '30')),
    'HE_COUNT': _optional_int('CNL_HE_COUNT'),
    'KEY_BITS': int(os.getenv('CNL_KEY_BITS', '2048')),
    # Tiny keys and seeded primes are only accepted in test mode
    'TEST_MODE': os.getenv('CNL_TEST_MODE', 'False').lower() == 'true',
    'POLL_INITIAL_SECS': 0.1,
    'POLL_MAX_SECS': 3.2,
    'SEND_RETRIES': 3,
    'GLOBAL_EPOCHS_PER_ROUND': 10,
    'SLOW_TESTS': os.getenv('CNL_SLOW_TESTS', 'False').lower() == 'true',
}


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'core': {
            'handlers': ['console'],
            'level': os.getenv('CNL_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
