"""
Django settings for the normal_form project.

Only the pieces a command-line verification tool needs are configured:
installed apps, logging and the numerical defaults read from the
environment (or a .env file) through python-decouple.
"""

from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config('SECRET_KEY', default='pnf-insecure-local-key')

DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    # Third-party apps
    'rest_framework',
    # Local apps
    'core',
]

# No database is used; reports are written to files.
DATABASES = {}

USE_TZ = True

TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Numerical defaults
# Used whenever a run configuration leaves the value out.

PNF_THREADS = config('PNF_THREADS', default=1, cast=int)

PNF_DEFAULT_STEPS = config('PNF_DEFAULT_STEPS', default=64, cast=int)

PNF_DEFAULT_QUADRATURE = config('PNF_DEFAULT_QUADRATURE', default=16, cast=int)

PNF_FD_STEP = config('PNF_FD_STEP', default=1e-5, cast=float)

PNF_CONFIG_DIR = config('PNF_CONFIG_DIR', default=str(BASE_DIR / 'core' / 'configs'), cast=Path)


# Logging
# https://docs.djangoproject.com/en/5.2/topics/logging/

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
            'level': config('PNF_LOG_LEVEL', default='WARNING'),
            'propagate': False,
        },
    },
}
