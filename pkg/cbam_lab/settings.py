"""
Django settings for the cbam_lab project.

There is no web surface: the project exists to host the `cbam` app, its management
commands (the CLI) and the small database that keeps run logs and ablation results.
Numerical defaults live in the CBAM_* block below and are read through django.conf.settings.
"""
import os
from pathlib import Path

import dj_database_url

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: nothing here is served, but Django still wants a key.
SECRET_KEY = os.environ.get(
    "DJANGO_SECRET_KEY",
    "django-insecure-cbam-lab-local-only-2f6b1d0c9e8a7f54",
)

# NaN/Inf checks on every tensor op are only active when DEBUG is on.
DEBUG = os.environ.get("CBAM_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'cbam',
]


# Database
# Defaults to a local SQLite file; set DATABASE_URL to point somewhere else.

DATABASES = {
    'default': dj_database_url.config(
        default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}",
        conn_max_age=0,
    )
}


# Logging
# log_event() writes to the "cbam" logger and, when CBAM_PERSIST_LOGS is on, a LogEntry row.

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "[{asctime}] {levelname} {name} {message}", "style": "{"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "cbam": {
            "handlers": ["console"],
            "level": os.environ.get("CBAM_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# --- CBAM experiment defaults ------------------------------------------------

CBAM_PERSIST_LOGS = os.environ.get("CBAM_PERSIST_LOGS", "1") == "1"

# Raw value; parsed (and validated) by cbam.services.training.effective_seed.
CBAM_SEED = os.environ.get("CBAM_SEED")

CBAM_REDUCTION_RATIO = 16

CBAM_TRAIN_DEFAULTS = {
    "epochs": 30,
    "batch_size": 32,
    "lr0": 0.1,
    "lr_drop_every": 10,
    "lr_drop_factor": 0.1,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "seed": 0,
}

CBAM_DEFAULT_ARCH = {
    "in_channels": 3,
    "stem_channels": 16,
    "blocks": [
        {"in_channels": 16, "out_channels": 16, "stride": 1},
        {"in_channels": 16, "out_channels": 32, "stride": 2},
        {"in_channels": 32, "out_channels": 32, "stride": 1},
    ],
    "num_classes": 10,
}

CBAM_SYNTHETIC_DEFAULTS = {
    "num_samples": 256,
    "num_classes": 4,
    "channels": 3,
    "height": 12,
    "width": 12,
    "patch_size": 3,
    "patch_value": 2.0,
    "noise_std": 0.5,
    "seed": 0,
}

CBAM_VAL_FRACTION = 0.2

CBAM_GRADCHECK_TOL = 1e-4
CBAM_GRADCHECK_EPS = 1e-5
CBAM_GRADCHECK_TRIALS = 20

# Worker threads for run_ablation; 1 keeps runs in request order on one thread.
CBAM_ABLATION_JOBS = 1
