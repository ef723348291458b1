import dataclasses
import logging

from django.conf import settings
from django.db import DatabaseError

from cbam.models import AblationResult, LogEntry

logger = logging.getLogger("cbam")

_LEVELS = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARN": logging.WARNING,
    "ERROR": logging.ERROR,
}


def log_event(action, details="", level="INFO"):
    """
    Emit one run event; details should be a string (JSON if structured).
    The event always reaches the "cbam" logger and is stored as a LogEntry
    when CBAM_PERSIST_LOGS is on. Returns the entry, or None if not stored.
    """
    logger.log(_LEVELS.get(level, logging.INFO), "%s %s", action, details)
    if not settings.CBAM_PERSIST_LOGS:
        return None
    try:
        return LogEntry.objects.create(action=action, details=details, level=level)
    except DatabaseError as exc:
        # A missing table or locked sqlite file must not abort a training run.
        logger.warning("LogEntry not stored for %s: %s", action, exc)
        return None


def record_ablation_rows(rows, report_path):
    """
    Store ablation report rows as AblationResult entries under the same rules as log_event.
    Returns the number of rows stored.
    """
    if not settings.CBAM_PERSIST_LOGS or not rows:
        return 0
    try:
        AblationResult.objects.bulk_create(
            [AblationResult(report_path=str(report_path), **dataclasses.asdict(row)) for row in rows])
    except DatabaseError as exc:
        logger.warning("AblationResult rows not stored for %s: %s", report_path, exc)
        return 0
    return len(rows)
