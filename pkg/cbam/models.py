# cbam/models.py
from django.db import models
from django.utils import timezone


class LogEntry(models.Model):
    """
    Structured run log entries (data generation, epochs, ablation rows, audits).
    """
    LEVEL_CHOICES = [
        ("INFO", "INFO"),
        ("WARN", "WARN"),
        ("ERROR", "ERROR"),
        ("DEBUG", "DEBUG"),
    ]
    id = models.AutoField(primary_key=True)
    timestamp = models.DateTimeField(default=timezone.now)
    level = models.CharField(max_length=10, choices=LEVEL_CHOICES, default="INFO")
    action = models.CharField(max_length=200)       # e.g., "Train.EpochCompleted"
    details = models.TextField(blank=True)          # human-readable details or JSON string

    class Meta:
        ordering = ["-timestamp"]

    def __str__(self):
        return f"[{self.timestamp.isoformat()}] {self.level} {self.action}"


class AblationResult(models.Model):
    """
    One row of an ablation report, kept so past runs can be queried from the shell.
    Mirrors the CSV columns; report_path points at the CSV the row was written to.
    """
    id = models.AutoField(primary_key=True)
    created_at = models.DateTimeField(default=timezone.now)
    variant = models.CharField(max_length=200)
    params = models.BigIntegerField()
    final_train_loss = models.FloatField()
    val_top1_err = models.FloatField()
    val_top5_err = models.FloatField(default=0.0)
    seconds = models.FloatField(default=0.0)
    seed = models.BigIntegerField()
    report_path = models.CharField(max_length=500, blank=True, default="")

    class Meta:
        ordering = ["created_at", "id"]

    def __str__(self):
        return f"{self.variant} seed={self.seed} top1={self.val_top1_err:.2f}%"

    def to_row(self):
        return {
            "variant": self.variant,
            "params": self.params,
            "final_train_loss": self.final_train_loss,
            "val_top1_err": self.val_top1_err,
            "seconds": self.seconds,
            "seed": self.seed,
            "val_top5_err": self.val_top5_err,
        }
