from django.apps import AppConfig


class CbamConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'cbam'
    verbose_name = "CBAM attention lab"
