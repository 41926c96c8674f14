from django.apps import AppConfig


class RaduConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'radu'
    verbose_name = 'Шумоподавление ToF (RADU)'
