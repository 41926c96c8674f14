"""
Django settings for tofradu project.

Проект не обслуживает HTTP: Django используется как каркас для команд управления
(simulate, train, adapt, eval, infer, gradcheck) и тестов.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()
# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent
LOGFILE = Path(os.environ.get('RADU_LOGFILE', BASE_DIR / 'logs' / 'radu.log'))
LOGLEVEL = os.environ.get('RADU_LOGLEVEL', 'INFO').upper()

# Ключ нужен только потому, что Django без него не стартует.
SECRET_KEY = os.environ.get('SECRET_KEY', 'tofradu-local-only')

DEBUG = False
ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'radu.apps.RaduConfig',
]

DATABASES = {}

USE_TZ = True
TIME_ZONE = 'UTC'

# --- Данные ---
DEFAULT_SIZE = os.environ.get('RADU_SIZE', '64x64')

# --- Модель сенсора ---
# Порядок частот задаёт порядок признаков: f_1 (высокая, разворачивается), f_2, f_3.
MODULATION_FREQUENCIES = tuple(
    float(f) for f in os.environ.get('TOF_FREQUENCIES', '70e6,20e6,50e6').split(',')
)
NOISE_GAIN = float(os.environ.get('TOF_NOISE_GAIN', '0.33'))
NOISE_INTERCEPT = float(os.environ.get('TOF_NOISE_INTERCEPT', '-18.4'))
AMPLITUDE_FLOOR = float(os.environ.get('TOF_AMPLITUDE_FLOOR', '1e-6'))
