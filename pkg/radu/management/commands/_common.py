import argparse
import logging
from pathlib import Path
from typing import Tuple

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from radu.datagen import load_split
from radu.exceptions import RaduError
from radu.tof import ModulationConfig, UnwrapPolicy

logger = logging.getLogger('radu')


def setup_logging(logfile_path: Path, level: str = 'INFO'):
    """Настраивает логирование пакета radu в консоль и в файл."""
    logfile_path = Path(logfile_path)
    log_dir = logfile_path.parent
    log_dir.mkdir(parents=True, exist_ok=True)

    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

    # Очищаем предыдущие обработчики, чтобы избежать дублирования логов
    for handler in logger.handlers:
        handler.close()
    logger.handlers.clear()
    logger.setLevel(level)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    file_handler = logging.FileHandler(logfile_path, encoding='UTF-8')
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    logger.debug(f"Логирование включено. Вывод в консоль и в файл: {logfile_path}")


def parse_size(value: str) -> Tuple[int, int]:
    """'HxW' -> (H, W)."""
    try:
        height, width = (int(part) for part in value.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"размер должен иметь вид HxW, получено {value!r}") from None
    if height < 1 or width < 1:
        raise argparse.ArgumentTypeError(f"размер должен быть положительным: {value!r}")
    return height, width


def existing_dir(value: str) -> Path:
    path = Path(value)
    if not path.is_dir():
        raise argparse.ArgumentTypeError(f"каталог не найден: {value}")
    return path


def modulation_from_settings() -> ModulationConfig:
    return ModulationConfig.uniform(settings.MODULATION_FREQUENCIES)


class RaduCommand(BaseCommand):
    """
    Общая обвязка команд: логирование и перевод ошибок в коды выхода
    (1 ошибка выполнения, 2 ошибка использования, 3 проверка не пройдена).
    """

    def handle(self, *args, **options):
        setup_logging(settings.LOGFILE, settings.LOGLEVEL)
        name = self.__module__.rsplit('.', 1)[-1]
        logger.info(f"Команда {name} запущена")
        try:
            self.run(**options)
        except CommandError:
            raise
        except (RaduError, OSError) as e:
            logger.error(f"Команда {name} прервана: {e}")
            raise CommandError(str(e), returncode=1) from e
        except Exception as e:
            logger.critical(f"Непредвиденная ошибка в команде {name}: {e}", exc_info=True)
            raise CommandError(str(e), returncode=1) from e
        logger.info(f"Команда {name} завершена")

    def run(self, **options):
        raise NotImplementedError


def load_samples(dataset_dir, split: str, seed: int, noisy: bool = True, online_noise: bool = False):
    return load_split(dataset_dir, split, seed=seed, noisy=noisy, policy=UnwrapPolicy(),
                      amplitude_floor=settings.AMPLITUDE_FLOOR, online_noise=online_noise)
