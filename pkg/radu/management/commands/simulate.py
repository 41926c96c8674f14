import dataclasses
import logging

from django.conf import settings

from radu.datagen import DomainParams, generate_dataset
from radu.geometry import CameraIntrinsics
from radu.tof import UnwrapPolicy

from ._common import RaduCommand, modulation_from_settings, parse_size

logger = logging.getLogger('radu')


class Command(RaduCommand):
    help = 'Генерирует синтетический датасет ToF со сценами с двумя путями отражения'

    def add_arguments(self, parser):
        parser.add_argument('--scenes', type=int, required=True, help='Число сцен')
        parser.add_argument('--out', required=True, help='Каталог датасета')
        parser.add_argument('--domain', choices=('source', 'target'), default='source')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--size', type=parse_size, default=parse_size(settings.DEFAULT_SIZE), help='HxW')
        parser.add_argument('--fov', type=float, default=60.0, help='Горизонтальный угол обзора, градусы')

    def run(self, scenes, out, domain, seed, size, fov, **options):
        params = DomainParams.by_label(domain)
        if domain == 'source':
            params = dataclasses.replace(params, noise_gain=settings.NOISE_GAIN,
                                         noise_intercept=settings.NOISE_INTERCEPT)
        height, width = size
        intrinsics = CameraIntrinsics.from_fov(width, height, fov)
        manifest = generate_dataset(scenes, params, intrinsics, out, seed, modulation_from_settings(),
                                    UnwrapPolicy(), settings.AMPLITUDE_FLOOR)
        self.stdout.write(f"Сгенерировано {scenes} сцен в {out}: {manifest['counts']}")
