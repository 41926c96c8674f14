import logging
from pathlib import Path

import numpy as np

from radu.formats import load_checkpoint, write_pfm, write_rten
from radu.geometry import distance_map_to_zdepth
from radu.network import forward

from ._common import RaduCommand, existing_dir, load_samples

logger = logging.getLogger('radu')


class Command(RaduCommand):
    help = 'Записывает карты расстояний, восстановленные сетью, для сплита датасета'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', type=existing_dir, required=True)
        parser.add_argument('--dataset', type=existing_dir, required=True)
        parser.add_argument('--out', required=True)
        parser.add_argument('--split', default='test')
        parser.add_argument('--zdepth', action='store_true', help='Дополнительно записать z-глубину')
        parser.add_argument('--latent', action='store_true', help='Записать латентные облака слоёв RADU')
        parser.add_argument('--seed', type=int, default=0)

    def run(self, checkpoint, dataset, out, split, zdepth, latent, seed, **options):
        params = load_checkpoint(checkpoint)[0].detached()
        samples = load_samples(dataset, split, seed)
        for sample in samples:
            result = forward(params, sample)
            distance = result.d_out.data.astype(np.float32)
            sample_dir = Path(out) / split / sample.sample_id
            write_pfm(sample_dir / 'distance.pfm', distance)
            write_rten(sample_dir / 'distance.rten', distance)
            if zdepth:
                write_pfm(sample_dir / 'zdepth.pfm', distance_map_to_zdepth(distance, sample.intrinsics))
            if latent:
                for k, cloud in enumerate(result.latent_clouds):
                    # x, y, z, расстояние вдоль луча
                    points = np.concatenate([cloud.positions, cloud.distance.data[:, None]], axis=1)
                    write_rten(sample_dir / f'latent_{k}.rten', points.astype(np.float32))
        logger.info(f"Предсказания для {len(samples)} сэмплов записаны в {out}/{split}")
        self.stdout.write(f"Записано {len(samples)} карт в {out}")
