import csv
import logging
from pathlib import Path

import numpy as np
from django.core.management.base import CommandError

from radu.formats import load_checkpoint, read_pfm, write_pfm
from radu.network import forward, mae

from ._common import RaduCommand, existing_dir, load_samples

logger = logging.getLogger('radu')

REPORT_COLUMNS = ('split', 'samples', 'mae_m', 'baseline_mae_m', 'relative_error')


class Command(RaduCommand):
    help = 'Считает MAE сети и базового ToF по сплитам датасета'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', type=existing_dir, help='Чекпоинт сети')
        parser.add_argument('--dataset', type=existing_dir, required=True)
        parser.add_argument('--splits', nargs='+', default=['test'])
        parser.add_argument('--predictions', type=existing_dir,
                            help='Готовые предсказания <dir>/<split>/<id>/distance.pfm вместо прогона сети')
        parser.add_argument('--report', required=True, help='CSV с итоговыми метриками')
        parser.add_argument('--maps', help='Каталог для PFM-карт абсолютной ошибки')
        parser.add_argument('--seed', type=int, default=0)

    def run(self, checkpoint, dataset, splits, predictions, report, maps, seed, **options):
        if checkpoint is None and predictions is None:
            raise CommandError("Нужен --checkpoint или --predictions", returncode=2)
        params = load_checkpoint(checkpoint)[0].detached() if predictions is None else None

        rows = []
        for split in splits:
            model, baseline = [], []
            for sample in load_samples(dataset, split, seed):
                if not sample.mask.any():
                    logger.warning(f"Сэмпл {sample.sample_id}: пустая маска, пропущен")
                    continue
                if predictions is None:
                    pred = forward(params, sample).d_out.data.astype(np.float64)
                else:
                    pred = read_pfm(Path(predictions) / split / sample.sample_id / 'distance.pfm').astype(np.float64)
                model.append(mae(pred, sample.gt_distance, sample.mask))
                baseline.append(mae(sample.features.init_distance, sample.gt_distance, sample.mask))
                if maps:
                    error = np.where(sample.mask, np.abs(pred - sample.gt_distance), 0.0)
                    write_pfm(Path(maps) / split / sample.sample_id / 'error.pfm', error)
            rows.append(self._row(split, model, baseline))
            logger.info(f"Сплит {split}: {rows[-1]}")

        report = Path(report)
        report.parent.mkdir(parents=True, exist_ok=True)
        with report.open('w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        self.stdout.write(f"Отчёт записан: {report}")

    @staticmethod
    def _row(split, model, baseline) -> dict:
        if not model:
            logger.warning(f"Сплит {split}: нет сэмплов для оценки")
            return {'split': split, 'samples': 0, 'mae_m': '', 'baseline_mae_m': '', 'relative_error': ''}
        model_mae, baseline_mae = float(np.mean(model)), float(np.mean(baseline))
        relative = model_mae / baseline_mae if baseline_mae > 0 else float('nan')
        return {'split': split, 'samples': len(model), 'mae_m': model_mae, 'baseline_mae_m': baseline_mae,
                'relative_error': relative}
