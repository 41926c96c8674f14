import logging

from radu.augment import AugmentConfig
from radu.formats import load_checkpoint, save_checkpoint
from radu.network import evaluate
from radu.training import DRAW_MODES, AdaptConfig, MetricsLog, adapt

from ._common import RaduCommand, existing_dir, load_samples

logger = logging.getLogger('radu')


class Command(RaduCommand):
    help = 'Адаптирует обученную сеть к целевому домену циклическим самообучением на псевдо-метках'

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', type=existing_dir, required=True, help='Обученная на исходном домене сеть')
        parser.add_argument('--source', type=existing_dir, required=True, help='Размеченный исходный датасет')
        parser.add_argument('--target', type=existing_dir, required=True, help='Целевой датасет, gt не используется')
        parser.add_argument('--out', required=True, help='Каталог адаптированного чекпоинта')
        parser.add_argument('--p', type=float, default=0.5, help='Вероятность взять целевой сэмпл')
        parser.add_argument('--n-cycle', type=int, default=20, help='Период обновления псевдо-меток, эпох')
        parser.add_argument('--lr', type=float, default=5e-5)
        parser.add_argument('--epochs', type=int, default=100)
        parser.add_argument('--batch-size', type=int, default=4)
        parser.add_argument('--draw', choices=DRAW_MODES, default='sample')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--report', help='CSV с метриками по эпохам')
        parser.add_argument('--no-augment', action='store_true')

    def run(self, checkpoint, source, target, out, p, n_cycle, lr, epochs, batch_size, draw, seed, report,
            no_augment, **options):
        config = AdaptConfig(p=p, n_cycle=n_cycle, lr=lr, epochs=epochs, batch_size=batch_size, draw=draw, seed=seed,
                             augment=AugmentConfig.disabled() if no_augment else AugmentConfig())
        params, _, manifest = load_checkpoint(checkpoint)

        source_train = load_samples(source, 'train', seed, online_noise=True)
        # gt целевого train не передаётся в адаптацию; val и test размечены только для оценки
        target_train = load_samples(target, 'train', seed, online_noise=True)
        target_val = load_samples(target, 'val', seed)
        target_test = load_samples(target, 'test', seed)

        before = self._test_mae(params, target_test)
        logger.info(f"До адаптации: MAE на целевом test {before} м")
        # ADAM адаптации стартует с нуля
        result = adapt(params, source_train, target_train, config, val=target_val, metrics=MetricsLog(report))
        after = self._test_mae(result.params, target_test)
        logger.info(f"После адаптации: MAE на целевом test {after} м (было {before} м)")

        save_checkpoint(out, result.params, result.state, extra={
            'epoch': manifest.get('epoch'),
            'adapt': {'p': p, 'n_cycle': n_cycle, 'lr': lr, 'epochs': epochs, 'batch_size': batch_size,
                      'draw': draw, 'seed': seed, 'refresh_epochs': result.refresh_epochs,
                      'target_fraction': result.target_draws / result.total_draws if result.total_draws else None},
            'target_test_mae_m': {'before': before, 'after': after},
            'source': str(source),
            'target': str(target),
        })
        self.stdout.write(f"Адаптированный чекпоинт {out}: MAE {before} -> {after} м")

    @staticmethod
    def _test_mae(params, samples):
        if not any(sample.mask.any() for sample in samples):
            logger.warning("Целевой test пуст: MAE не посчитана")
            return None
        return round(evaluate(params, samples)['mae_m'], 6)
