import logging

from radu.augment import AugmentConfig
from radu.formats import load_checkpoint, save_checkpoint
from radu.network import ALPHA_MODES, ModelParams, NetworkConfig
from radu.pointconv import POOL_MODES
from radu.training import MetricsLog, TrainConfig, fit

from ._common import RaduCommand, existing_dir, load_samples

logger = logging.getLogger('radu')


class Command(RaduCommand):
    help = 'Обучает сеть RADU на размеченном датасете и сохраняет лучший по val чекпоинт'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', type=existing_dir, required=True)
        parser.add_argument('--checkpoint', required=True, help='Каталог для сохранения чекпоинта')
        parser.add_argument('--epochs', type=int, default=300)
        parser.add_argument('--batch-size', type=int, default=8)
        parser.add_argument('--lr', type=float, default=1e-3)
        parser.add_argument('--decay', type=float, default=0.1)
        parser.add_argument('--decay-epochs', type=int, default=100)
        parser.add_argument('--coarse-weight', type=float, default=1.0)
        parser.add_argument('--no-augment', action='store_true')
        parser.add_argument('--init', type=existing_dir, help='Продолжить с чекпоинта')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--report', help='CSV с метриками по эпохам')
        parser.add_argument('--alpha', type=float, default=0.1)
        parser.add_argument('--alpha-mode', choices=ALPHA_MODES, default='fixed')
        parser.add_argument('--pool-mode', choices=POOL_MODES, default='average')

    def run(self, dataset, checkpoint, epochs, batch_size, lr, decay, decay_epochs, coarse_weight, no_augment,
            init, seed, report, alpha, alpha_mode, pool_mode, **options):
        config = TrainConfig(lr=lr, decay=decay, decay_epochs=decay_epochs, batch_size=batch_size, epochs=epochs,
                             seed=seed, coarse_weight=coarse_weight,
                             augment=AugmentConfig.disabled() if no_augment else AugmentConfig())
        state = None
        if init:
            params, state, _ = load_checkpoint(init)
            logger.info(f"Инициализация из чекпоинта {init}")
        else:
            params = ModelParams.init(NetworkConfig(alpha=alpha, alpha_mode=alpha_mode, pool_mode=pool_mode), seed)
        logger.info(f"Параметров сети: {params.size}")

        train = load_samples(dataset, 'train', seed, online_noise=True)
        val = load_samples(dataset, 'val', seed)
        result = fit(params, train, config, val=val, state=state, metrics=MetricsLog(report))
        save_checkpoint(checkpoint, result.best_params, result.state, extra={
            'epoch': result.best_epoch,
            'best_val_mae_m': result.best_val_mae if val else None,
            'train': {'lr': lr, 'decay': decay, 'decay_epochs': decay_epochs, 'batch_size': batch_size,
                      'epochs': epochs, 'seed': seed, 'coarse_weight': coarse_weight,
                      'beta1': config.beta1, 'beta2': config.beta2, 'eps': config.eps},
            'dataset': str(dataset),
        })
        self.stdout.write(f"Чекпоинт {checkpoint}: эпоха {result.best_epoch}, шагов {result.steps}")
