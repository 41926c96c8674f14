"""
Обучение с учителем (ADAM, ступенчатое затухание шага) и циклическое
самообучение на псевдо-метках для адаптации к целевому домену.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment
from .exceptions import ContractError, GradientError
from .network import ModelParams, Sample, coarse_fine_loss, evaluate, forward, mae

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('epoch', 'split', 'loss', 'mae_m', 'relative_error', 'lr', 'seconds')
DRAW_MODES = ('sample', 'batch')


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.1
    decay_epochs: int = 100
    batch_size: int = 8
    epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    coarse_weight: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.decay_epochs < 1:
            raise ContractError(f"Некорректные параметры обучения: lr={self.lr}, batch_size={self.batch_size}, "
                                f"epochs={self.epochs}, decay_epochs={self.decay_epochs}")

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_epochs)


@dataclass(frozen=True)
class AdaptConfig:
    p: float = 0.5
    n_cycle: int = 20
    lr: float = 5e-5
    epochs: int = 100
    batch_size: int = 4
    draw: str = 'sample'
    seed: int = 0
    coarse_weight: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ContractError(f"p должно лежать в [0, 1], получено {self.p}")
        if self.n_cycle < 1:
            raise ContractError(f"n_cycle должно быть >= 1, получено {self.n_cycle}")
        if self.draw not in DRAW_MODES:
            raise ContractError(f"draw {self.draw!r}, ожидается один из {DRAW_MODES}")

    def train_config(self) -> TrainConfig:
        """Эквивалентный TrainConfig без затухания шага."""
        return TrainConfig(lr=self.lr, decay=1.0, batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                           coarse_weight=self.coarse_weight, augment=self.augment)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: ModelParams) -> 'AdamState':
        return cls(step=0, m={name: np.zeros_like(t.data) for name, t in params.items()},
                   v={name: np.zeros_like(t.data) for name, t in params.items()})


def adam_step(params: ModelParams, state: AdamState, lr: float, grads: Optional[Dict[str, np.ndarray]] = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """ADAM с коррекцией смещения; градиенты по умолчанию берутся из .grad параметров."""
    if grads is None:
        grads = {name: tensor.grad for name, tensor in params.items()}
    for name, grad in grads.items():
        if grad is None or not np.all(np.isfinite(grad)):
            raise GradientError(f"Нечисловой градиент у параметра {name}")
    if not state.m:
        state.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        state.v = {name: np.zeros_like(t.data) for name, t in params.items()}
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, tensor in params.items():
        grad = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * grad
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * grad * grad
        update = lr * (state.m[name] / correction1) / (np.sqrt(state.v[name] / correction2) + eps)
        tensor.data -= update.astype(tensor.dtype, copy=False)
    return state


class MetricsLog:
    """CSV метрик по эпохам; без пути ничего не пишет, но строки копит."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self.rows: List[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open('w', newline='', encoding='utf-8') as f:
                csv.DictWriter(f, fieldnames=METRIC_COLUMNS).writeheader()

    def write(self, **row):
        row = {key: row.get(key, '') for key in METRIC_COLUMNS}
        self.rows.append(row)
        if self.path:
            with self.path.open('a', newline='', encoding='utf-8') as f:
                csv.DictWriter(f, fieldnames=METRIC_COLUMNS).writerow(row)


@dataclass
class StepStats:
    loss: float
    mae_m: float
    baseline_mae_m: float
    used: int


def train_step(params: ModelParams, state: AdamState, batch: Sequence[Sample], config: TrainConfig, lr: float,
               rng: np.random.Generator) -> Optional[StepStats]:
    """Один шаг оптимизатора по батчу; градиенты сэмплов копятся по порядку с весом 1/B."""
    prepared = [augment(sample, rng, config.augment) for sample in batch]
    usable = [sample for sample in prepared if sample.mask.any()]
    if len(usable) < len(prepared):
        logger.warning(f"Пропущено сэмплов с пустой маской: {len(prepared) - len(usable)}")
    if not usable:
        logger.warning("Батч пуст после маскирования, шаг пропущен")
        return None
    params.zero_grad()
    losses, model, baseline = [], [], []
    for sample in usable:
        result = forward(params, sample)
        loss = coarse_fine_loss(result.d_out, result.d_3d, sample.gt_distance, sample.mask, config.coarse_weight)
        T.mul(loss, 1.0 / len(usable)).backward()
        losses.append(loss.item())
        model.append(mae(result.d_out.data, sample.gt_distance, sample.mask))
        baseline.append(mae(sample.features.init_distance, sample.gt_distance, sample.mask))
    adam_step(params, state, lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    return StepStats(loss=float(np.mean(losses)), mae_m=float(np.mean(model)),
                     baseline_mae_m=float(np.mean(baseline)), used=len(usable))


def _summarize(stats: List[StepStats]) -> Tuple[float, float, float]:
    total = sum(s.used for s in stats)
    loss = sum(s.loss * s.used for s in stats) / total
    model = sum(s.mae_m * s.used for s in stats) / total
    baseline = sum(s.baseline_mae_m * s.used for s in stats) / total
    return loss, model, (model / baseline if baseline > 0 else float('nan'))


def _log_epoch(metrics: MetricsLog, epoch: int, stats: List[StepStats], lr: float, started: float,
               val: Optional[Sequence[Sample]], params: ModelParams, coarse_weight: float) -> Optional[float]:
    seconds = time.monotonic() - started
    message = f"Эпоха {epoch}: lr {lr:.2e}"
    if stats:
        loss, model, rel = _summarize(stats)
        metrics.write(epoch=epoch, split='train', loss=loss, mae_m=model, relative_error=rel, lr=lr, seconds=seconds)
        message += f", loss {loss:.5f}, MAE {model:.4f} м"
    val_mae = None
    if val:
        result = evaluate(params, list(val), coarse_weight)
        val_mae = result['mae_m']
        metrics.write(epoch=epoch, split='val', loss=result['loss'], mae_m=val_mae,
                      relative_error=result['relative_error'], lr=lr, seconds=time.monotonic() - started)
        message += f", val MAE {val_mae:.4f} м (отн. {result['relative_error']:.3f})"
    logger.info(message)
    return val_mae


@dataclass
class FitResult:
    params: ModelParams
    best_params: ModelParams
    state: AdamState
    steps: int
    best_epoch: int
    best_val_mae: float
    history: List[dict]


def fit(params: ModelParams, dataset: Sequence[Sample], config: TrainConfig, val: Optional[Sequence[Sample]] = None,
        state: Optional[AdamState] = None, metrics: Optional[MetricsLog] = None) -> FitResult:
    """Обучение на размеченных сэмплах; params обновляются на месте."""
    if not dataset:
        raise ContractError("Пустой обучающий набор")
    state = state or AdamState.zeros(params)
    metrics = metrics or MetricsLog()
    rng = np.random.default_rng(config.seed)
    first_step = state.step
    best_params, best_epoch, best_val = params.copy(), -1, float('inf')
    logger.info(f"Обучение: {len(dataset)} сэмплов, {config.epochs} эпох, батч {config.batch_size}")

    for epoch in range(config.epochs):
        started = time.monotonic()
        lr = config.learning_rate(epoch)
        order = rng.permutation(len(dataset))
        stats = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            step = train_step(params, state, batch, config, lr, rng)
            if step is not None:
                stats.append(step)
        val_mae = _log_epoch(metrics, epoch, stats, lr, started, val, params, config.coarse_weight)
        if val_mae is not None and val_mae < best_val:
            best_params, best_epoch, best_val = params.copy(), epoch, val_mae
    if not val:
        best_params, best_epoch = params.copy(), config.epochs - 1

    return FitResult(params=params, best_params=best_params, state=state, steps=state.step - first_step,
                     best_epoch=best_epoch, best_val_mae=best_val, history=metrics.rows)


def domain_draws(rng: np.random.Generator, p: float, count: int, mode: str = 'sample') -> np.ndarray:
    """True там, где слот батча берётся из целевого домена."""
    if mode == 'batch':
        return np.full(count, rng.random() < p)
    return rng.random(count) < p


@dataclass
class PseudoLabels:
    labels: List[np.ndarray] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)
    versions: List[int] = field(default_factory=list)


def make_pseudo_labels(params: ModelParams, target: Sequence[Sample], version: int) -> PseudoLabels:
    """Предсказания модели на неаугментированных целевых входах."""
    frozen = params.detached()
    result = PseudoLabels()
    for sample in target:
        prediction = forward(frozen, sample).d_out.data.astype(np.float64)
        result.labels.append(prediction)
        result.masks.append(sample.features.valid.copy())
        result.versions.append(version)
    return result


@dataclass
class AdaptResult:
    params: ModelParams
    state: AdamState
    refresh_epochs: List[int]
    label_usage: List[Tuple[int, int, int]]
    target_draws: int
    total_draws: int
    history: List[dict]


def adapt(params: ModelParams, source: Sequence[Sample], target: Sequence[Sample], config: AdaptConfig,
          val: Optional[Sequence[Sample]] = None, state: Optional[AdamState] = None,
          metrics: Optional[MetricsLog] = None) -> AdaptResult:
    """
    Циклическое самообучение. gt целевых сэмплов не читается: их цели это псевдо-метки,
    обновляемые каждые n_cycle эпох. val (размеченный целевой набор) нужен только для логов.
    """
    if not target:
        raise ContractError("Пустой целевой набор")
    if not source:
        raise ContractError("Пустой исходный набор")
    train_config = config.train_config()
    state = state or AdamState.zeros(params)
    metrics = metrics or MetricsLog()
    rng = np.random.default_rng(config.seed)
    draw_rng = np.random.default_rng([config.seed, 1])
    pseudo = PseudoLabels()
    refresh_epochs, usage = [], []
    target_draws = total_draws = 0
    logger.info(f"Адаптация: {len(source)} исходных и {len(target)} целевых сэмплов, p={config.p}, "
                f"n_cycle={config.n_cycle}")

    for epoch in range(config.epochs):
        started = time.monotonic()
        if epoch % config.n_cycle == 0:
            pseudo = make_pseudo_labels(params, target, version=epoch)
            refresh_epochs.append(epoch)
            logger.info(f"Эпоха {epoch}: псевдо-метки обновлены для {len(target)} сэмплов")
        order = rng.permutation(len(source))
        stats = []
        for start in range(0, len(order), config.batch_size):
            slots = order[start:start + config.batch_size]
            from_target = domain_draws(draw_rng, config.p, len(slots), config.draw)
            batch = []
            for source_index, use_target in zip(slots, from_target):
                total_draws += 1
                if not use_target:
                    batch.append(source[source_index])
                    continue
                index = int(draw_rng.integers(len(target)))
                target_draws += 1
                usage.append((epoch, index, pseudo.versions[index]))
                batch.append(target[index].with_target(pseudo.labels[index], pseudo.masks[index]))
            step = train_step(params, state, batch, train_config, config.lr, rng)
            if step is not None:
                stats.append(step)
        _log_epoch(metrics, epoch, stats, config.lr, started, val, params, config.coarse_weight)

    if total_draws:
        logger.info(f"Доля целевых сэмплов: {target_draws / total_draws:.3f}")
    return AdaptResult(params=params, state=state, refresh_epochs=refresh_epochs, label_usage=usage,
                       target_draws=target_draws, total_draws=total_draws, history=metrics.rows)
