"""
Сеть RADU: 2D-блок, 2.5D-пулинг, три слоя RADU, проекция и апсемплинг,
skip-соединение и второй 2D-блок, плюс функция потерь и метрики.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .exceptions import ContractError
from .geometry import CameraIntrinsics, RayPointCloud, pad_to_multiple, project, project_features
from .pointconv import (HIDDEN_UNITS, POOL_MODES, KernelMLP, NeighborGraph, RaduLayerConfig, pool_2_5d, radu_layer,
                        upsample_bilinear)
from .tensor import GradSlot, Tensor
from .tof import FeatureStack, NoiseSource

logger = logging.getLogger(__name__)

ALPHA_MODES = ('fixed', 'radius')


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Кросс-корреляция 3×3 с нулевым дополнением 1: [H, W, C_in] -> [H, W, C_out]."""
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ContractError(f"Ядро свёртки должно быть [3, 3, C_in, C_out], получено {kernel.shape}")
    if x.ndim != 3 or x.shape[2] != kernel.shape[2]:
        raise ContractError(f"Вход {x.shape} не совпадает с ядром {kernel.shape} по каналам")
    if bias.shape != kernel.shape[3:]:
        raise ContractError(f"Смещение {bias.shape} для {kernel.shape[3]} выходных каналов")
    height, width, _ = x.shape
    padded = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))
    out = np.tensordot(windows, kernel.data.transpose(2, 0, 1, 3), axes=([2, 3, 4], [0, 1, 2])) + bias.data

    def backward(g):
        grad_kernel = np.tensordot(windows, g, axes=([0, 1], [0, 1])).transpose(1, 2, 0, 3)
        grad_padded = np.zeros_like(padded)
        for dy in range(3):
            for dx in range(3):
                grad_padded[dy:dy + height, dx:dx + width] += g @ kernel.data[dy, dx].T
        return grad_padded[1:-1, 1:-1], grad_kernel, g.sum(axis=(0, 1))

    return T.node(out.astype(x.dtype, copy=False), (x, kernel, bias), backward)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 5
    block1: Tuple[int, ...] = (64, 64, 128)
    radu: Tuple[int, ...] = (128, 256, 128)
    radii: Tuple[float, ...] = (0.1, 0.2, 0.4)
    block2: Tuple[int, ...] = (64, 64, 1)
    stride: int = 8
    alpha: float = 0.1
    alpha_mode: str = 'fixed'
    hidden: int = HIDDEN_UNITS
    pool_mode: str = 'average'
    bandwidth_ratio: float = 0.25
    slope: float = T.LEAKY_SLOPE

    def __post_init__(self):
        for name in ('block1', 'radu', 'radii', 'block2'):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.radu) != len(self.radii) or not self.radu:
            raise ContractError(f"Каналов RADU {len(self.radu)}, радиусов {len(self.radii)}")
        if not self.block1 or not self.block2 or self.block2[-1] != 1:
            raise ContractError(f"Второй 2D-блок должен заканчиваться одним каналом: {self.block2}")
        if self.stride < 1:
            raise ContractError(f"Шаг пулинга должен быть >= 1, получено {self.stride}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ContractError(f"alpha_mode {self.alpha_mode!r}, ожидается один из {ALPHA_MODES}")
        if self.pool_mode not in POOL_MODES:
            raise ContractError(f"pool_mode {self.pool_mode!r}, ожидается один из {POOL_MODES}")
        if self.alpha < 0 or self.bandwidth_ratio <= 0:
            raise ContractError(f"alpha={self.alpha}, bandwidth_ratio={self.bandwidth_ratio}")

    @classmethod
    def tiny(cls) -> 'NetworkConfig':
        """Маленькая сеть для проверки градиентов на входе 8×8."""
        return cls(block1=(4, 4, 4), radu=(4, 4, 4), block2=(4, 4, 1), stride=2, hidden=4, radii=(0.1, 0.2, 0.4))

    @property
    def block2_in(self) -> int:
        return self.radu[-1] + self.block1[-1] + 1

    def layer_alpha(self, index: int) -> float:
        return self.radii[index] if self.alpha_mode == 'radius' else self.alpha

    def layer_configs(self) -> List[RaduLayerConfig]:
        layers = []
        channels = self.block1[-1]
        for index, (out_channels, radius) in enumerate(zip(self.radu, self.radii)):
            layers.append(RaduLayerConfig(radius=radius, in_channels=channels, out_channels=out_channels,
                                          alpha=self.layer_alpha(index), bandwidth=radius * self.bandwidth_ratio,
                                          slope=self.slope))
            channels = out_channels
        return layers

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        return {key: list(value) if isinstance(value, tuple) else value for key, value in data.items()}

    @classmethod
    def from_dict(cls, data: dict) -> 'NetworkConfig':
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{key: value for key, value in data.items() if key in known})


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Все обучаемые тензоры сети в фиксированном порядке имён."""

    def __init__(self, config: NetworkConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)
        expected = self.expected_shapes(config)
        if list(self.tensors) != list(expected):
            missing = set(expected) ^ set(self.tensors)
            raise ContractError(f"Набор параметров не совпадает с конфигурацией: {sorted(missing)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ContractError(f"Параметр {name}: форма {self.tensors[name].shape}, ожидается {shape}")

    @staticmethod
    def expected_shapes(config: NetworkConfig) -> Dict[str, tuple]:
        shapes = {}
        channels = config.in_channels
        for i, out in enumerate(config.block1):
            shapes[f'block1.{i}.kernel'] = (3, 3, channels, out)
            shapes[f'block1.{i}.bias'] = (out,)
            channels = out
        for i, layer in enumerate(config.layer_configs()):
            width = layer.in_channels * (layer.out_channels + 1)
            shapes[f'radu.{i}.w1'] = (3, config.hidden)
            shapes[f'radu.{i}.b1'] = (config.hidden,)
            shapes[f'radu.{i}.w2'] = (config.hidden, width)
            shapes[f'radu.{i}.b2'] = (width,)
        channels = config.block2_in
        for i, out in enumerate(config.block2):
            shapes[f'block2.{i}.kernel'] = (3, 3, channels, out)
            shapes[f'block2.{i}.bias'] = (out,)
            channels = out
        return shapes

    @classmethod
    def init(cls, config: NetworkConfig, seed: int = 0, dtype='f32') -> 'ModelParams':
        rng = np.random.default_rng(seed)
        dtype = T.resolve_dtype(dtype)
        tensors = {}
        for name, shape in cls.expected_shapes(config).items():
            if name.endswith(('bias', 'b1', 'b2')):
                value = np.zeros(shape)
            elif name.endswith('kernel'):
                value = _uniform(rng, shape, 9 * shape[2], 9 * shape[3])
            else:
                value = _uniform(rng, shape, shape[0], shape[1])
            tensors[name] = GradSlot(value, dtype=dtype, name=name)
        return cls(config, tensors)

    @classmethod
    def from_arrays(cls, config: NetworkConfig, arrays: Dict[str, np.ndarray]) -> 'ModelParams':
        names = list(cls.expected_shapes(config))
        missing = [name for name in names if name not in arrays]
        if missing:
            raise ContractError(f"Не хватает параметров: {missing}")
        return cls(config, {name: GradSlot(arrays[name], name=name) for name in names})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for tensor in self.tensors.values():
            if isinstance(tensor, GradSlot):
                tensor.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self.tensors.items()}

    def copy(self) -> 'ModelParams':
        return ModelParams(self.config, {name: GradSlot(t.data, name=name) for name, t in self.tensors.items()})

    def astype(self, dtype) -> 'ModelParams':
        dtype = T.resolve_dtype(dtype)
        return ModelParams(self.config, {name: GradSlot(t.data.astype(dtype), name=name)
                                         for name, t in self.tensors.items()})

    def detached(self) -> 'ModelParams':
        """Копия без градиентов: прямой проход не строит граф."""
        return ModelParams(self.config, {name: Tensor(t.data) for name, t in self.tensors.items()})

    def conv(self, block: str, index: int) -> Tuple[Tensor, Tensor]:
        return self.tensors[f'{block}.{index}.kernel'], self.tensors[f'{block}.{index}.bias']

    def kernel(self, index: int) -> KernelMLP:
        layer = self.config.layer_configs()[index]
        prefix = f'radu.{index}'
        return KernelMLP(w1=self.tensors[f'{prefix}.w1'], b1=self.tensors[f'{prefix}.b1'],
                         w2=self.tensors[f'{prefix}.w2'], b2=self.tensors[f'{prefix}.b2'],
                         in_channels=layer.in_channels, out_channels=layer.out_channels)


@dataclass
class Sample:
    features: FeatureStack
    gt_distance: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    sample_id: str = ''
    # кадр без шума для повторного зашумления при обучении
    noise_source: Optional[NoiseSource] = None

    def __post_init__(self):
        grid = self.features.grid_shape
        if self.gt_distance.shape != grid or self.mask.shape != grid or self.intrinsics.shape != grid:
            raise ContractError(f"Сэмпл {self.sample_id!r}: размеры gt {self.gt_distance.shape}, "
                                f"маски {self.mask.shape}, признаков {grid}, камеры {self.intrinsics.shape}")
        if self.noise_source is not None and self.noise_source.frame.grid_shape != grid:
            raise ContractError(f"Сэмпл {self.sample_id!r}: кадр без шума {self.noise_source.frame.grid_shape}, "
                                f"признаки {grid}")
        gt_ok = np.isfinite(self.gt_distance) & (self.gt_distance > 0)
        self.mask = np.asarray(self.mask, dtype=bool) & self.features.valid & gt_ok

    def with_target(self, gt_distance: np.ndarray, mask: np.ndarray) -> 'Sample':
        return dataclasses.replace(self, gt_distance=gt_distance, mask=mask)


@dataclass
class ForwardResult:
    d_out: Tensor
    d_3d: Tensor
    latent_clouds: List[RayPointCloud] = field(default_factory=list)
    coarse_mask: Optional[np.ndarray] = None
    graphs: List[NeighborGraph] = field(default_factory=list)
    densities: List[np.ndarray] = field(default_factory=list)

    def frozen_geometry(self) -> List[Tuple[NeighborGraph, np.ndarray]]:
        return list(zip(self.graphs, self.densities))


def _block(x: Tensor, params: ModelParams, name: str, depth: int, slope: float, last_linear: bool) -> Tensor:
    for i in range(depth):
        kernel, bias = params.conv(name, i)
        x = conv2d(x, kernel, bias)
        if not (last_linear and i == depth - 1):
            x = T.leaky_relu(x, slope)
    return x


def forward(params: ModelParams, sample: Sample,
            frozen: Optional[List[Tuple[NeighborGraph, np.ndarray]]] = None) -> ForwardResult:
    """
    Прямой проход; разрешение, не кратное шагу, дополняется отражением и обрезается.

    frozen подставляет графы соседей и плотности слоёв из другого прохода
    вместо пересчёта по текущему облаку.
    """
    config = params.config
    dtype = params.dtype
    features = sample.features
    if features.channels.shape[0] != config.in_channels:
        raise ContractError(f"Сеть ожидает {config.in_channels} каналов, получено {features.channels.shape[0]}")
    height, width = features.grid_shape
    k = config.stride

    x = pad_to_multiple(np.moveaxis(features.channels, 0, -1), k).astype(dtype)
    init_distance = pad_to_multiple(features.init_distance, k).astype(dtype)
    valid = pad_to_multiple(features.valid, k)
    intrinsics = sample.intrinsics.padded(*init_distance.shape)

    skip = _block(Tensor(x), params, 'block1', len(config.block1), config.slope, last_linear=False)
    cloud = pool_2_5d(Tensor(init_distance), skip, intrinsics, k, config.pool_mode, valid)
    result = ForwardResult(d_out=None, d_3d=None, latent_clouds=[cloud])
    for index, layer in enumerate(config.layer_configs()):
        graph, density = frozen[index] if frozen else (None, None)
        step = radu_layer(cloud, params.kernel(index), layer, graph, density)
        cloud = step.cloud.with_features(T.leaky_relu(step.features, config.slope))
        result.latent_clouds.append(cloud)
        result.graphs.append(step.graph)
        result.densities.append(step.density)

    coarse_distance, result.coarse_mask = project(cloud)
    h, w = coarse_distance.shape
    d_3d_full = upsample_bilinear(T.reshape(coarse_distance, (h, w, 1)), k)
    upsampled = upsample_bilinear(project_features(cloud), k)
    z = T.concat([upsampled, skip, d_3d_full], axis=2)
    z = _block(z, params, 'block2', len(config.block2), config.slope, last_linear=True)

    crop = (slice(0, height), slice(0, width), 0)
    result.d_out = T.getitem(z, crop)
    result.d_3d = T.getitem(d_3d_full, crop)
    return result


def masked_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    if pred.shape != target.shape or mask.shape != target.shape:
        raise ContractError(f"Формы {pred.shape}, {target.shape}, {mask.shape} не совпадают")
    index = np.flatnonzero(mask)
    if index.size == 0:
        raise ContractError("Пустая маска: не по чему считать ошибку")
    picked = T.take(T.reshape(pred, (pred.size,)), index)
    return T.mean(T.absolute(T.sub(picked, Tensor(target.reshape(-1)[index].astype(pred.dtype)))))


def coarse_fine_loss(d_out: Tensor, d_3d: Tensor, d_gt: np.ndarray, mask: np.ndarray,
                     coarse_weight: float = 1.0) -> Tensor:
    """L1 по выходу сети плюс L1 по грубой карте d_3D (coarse_weight=0 оставляет только первое)."""
    loss = masked_l1(d_out, d_gt, mask)
    if coarse_weight:
        loss = T.add(loss, T.mul(masked_l1(d_3d, d_gt, mask), coarse_weight))
    return loss


def mae(pred: np.ndarray, d_gt: np.ndarray, mask: np.ndarray) -> float:
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if pred.shape != d_gt.shape or mask.shape != d_gt.shape:
        raise ContractError(f"Формы {pred.shape}, {d_gt.shape}, {mask.shape} не совпадают")
    if not mask.any():
        raise ContractError("Пустая маска: MAE не определена")
    return float(np.mean(np.abs(pred[mask].astype(np.float64) - d_gt[mask])))


def relative_error(pred: np.ndarray, baseline: np.ndarray, d_gt: np.ndarray, mask: np.ndarray) -> float:
    """MAE(pred) / MAE(baseline); nan, если ошибка базовой карты нулевая."""
    baseline_mae = mae(baseline, d_gt, mask)
    if baseline_mae == 0:
        logger.warning("MAE базового ToF равна 0: относительная ошибка не определена")
        return float('nan')
    return mae(pred, d_gt, mask) / baseline_mae


def evaluate(params: ModelParams, samples: List[Sample], coarse_weight: float = 1.0) -> Dict[str, float]:
    """Средние по сэмплам loss, MAE сети, MAE базового ToF и относительная ошибка."""
    params = params.detached()
    losses, model, baseline = [], [], []
    for sample in samples:
        if not sample.mask.any():
            logger.warning(f"Сэмпл {sample.sample_id}: пустая маска, пропущен")
            continue
        result = forward(params, sample)
        losses.append(coarse_fine_loss(result.d_out, result.d_3d, sample.gt_distance, sample.mask,
                                       coarse_weight).item())
        model.append(mae(result.d_out.data, sample.gt_distance, sample.mask))
        baseline.append(mae(sample.features.init_distance, sample.gt_distance, sample.mask))
    if not model:
        raise ContractError("Нет сэмплов с непустой маской")
    model_mae, baseline_mae = float(np.mean(model)), float(np.mean(baseline))
    if baseline_mae > 0:
        rel = model_mae / baseline_mae
    else:
        logger.warning("MAE базового ToF равна 0: относительная ошибка не определена")
        rel = float('nan')
    return {'loss': float(np.mean(losses)), 'mae_m': model_mae, 'baseline_mae_m': baseline_mae,
            'relative_error': rel}
