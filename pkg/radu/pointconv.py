"""
Свёртка Монте-Карло по облаку точек с обновлением глубины вдоль лучей (RADU),
2.5D-пулинг и билинейный апсемплинг.

Свёртка считается через базис скрытого слоя ядра: g(x) = W2ᵀ·lrelu(W1ᵀx + b1) + b2
линейна по [hidden, 1], поэтому сначала агрегируются внешние произведения
признаков соседей на базис, а затем один раз умножаются на сложенное ядро.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .geometry import CameraIntrinsics, RayPointCloud, pixel_rays
from .tensor import GradSlot, Tensor

logger = logging.getLogger(__name__)

PDE_FLOOR = 1e-6
HIDDEN_UNITS = 16
POOL_MODES = ('average', 'max')

_CELL_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)])


@dataclass
class NeighborGraph:
    """Списки соседей в формате CSR: соседи точки j это indices[offsets[j]:offsets[j+1]]."""
    offsets: np.ndarray
    indices: np.ndarray
    radius: float

    @property
    def size(self) -> int:
        return self.offsets.size - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, j: int) -> np.ndarray:
        return self.indices[self.offsets[j]:self.offsets[j + 1]]

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """(источник i, приёмник j) для каждого ребра, рёбра сгруппированы по j."""
        dst = np.repeat(np.arange(self.size), self.sizes)
        return self.indices, dst

    def as_sets(self) -> List[set]:
        return [set(self.neighbors(j).tolist()) for j in range(self.size)]

    @classmethod
    def from_lists(cls, lists: List[np.ndarray], radius: float) -> 'NeighborGraph':
        offsets = np.zeros(len(lists) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(x) for x in lists])
        indices = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, dtype=np.int64)
        return cls(offsets=offsets, indices=indices, radius=float(radius))


def _within(points: np.ndarray, j: int, candidates: np.ndarray, radius: float) -> np.ndarray:
    d2 = ((points[candidates] - points[j]) ** 2).sum(-1)
    return candidates[d2 <= radius * radius]


def _ordered(hits: np.ndarray, pixel_index: np.ndarray) -> np.ndarray:
    # порядок суммирования не зависит от порядка хранения точек
    return hits[np.lexsort((hits, pixel_index[hits]))]


def radius_neighbors(cloud: RayPointCloud, radius: float) -> NeighborGraph:
    """Точный поиск соседей в радиусе через равномерную сетку с ячейкой radius."""
    if radius <= 0:
        raise ContractError(f"Радиус должен быть > 0, получено {radius}")
    points = cloud.positions
    cells = np.floor(points / radius).astype(np.int64)
    buckets: Dict[tuple, list] = defaultdict(list)
    for i, cell in enumerate(map(tuple, cells)):
        buckets[cell].append(i)
    buckets = {cell: np.array(members, dtype=np.int64) for cell, members in buckets.items()}

    lists = []
    empty = np.zeros(0, dtype=np.int64)
    for j in range(cloud.size):
        around = [buckets.get(tuple(cells[j] + offset), empty) for offset in _CELL_OFFSETS]
        hits = _within(points, j, np.concatenate(around), radius)
        lists.append(_ordered(hits, cloud.pixel_index))
    return NeighborGraph.from_lists(lists, radius)


def brute_force_neighbors(cloud: RayPointCloud, radius: float) -> NeighborGraph:
    """Перебор O(N²), эталон для проверки сеточного поиска."""
    if radius <= 0:
        raise ContractError(f"Радиус должен быть > 0, получено {radius}")
    points = cloud.positions
    every = np.arange(cloud.size)
    lists = [_ordered(_within(points, j, every, radius), cloud.pixel_index) for j in range(cloud.size)]
    return NeighborGraph.from_lists(lists, radius)


def density_estimate(cloud: RayPointCloud, graph: NeighborGraph, sigma: Optional[float] = None) -> np.ndarray:
    """Гауссова оценка плотности по соседям; не дифференцируется (константный вес)."""
    sigma = graph.radius / 4.0 if sigma is None else sigma
    if sigma <= 0:
        raise ContractError(f"Ширина ядра плотности должна быть > 0, получено {sigma}")
    points = cloud.positions
    src, dst = graph.edges()
    d2 = ((points[src] - points[dst]) ** 2).sum(-1)
    total = np.bincount(dst, weights=np.exp(-d2 / (2.0 * sigma * sigma)), minlength=graph.size)
    return np.maximum(PDE_FLOOR, total / np.maximum(graph.sizes, 1))


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class KernelMLP:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    in_channels: int
    out_channels: int

    def __post_init__(self):
        hidden = self.hidden
        width = self.in_channels * (self.out_channels + 1)
        expected = {'w1': (3, hidden), 'b1': (hidden,), 'w2': (hidden, width), 'b2': (width,)}
        for field, shape in expected.items():
            if getattr(self, field).shape != shape:
                raise ContractError(f"KernelMLP.{field}: форма {getattr(self, field).shape}, ожидается {shape}")

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, in_channels: int, out_channels: int, rng: np.random.Generator, hidden: int = HIDDEN_UNITS,
             dtype=np.float64, prefix: str = 'kernel') -> 'KernelMLP':
        width = in_channels * (out_channels + 1)
        return cls(
            w1=GradSlot(_uniform(rng, (3, hidden), 3, hidden), dtype=dtype, name=f'{prefix}.w1'),
            b1=GradSlot(np.zeros(hidden), dtype=dtype, name=f'{prefix}.b1'),
            w2=GradSlot(_uniform(rng, (hidden, width), hidden, width), dtype=dtype, name=f'{prefix}.w2'),
            b2=GradSlot(np.zeros(width), dtype=dtype, name=f'{prefix}.b2'),
            in_channels=in_channels, out_channels=out_channels,
        )

    def parameters(self) -> Dict[str, Tensor]:
        return {'w1': self.w1, 'b1': self.b1, 'w2': self.w2, 'b2': self.b2}

    def evaluate(self, offsets: Tensor, slope: float = T.LEAKY_SLOPE) -> Tensor:
        """g(offsets) -> [E, C_in, C_out + 1]; последний столбец это W^u."""
        hidden = T.leaky_relu(T.linear(offsets, self.w1, self.b1), slope)
        out = T.linear(hidden, self.w2, self.b2)
        return T.reshape(out, (offsets.shape[0], self.in_channels, self.out_channels + 1))

    def stacked(self) -> Tensor:
        """Ядро [C_in·(h+1), C_out+1] для базиса [hidden, 1]."""
        cin, width = self.in_channels, self.out_channels + 1
        weights = T.transpose(T.reshape(self.w2, (self.hidden, cin, width)), (1, 0, 2))
        bias = T.reshape(self.b2, (cin, 1, width))
        return T.reshape(T.concat([weights, bias], axis=1), (cin * (self.hidden + 1), width))


@dataclass(frozen=True)
class RaduLayerConfig:
    radius: float
    in_channels: int
    out_channels: int
    alpha: float = 0.1
    bandwidth: Optional[float] = None
    slope: float = T.LEAKY_SLOPE

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractError(f"Радиус слоя должен быть > 0, получено {self.radius}")
        if self.alpha < 0:
            raise ContractError(f"alpha должно быть >= 0, получено {self.alpha}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError(f"Число каналов должно быть >= 1: {self.in_channels} -> {self.out_channels}")

    @property
    def sigma(self) -> float:
        return self.radius / 4.0 if self.bandwidth is None else self.bandwidth


def mc_conv_forward(features: Tensor, cloud: RayPointCloud, graph: NeighborGraph, pde: np.ndarray,
                    kernel: KernelMLP, radius: float, slope: float = T.LEAKY_SLOPE) -> Tuple[Tensor, Tensor]:
    """Свёртка Монте-Карло: признаки [N, C_out] и ненормированные обновления u [N]."""
    n = cloud.size
    cin, cout = kernel.in_channels, kernel.out_channels
    if features.shape != (n, cin):
        raise ContractError(f"Признаки {features.shape}, ожидается ({n}, {cin})")
    if graph.size != n:
        raise ContractError(f"Граф на {graph.size} точек, облако на {n}")
    if not np.isclose(graph.radius, radius):
        raise ContractError(f"Граф построен для радиуса {graph.radius}, слой использует {radius}")
    dtype = features.dtype
    src, dst = graph.edges()
    edges = src.size
    width = kernel.hidden + 1

    positions = cloud.position_tensor()
    offsets = T.mul(T.sub(T.take(positions, src), T.take(positions, dst)), 1.0 / radius)
    hidden = T.leaky_relu(T.linear(offsets, kernel.w1, kernel.b1), slope)
    basis = T.concat([hidden, Tensor(np.ones((edges, 1), dtype=dtype))], axis=1)

    weight = 1.0 / (np.asarray(pde)[src] * graph.sizes[dst])
    weighted = T.mul(T.take(features, src), Tensor(np.repeat(weight[:, None], cin, axis=1).astype(dtype)))
    outer = T.mul(T.broadcast_to(T.reshape(weighted, (edges, cin, 1)), (edges, cin, width)),
                  T.broadcast_to(T.reshape(basis, (edges, 1, width)), (edges, cin, width)))
    aggregated = T.reshape(T.segment_sum(outer, dst, n), (n, cin * width))
    result = T.matmul(aggregated, kernel.stacked())
    return T.getitem(result, (slice(None), slice(0, cout))), T.getitem(result, (slice(None), cout))


def radu_update(cloud: RayPointCloud, u: Tensor, alpha: float) -> RayPointCloud:
    """distance += alpha·tanh(u); лучи и индексы пикселей не меняются."""
    if alpha <= 0:
        raise ContractError(f"alpha должно быть > 0, получено {alpha}")
    if u.shape != cloud.distance.shape:
        raise ContractError(f"Обновления {u.shape} на облако из {cloud.size} точек")
    return cloud.with_distance(T.add(cloud.distance, T.mul(T.tanh(u), alpha)))


@dataclass
class LayerOutput:
    features: Tensor
    cloud: RayPointCloud
    graph: NeighborGraph
    density: np.ndarray


def radu_layer(cloud: RayPointCloud, kernel: KernelMLP, config: RaduLayerConfig,
               graph: Optional[NeighborGraph] = None, density: Optional[np.ndarray] = None) -> LayerOutput:
    """
    Один слой: соседи и плотность на текущем облаке, свёртка, сдвиг точек по лучам.
    Переданные graph и density используются как есть (так проверяются градиенты).
    """
    if graph is None:
        graph = radius_neighbors(cloud, config.radius)
    if density is None:
        density = density_estimate(cloud, graph, config.sigma)
    out, u = mc_conv_forward(cloud.features, cloud, graph, density, kernel, config.radius, config.slope)
    if config.alpha > 0:
        cloud = radu_update(cloud, u, config.alpha)
    return LayerOutput(features=out, cloud=cloud.with_features(out), graph=graph, density=density)


def _to_blocks(a: np.ndarray, k: int) -> np.ndarray:
    height, width = a.shape[:2]
    rest = a.shape[2:]
    blocks = a.reshape((height // k, k, width // k, k) + rest).swapaxes(1, 2)
    return blocks.reshape((height // k, width // k, k * k) + rest)


def _from_blocks(b: np.ndarray, k: int) -> np.ndarray:
    h, w = b.shape[:2]
    rest = b.shape[3:]
    return b.reshape((h, w, k, k) + rest).swapaxes(1, 2).reshape((h * k, w * k) + rest)


def block_pool(values: Tensor, valid: np.ndarray, k: int, mode: str = 'average') -> Tuple[Tensor, np.ndarray]:
    """
    Пулинг блоками k×k по валидным пикселям, каналы независимо.

    values: [H, W, C], valid: [H, W]. Блок без валидных пикселей даёт 0 и False.
    В режиме max градиент идёт в первый максимум блока (меньший индекс пикселя).
    """
    if mode not in POOL_MODES:
        raise ContractError(f"Режим пулинга {mode!r}, ожидается один из {POOL_MODES}")
    height, width, channels = values.shape
    if k < 1 or height % k or width % k:
        raise ContractError(f"Размер {height}x{width} не делится на шаг {k}")
    blocks = _to_blocks(values.data, k)
    mask = _to_blocks(np.asarray(valid, dtype=bool), k)
    count = mask.sum(axis=2)
    block_valid = count > 0

    if mode == 'average':
        weights = np.where(mask, 1.0 / np.maximum(count, 1)[..., None], 0.0).astype(values.dtype)
        pooled = np.einsum('hwkc,hwk->hwc', blocks, weights)

        def backward(g):
            return (_from_blocks(weights[..., None] * g[:, :, None, :], k),)
    else:
        masked = np.where(mask[..., None], blocks, -np.inf)
        winner = np.argmax(masked, axis=2)
        pooled = np.take_along_axis(blocks, winner[:, :, None, :], axis=2)[:, :, 0, :]
        pooled = np.where(block_valid[..., None], pooled, 0.0).astype(values.dtype)

        def backward(g):
            routed = np.zeros_like(blocks)
            g = np.where(block_valid[..., None], g, 0.0)
            np.put_along_axis(routed, winner[:, :, None, :], g[:, :, None, :], axis=2)
            return (_from_blocks(routed, k),)

    return T.node(pooled, (values,), backward), block_valid


def pool_2_5d(dist_map: Tensor, features: Tensor, intrinsics: CameraIntrinsics, k: int, mode: str = 'average',
              valid: Optional[np.ndarray] = None) -> RayPointCloud:
    """
    2.5D-пулинг: пулятся только расстояния, точка ставится на луч центра грубого пикселя.
    """
    height, width = intrinsics.shape
    if dist_map.shape != (height, width) or features.shape[:2] != (height, width):
        raise ContractError(f"Карты {dist_map.shape} и {features.shape} не совпадают с камерой {height}x{width}")
    if valid is None:
        valid = np.isfinite(dist_map.data) & (dist_map.data > 0)
    channels = features.shape[2]
    stacked = T.concat([T.reshape(dist_map, (height, width, 1)), features], axis=2)
    pooled, block_valid = block_pool(stacked, valid, k, mode)
    coarse = intrinsics.scale(k)
    h, w = coarse.shape
    index = np.flatnonzero(block_valid)
    points = T.take(T.reshape(pooled, (h * w, channels + 1)), index)
    distance = T.reshape(T.getitem(points, (slice(None), slice(0, 1))), (index.size,))
    pooled_features = T.getitem(points, (slice(None), slice(1, None)))
    if index.size < h * w:
        logger.debug(f"2.5D-пулинг: {h * w - index.size} пустых блоков из {h * w}")
    return RayPointCloud(rays=pixel_rays(coarse, index), distance=distance, pixel_index=index,
                         intrinsics=coarse, features=pooled_features)


def interpolation_matrix(size: int, k: int, dtype=np.float64) -> np.ndarray:
    """Матрица [k·size, size] билинейной интерполяции между центрами пикселей с прижатием к краю."""
    if k < 1:
        raise ContractError(f"Коэффициент апсемплинга должен быть >= 1, получено {k}")
    fine = np.arange(size * k)
    source = np.clip((fine + 0.5) / k - 0.5, 0.0, size - 1)
    lower = np.floor(source).astype(np.int64)
    upper = np.minimum(lower + 1, size - 1)
    frac = source - lower
    matrix = np.zeros((size * k, size), dtype=dtype)
    np.add.at(matrix, (fine, lower), 1.0 - frac)
    np.add.at(matrix, (fine, upper), frac)
    return matrix


def upsample_bilinear(coarse: Tensor, k: int) -> Tensor:
    """[h, w, C] -> [k·h, k·w, C]."""
    h, w, _ = coarse.shape
    rows = interpolation_matrix(h, k, coarse.dtype)
    cols = interpolation_matrix(w, k, coarse.dtype)
    out = np.einsum('Xx,Yxc->YXc', cols, np.einsum('Yy,yxc->Yxc', rows, coarse.data))

    def backward(g):
        return (np.einsum('Yy,Yxc->yxc', rows, np.einsum('Xx,YXc->Yxc', cols, g)),)

    return T.node(out, (coarse,), backward)
