"""
Камера-обскура, единичные лучи пикселей и проекции между картой расстояний и
облаком точек, привязанным к лучам.

Точка облака задаётся только расстоянием вдоль своего луча: позиция всегда
вычисляется как distance·ray и никогда не хранится отдельно.
"""
import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ContractError
from .tensor import Tensor

RAY_NORM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"Фокусные расстояния должны быть > 0: fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ContractError(f"Размер кадра должен быть >= 1: {self.width}x{self.height}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> 'CameraIntrinsics':
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(fx=float(focal), fy=float(focal), cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def scale(self, k: int) -> 'CameraIntrinsics':
        return intrinsics_scale(self, k)

    def flipped(self, horizontal: bool) -> 'CameraIntrinsics':
        """Зеркальное отображение столбцов (horizontal) или строк кадра."""
        if horizontal:
            return dataclasses.replace(self, cx=self.width - self.cx)
        return dataclasses.replace(self, cy=self.height - self.cy)

    def rotated90(self) -> 'CameraIntrinsics':
        """Параметры для кадра после np.rot90 (поворот на 90° против часовой)."""
        return CameraIntrinsics(fx=self.fy, fy=self.fx, cx=self.cy, cy=self.width - self.cx,
                                width=self.height, height=self.width)

    def cropped(self, top: int, left: int, height: int, width: int) -> 'CameraIntrinsics':
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx - left, cy=self.cy - top,
                                width=width, height=height)

    def padded(self, height: int, width: int) -> 'CameraIntrinsics':
        """Дополнение снизу/справа: главная точка не смещается."""
        return dataclasses.replace(self, width=width, height=height)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'CameraIntrinsics':
        return cls(fx=float(data['fx']), fy=float(data['fy']), cx=float(data['cx']), cy=float(data['cy']),
                   width=int(data['width']), height=int(data['height']))


def intrinsics_scale(intrinsics: CameraIntrinsics, k: int) -> CameraIntrinsics:
    if k < 1 or intrinsics.width % k or intrinsics.height % k:
        raise ContractError(f"Разрешение {intrinsics.width}x{intrinsics.height} не делится на {k}")
    return CameraIntrinsics(fx=intrinsics.fx / k, fy=intrinsics.fy / k, cx=intrinsics.cx / k, cy=intrinsics.cy / k,
                            width=intrinsics.width // k, height=intrinsics.height // k)


def _directions(intrinsics: CameraIntrinsics, u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    direction = np.stack([(u + 0.5 - intrinsics.cx) / intrinsics.fx,
                          (v + 0.5 - intrinsics.cy) / intrinsics.fy,
                          np.ones(np.broadcast_shapes(u.shape, v.shape))], axis=-1)
    return direction / np.linalg.norm(direction, axis=-1, keepdims=True)


def pixel_ray(intrinsics: CameraIntrinsics, u: float, v: float) -> np.ndarray:
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ContractError(f"Пиксель ({u}, {v}) вне кадра {intrinsics.width}x{intrinsics.height}")
    return _directions(intrinsics, u, v)


def ray_grid(intrinsics: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    return _directions(intrinsics, u, v)


def pixel_rays(intrinsics: CameraIntrinsics, pixel_index: np.ndarray) -> np.ndarray:
    v, u = np.divmod(np.asarray(pixel_index, dtype=np.int64), intrinsics.width)
    return _directions(intrinsics, u, v)


@dataclass
class RayPointCloud:
    rays: np.ndarray
    distance: Tensor
    pixel_index: np.ndarray
    intrinsics: Optional[CameraIntrinsics] = None
    features: Optional[Tensor] = None

    def __post_init__(self):
        self.rays = np.asarray(self.rays, dtype=np.float64).reshape(-1, 3)
        self.distance = T.as_tensor(self.distance)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64)
        n = self.rays.shape[0]
        if self.distance.shape != (n,) or self.pixel_index.shape != (n,):
            raise ContractError(f"Облако: {n} лучей, расстояний {self.distance.shape}, "
                                f"индексов {self.pixel_index.shape}")
        if n and np.max(np.abs(np.linalg.norm(self.rays, axis=1) - 1.0)) > RAY_NORM_TOLERANCE:
            raise ContractError("Лучи облака должны быть единичными")
        if self.features is not None and self.features.shape[0] != n:
            raise ContractError(f"Признаков {self.features.shape[0]} на {n} точек")

    @classmethod
    def from_positions(cls, points: np.ndarray, pixel_index: Optional[np.ndarray] = None) -> 'RayPointCloud':
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        distance = np.linalg.norm(points, axis=1)
        if pixel_index is None:
            pixel_index = np.arange(points.shape[0])
        return cls(rays=points / distance[:, None], distance=Tensor(distance), pixel_index=pixel_index)

    @property
    def size(self) -> int:
        return self.rays.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.distance.data[:, None] * self.rays

    def position_tensor(self) -> Tensor:
        """Позиции как функция расстояний (дифференцируемо по distance)."""
        n = self.size
        column = T.broadcast_to(T.reshape(self.distance, (n, 1)), (n, 3))
        return T.mul(column, Tensor(self.rays.astype(self.distance.dtype)))

    def with_distance(self, distance: Tensor) -> 'RayPointCloud':
        return dataclasses.replace(self, distance=distance)

    def with_features(self, features: Tensor) -> 'RayPointCloud':
        return dataclasses.replace(self, features=features)

    def _grid(self) -> Tuple[int, int]:
        if self.intrinsics is None:
            raise ContractError("Облако без параметров камеры нельзя спроецировать")
        return self.intrinsics.shape


def backproject(dist_map, intrinsics: CameraIntrinsics, features: Optional[Tensor] = None) -> RayPointCloud:
    """P_{C→G}: одна точка на каждый пиксель с ненулевым конечным расстоянием."""
    dist_map = T.as_tensor(dist_map)
    height, width = intrinsics.shape
    if dist_map.shape != (height, width):
        raise ContractError(f"Карта {dist_map.shape} не совпадает с камерой {height}x{width}")
    valid = np.isfinite(dist_map.data) & (dist_map.data != 0)
    index = np.flatnonzero(valid)
    distance = T.take(T.reshape(dist_map, (height * width,)), index)
    if features is not None:
        features = T.take(T.reshape(features, (height * width, features.shape[-1])), index)
    rays = ray_grid(intrinsics).reshape(-1, 3)[index]
    return RayPointCloud(rays=rays, distance=distance, pixel_index=index, intrinsics=intrinsics, features=features)


def _check_unique(cloud: RayPointCloud):
    if np.unique(cloud.pixel_index).size != cloud.size:
        raise ContractError("В облаке повторяются индексы пикселей")


def project(cloud: RayPointCloud) -> Tuple[Tensor, np.ndarray]:
    """P_{G→C}: расстояние каждой точки в её пиксель; пустые пиксели 0 и mask=False."""
    height, width = cloud._grid()
    _check_unique(cloud)
    flat = T.segment_sum(cloud.distance, cloud.pixel_index, height * width)
    mask = np.zeros(height * width, dtype=bool)
    mask[cloud.pixel_index] = True
    return T.reshape(flat, (height, width)), mask.reshape(height, width)


def project_features(cloud: RayPointCloud) -> Tensor:
    height, width = cloud._grid()
    _check_unique(cloud)
    if cloud.features is None:
        raise ContractError("У облака нет признаков")
    channels = cloud.features.shape[1]
    flat = T.segment_sum(cloud.features, cloud.pixel_index, height * width)
    return T.reshape(flat, (height, width, channels))


def distance_to_zdepth(cloud: RayPointCloud) -> np.ndarray:
    height, width = cloud._grid()
    zdepth = np.zeros(height * width)
    zdepth[cloud.pixel_index] = cloud.distance.data * cloud.rays[:, 2]
    return zdepth.reshape(height, width)


def zdepth_to_distance(zdepth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    return np.asarray(zdepth, dtype=np.float64) / ray_grid(intrinsics)[..., 2]


def distance_map_to_zdepth(dist_map: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    return np.asarray(dist_map, dtype=np.float64) * ray_grid(intrinsics)[..., 2]


def pad_to_multiple(array: np.ndarray, k: int) -> np.ndarray:
    """Отражающее дополнение первых двух осей снизу/справа до кратности k."""
    height, width = array.shape[:2]
    pad = [(0, -height % k), (0, -width % k)] + [(0, 0)] * (array.ndim - 2)
    if not any(after for _, after in pad):
        return array
    return np.pad(array, pad, mode='reflect')
