"""
Аугментации обучающих сэмплов. gt и маска преобразуются вместе со входом,
шум добавляется только к входным каналам.
"""
import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ContractError
from .network import Sample
from .tof import FeatureStack


@dataclass(frozen=True)
class AugmentConfig:
    mirror: bool = True
    rotate90: bool = True
    small_rotation_deg: float = 5.0
    noise_std: float = 0.02
    crop: Optional[Tuple[int, int]] = None
    sensor_noise: bool = True

    def __post_init__(self):
        if self.small_rotation_deg < 0 or self.noise_std < 0:
            raise ContractError(f"Параметры аугментации должны быть >= 0: {self}")

    @classmethod
    def disabled(cls) -> 'AugmentConfig':
        return cls(mirror=False, rotate90=False, small_rotation_deg=0.0, noise_std=0.0, crop=None, sensor_noise=False)


def _map_arrays(sample: Sample, fn: Callable[[np.ndarray], np.ndarray], intrinsics) -> Sample:
    features = sample.features
    channels = np.moveaxis(fn(np.moveaxis(features.channels, 0, -1)), -1, 0)
    stack = FeatureStack(channels=np.ascontiguousarray(channels),
                         init_distance=np.ascontiguousarray(fn(features.init_distance)),
                         valid=np.ascontiguousarray(fn(features.valid)))
    return Sample(features=stack, gt_distance=np.ascontiguousarray(fn(sample.gt_distance)),
                  mask=np.ascontiguousarray(fn(sample.mask)), intrinsics=intrinsics, sample_id=sample.sample_id)


def mirror(sample: Sample, horizontal: bool) -> Sample:
    axis = 1 if horizontal else 0
    return _map_arrays(sample, lambda a: np.flip(a, axis=axis), sample.intrinsics.flipped(horizontal))


def rotate_quarter(sample: Sample, quarters: int) -> Sample:
    """Поворот на quarters·90° против часовой вместе с параметрами камеры."""
    quarters %= 4
    intrinsics = sample.intrinsics
    for _ in range(quarters):
        intrinsics = intrinsics.rotated90()
    return _map_arrays(sample, lambda a: np.rot90(a, quarters, axes=(0, 1)), intrinsics)


def rotate_small(sample: Sample, angle_deg: float) -> Sample:
    """Поворот на произвольный угол, пустые края заполняются ближайшим значением."""

    def rotate(a):
        source = a.astype(np.uint8) if a.dtype == bool else a
        out = ndimage.rotate(source, angle_deg, axes=(1, 0), reshape=False, order=0, mode='nearest')
        return out.astype(bool) if a.dtype == bool else out

    return _map_arrays(sample, rotate, sample.intrinsics)


def crop(sample: Sample, top: int, left: int, height: int, width: int) -> Sample:
    full_height, full_width = sample.features.grid_shape
    if height > full_height or width > full_width or height < 1 or width < 1:
        raise ContractError(f"Кроп {height}x{width} больше кадра {full_height}x{full_width}")
    if not (0 <= top <= full_height - height and 0 <= left <= full_width - width):
        raise ContractError(f"Кроп ({top}, {left}) выходит за кадр")
    return _map_arrays(sample, lambda a: a[top:top + height, left:left + width],
                       sample.intrinsics.cropped(top, left, height, width))


def add_relative_noise(sample: Sample, std: float, rng: np.random.Generator) -> Sample:
    features = sample.features
    channels = features.channels + features.channels * std * rng.standard_normal(features.channels.shape)
    stack = FeatureStack(channels=channels, init_distance=channels[0].copy(), valid=features.valid)
    return Sample(features=stack, gt_distance=sample.gt_distance, mask=sample.mask,
                  intrinsics=sample.intrinsics, sample_id=sample.sample_id)


def redraw_sensor_noise(sample: Sample, rng: np.random.Generator) -> Sample:
    """Новый шум сенсора поверх кадра без шума; маска сужается по валидности нового кадра."""
    if sample.noise_source is None:
        return sample
    return dataclasses.replace(sample, features=sample.noise_source.draw(rng))


def augment(sample: Sample, rng: np.random.Generator, config: AugmentConfig) -> Sample:
    """Случайные аугментации с независимыми бросками монеты; детерминированы для rng."""
    if config.sensor_noise:
        # до геометрии: кадр без шума хранится в исходной ориентации
        sample = redraw_sensor_noise(sample, rng)
    if config.crop is not None:
        height, width = config.crop
        full_height, full_width = sample.features.grid_shape
        if height > full_height or width > full_width:
            raise ContractError(f"Кроп {height}x{width} больше кадра {full_height}x{full_width}")
        sample = crop(sample, int(rng.integers(0, full_height - height + 1)),
                      int(rng.integers(0, full_width - width + 1)), height, width)
    if config.mirror:
        if rng.random() < 0.5:
            sample = mirror(sample, horizontal=True)
        if rng.random() < 0.5:
            sample = mirror(sample, horizontal=False)
    if config.rotate90:
        quarters = int(rng.integers(0, 4))
        if quarters:
            sample = rotate_quarter(sample, quarters)
    if config.small_rotation_deg > 0 and rng.random() < 0.5:
        sample = rotate_small(sample, float(rng.uniform(-config.small_rotation_deg, config.small_rotation_deg)))
    if config.noise_std > 0:
        sample = add_relative_noise(sample, config.noise_std, rng)
    return sample
