"""
Настольный генератор сцен с многолучевой интерференцией.

Сцена это угол комнаты (задняя стена, пол, левая и иногда правая стена) и до
четырёх коробок или сфер. На каждый пиксель приходят два пути: прямой и один
диффузный переотражённый через случайную точку другой поверхности.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError
from .formats import read_json, read_rten, write_json, write_rten
from .geometry import CameraIntrinsics, ray_grid
from .network import Sample
from .tof import (AMPLITUDE_FLOOR, NOISE_GAIN, NOISE_INTERCEPT, CorrelationFrame, ModulationConfig, NoiseSource,
                  PathComponent, UnwrapPolicy, features_from_frame, max_distance, synthesize_taps)

logger = logging.getLogger(__name__)

SIGNAL_SCALE = 8000.0
SECONDARY_RETRIES = 4
SPLITS = ('train', 'val', 'test')
DATASET_VERSION = 1


@dataclass(frozen=True)
class Plane:
    """Точки x с normal·x = offset."""
    normal: Tuple[float, float, float]
    offset: float
    albedo: float

    def intersect(self, directions: np.ndarray) -> np.ndarray:
        denom = directions @ np.asarray(self.normal, dtype=np.float64)
        with np.errstate(divide='ignore', invalid='ignore'):
            t = self.offset / denom
        return np.where((denom != 0) & (t > 0), t, np.inf)

    def to_dict(self) -> dict:
        return {'kind': 'plane', 'normal': list(self.normal), 'offset': self.offset, 'albedo': self.albedo}


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    albedo: float

    def intersect(self, directions: np.ndarray) -> np.ndarray:
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = np.asarray(self.lo) / directions
            t2 = np.asarray(self.hi) / directions
        near = np.nanmax(np.minimum(t1, t2), axis=-1)
        far = np.nanmin(np.maximum(t1, t2), axis=-1)
        return np.where((near <= far) & (near > 0), near, np.inf)

    def to_dict(self) -> dict:
        return {'kind': 'box', 'lo': list(self.lo), 'hi': list(self.hi), 'albedo': self.albedo}


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    albedo: float

    def intersect(self, directions: np.ndarray) -> np.ndarray:
        center = np.asarray(self.center, dtype=np.float64)
        b = directions @ center
        disc = b * b - (center @ center - self.radius ** 2)
        t = b - np.sqrt(np.maximum(disc, 0.0))
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def to_dict(self) -> dict:
        return {'kind': 'sphere', 'center': list(self.center), 'radius': self.radius, 'albedo': self.albedo}


@dataclass(frozen=True)
class SceneSpec:
    surfaces: Tuple = ()
    g_mpi: float = 0.0
    rotation: Tuple[Tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        if not self.surfaces:
            raise ContractError("Сцена без поверхностей")
        if self.g_mpi < 0:
            raise ContractError(f"g_mpi должно быть >= 0, получено {self.g_mpi}")

    def to_dict(self) -> dict:
        return {'surfaces': [s.to_dict() for s in self.surfaces], 'g_mpi': self.g_mpi,
                'rotation': [list(row) for row in self.rotation]}


@dataclass(frozen=True)
class DomainParams:
    label: str = 'source'
    noise_gain: float = NOISE_GAIN
    noise_intercept: float = NOISE_INTERCEPT
    g_range: Tuple[float, float] = (0.0, 0.3)
    albedo_range: Tuple[float, float] = (0.2, 1.0)
    signal_scale: float = SIGNAL_SCALE

    def __post_init__(self):
        for name in ('g_range', 'albedo_range'):
            low, high = getattr(self, name)
            if low > high:
                raise ContractError(f"{name}: нижняя граница {low} больше верхней {high}")
        if not 0 < self.albedo_range[0]:
            raise ContractError(f"Альбедо должно быть > 0: {self.albedo_range}")

    @classmethod
    def source(cls) -> 'DomainParams':
        return cls()

    @classmethod
    def target(cls) -> 'DomainParams':
        """Больше переотражений и тёмных материалов, чуть сильнее шум."""
        return cls(label='target', noise_gain=0.45, g_range=(0.2, 0.6), albedo_range=(0.05, 0.6))

    @classmethod
    def by_label(cls, label: str) -> 'DomainParams':
        if label == 'source':
            return cls.source()
        if label == 'target':
            return cls.target()
        raise ContractError(f"Неизвестный домен {label!r}")

    def to_dict(self) -> dict:
        return {'label': self.label, 'noise_gain': self.noise_gain, 'noise_intercept': self.noise_intercept,
                'g_range': list(self.g_range), 'albedo_range': list(self.albedo_range),
                'signal_scale': self.signal_scale}

    @classmethod
    def from_dict(cls, data: dict) -> 'DomainParams':
        return cls(label=data['label'], noise_gain=data['noise_gain'], noise_intercept=data['noise_intercept'],
                   g_range=tuple(data['g_range']), albedo_range=tuple(data['albedo_range']),
                   signal_scale=data.get('signal_scale', SIGNAL_SCALE))


def _rotation(yaw: float, pitch: float) -> np.ndarray:
    cy, sy, cp, sp = np.cos(yaw), np.sin(yaw), np.cos(pitch), np.sin(pitch)
    around_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    around_x = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return around_y @ around_x


def sample_scene(rng: np.random.Generator, domain: DomainParams) -> SceneSpec:
    albedo = lambda: float(rng.uniform(*domain.albedo_range))  # noqa: E731
    back = float(rng.uniform(3.0, 4.5))
    floor = float(rng.uniform(0.8, 1.3))
    surfaces = [
        Plane((0.0, 0.0, 1.0), back, albedo()),
        Plane((0.0, 1.0, 0.0), floor, albedo()),
        Plane((1.0, 0.0, 0.0), -float(rng.uniform(1.0, 1.8)), albedo()),
    ]
    if rng.random() < 0.5:
        surfaces.append(Plane((1.0, 0.0, 0.0), float(rng.uniform(1.0, 1.8)), albedo()))
    for _ in range(int(rng.integers(0, 5))):
        x, z = float(rng.uniform(-0.8, 0.8)), float(rng.uniform(1.5, back - 0.5))
        if rng.random() < 0.5:
            half = float(rng.uniform(0.1, 0.3))
            surfaces.append(Box((x - half, floor - 2 * half, z - half), (x + half, floor, z + half), albedo()))
        else:
            radius = float(rng.uniform(0.15, 0.4))
            surfaces.append(Sphere((x, floor - radius, z), radius, albedo()))
    g_mpi = float(rng.uniform(*domain.g_range))
    rotation = _rotation(*np.radians(rng.uniform(-3.0, 3.0, size=2)))
    return SceneSpec(surfaces=tuple(surfaces), g_mpi=g_mpi, rotation=tuple(map(tuple, rotation)))


@dataclass
class RaycastResult:
    distance: np.ndarray
    surface: np.ndarray
    albedo: np.ndarray
    points: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.surface >= 0


def raycast_scene(scene: SceneSpec, intrinsics: CameraIntrinsics) -> RaycastResult:
    """Ближайшее положительное пересечение для каждого пикселя; промах даёт distance 0, surface -1."""
    directions = ray_grid(intrinsics) @ np.asarray(scene.rotation).T
    hits = np.stack([surface.intersect(directions) for surface in scene.surfaces])
    nearest = np.argmin(hits, axis=0)
    distance = np.take_along_axis(hits, nearest[None], axis=0)[0]
    valid = np.isfinite(distance)
    albedos = np.array([s.albedo for s in scene.surfaces])
    distance = np.where(valid, distance, 0.0)
    return RaycastResult(distance=distance, surface=np.where(valid, nearest, -1),
                         albedo=np.where(valid, albedos[nearest], 0.0), points=distance[..., None] * directions)


def render_components(scene: SceneSpec, intrinsics: CameraIntrinsics, config: ModulationConfig,
                      rng: np.random.Generator, signal_scale: float = SIGNAL_SCALE,
                      hits: Optional[RaycastResult] = None) -> List[PathComponent]:
    """
    Прямой путь (A ∝ albedo/d²) и, при g_mpi > 0, один переотражённый путь через
    случайную видимую точку другой поверхности.
    """
    hits = hits or raycast_scene(scene, intrinsics)
    valid = hits.valid
    safe = np.where(valid, hits.distance, 1.0)
    amplitude = np.where(valid, signal_scale * hits.albedo / safe ** 2, 0.0)
    components = [PathComponent.from_distance(amplitude, amplitude, hits.distance, config)]
    if scene.g_mpi <= 0:
        return components

    flat_valid = np.flatnonzero(valid)
    surface = hits.surface.reshape(-1)
    points = hits.points.reshape(-1, 3)
    candidates = flat_valid[rng.integers(0, flat_valid.size, size=(flat_valid.size, SECONDARY_RETRIES))]
    other = surface[candidates] != surface[flat_valid][:, None]
    has_other = other.any(axis=1)
    secondary = candidates[np.arange(flat_valid.size), np.argmax(other, axis=1)]

    first = points[flat_valid]
    second = points[secondary]
    path = (np.linalg.norm(second, axis=1) + np.linalg.norm(second - first, axis=1)
            + np.linalg.norm(first, axis=1)) / 2.0
    direct = hits.distance.reshape(-1)[flat_valid]
    limit = max_distance(min(config.frequencies), config.speed_of_light) / 2.0
    keep = has_other & (path - direct < limit)
    dropped = int(np.count_nonzero(has_other & ~keep))
    if dropped:
        logger.debug(f"Отброшено непрямых путей с разностью фаз >= π: {dropped}")

    albedo = hits.albedo.reshape(-1)
    indirect_amplitude = np.zeros(valid.size)
    indirect_distance = np.zeros(valid.size)
    indirect_amplitude[flat_valid] = np.where(
        keep, signal_scale * scene.g_mpi * albedo[flat_valid] * albedo[secondary] / path ** 2, 0.0)
    indirect_distance[flat_valid] = path
    indirect_amplitude = indirect_amplitude.reshape(valid.shape)
    components.append(PathComponent.from_distance(indirect_amplitude, indirect_amplitude,
                                                  indirect_distance.reshape(valid.shape), config))
    return components


@dataclass
class RenderedSample:
    frame: CorrelationFrame
    gt_distance: np.ndarray
    mask: np.ndarray


def render_sample(scene: SceneSpec, intrinsics: CameraIntrinsics, config: ModulationConfig,
                  rng: np.random.Generator, signal_scale: float = SIGNAL_SCALE) -> RenderedSample:
    hits = raycast_scene(scene, intrinsics)
    components = render_components(scene, intrinsics, config, rng, signal_scale, hits)
    frame = synthesize_taps(components, config, intrinsics.shape)
    return RenderedSample(frame=frame, gt_distance=hits.distance, mask=hits.valid)


def split_counts(n: int) -> Tuple[int, int, int]:
    held_out = n // 10
    return n - 2 * held_out, held_out, held_out


def baseline_mae(samples: Sequence[Sample]) -> float:
    """Средняя по сэмплам MAE развёрнутого ToF-расстояния d_1 относительно gt."""
    errors = [np.mean(np.abs(s.features.init_distance[s.mask] - s.gt_distance[s.mask]))
              for s in samples if s.mask.any()]
    return float(np.mean(errors)) if errors else float('nan')


def generate_dataset(n: int, domain: DomainParams, intrinsics: CameraIntrinsics, out_dir: Path, seed: int,
                     config: Optional[ModulationConfig] = None, policy: UnwrapPolicy = UnwrapPolicy(),
                     amplitude_floor: float = AMPLITUDE_FLOOR) -> dict:
    """
    Пишет <out_dir>/<split>/<id>/{taps,gt,mask}.rten + meta.json и manifest.json.
    Отсчёты сохраняются без шума: шум добавляется при загрузке.
    """
    if n < 1:
        raise ContractError(f"Число сцен должно быть >= 1, получено {n}")
    config = config or ModulationConfig.uniform()
    out_dir = Path(out_dir)
    counts = split_counts(n)
    split_of = [name for name, count in zip(SPLITS, counts) for _ in range(count)]
    manifest = {
        'version': DATASET_VERSION,
        'seed': seed,
        'domain': domain.to_dict(),
        'intrinsics': intrinsics.to_dict(),
        'modulation': config.to_dict(),
        'counts': dict(zip(SPLITS, counts)),
        'splits': {name: [] for name in SPLITS},
    }
    clean_errors = {name: [] for name in SPLITS}
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        scene = sample_scene(rng, domain)
        rendered = render_sample(scene, intrinsics, config, rng, domain.signal_scale)
        sample_id = f'{index:05d}'
        split = split_of[index]
        sample_dir = out_dir / split / sample_id
        write_rten(sample_dir / 'taps.rten', rendered.frame.taps.astype(np.float32))
        write_rten(sample_dir / 'gt.rten', rendered.gt_distance.astype(np.float32))
        write_rten(sample_dir / 'mask.rten', rendered.mask.astype(np.float32))
        write_json(sample_dir / 'meta.json', {
            'sample_id': sample_id,
            'index': index,
            'split': split,
            'seed': seed,
            'intrinsics': intrinsics.to_dict(),
            'modulation': config.to_dict(),
            'domain': domain.to_dict(),
            'scene': scene.to_dict(),
        })
        manifest['splits'][split].append(sample_id)
        features = features_from_frame(rendered.frame, policy, amplitude_floor)
        mask = rendered.mask & features.valid
        if mask.any():
            clean_errors[split].append(float(np.mean(np.abs(features.init_distance[mask]
                                                            - rendered.gt_distance[mask]))))
    manifest['clean_baseline_mae_m'] = {name: float(np.mean(v)) if v else None for name, v in clean_errors.items()}
    write_json(out_dir / 'manifest.json', manifest)
    logger.info(f"Датасет {out_dir}: {dict(zip(SPLITS, counts))}, домен {domain.label}, "
                f"MAE базового ToF без шума (test) {manifest['clean_baseline_mae_m']['test']}")
    return manifest


def load_sample(sample_dir: Path, noise: Optional[DomainParams] = None, rng=None,
                policy: UnwrapPolicy = UnwrapPolicy(), amplitude_floor: float = AMPLITUDE_FLOOR,
                online_noise: bool = False) -> Sample:
    """
    Читает сэмпл; при noise добавляет шум сенсора с параметрами домена.
    online_noise оставляет в сэмпле кадр без шума, чтобы обучение зашумляло его заново.
    """
    sample_dir = Path(sample_dir)
    meta = read_json(sample_dir / 'meta.json')
    config = ModulationConfig.from_dict(meta['modulation'])
    frame = CorrelationFrame(taps=read_rten(sample_dir / 'taps.rten').astype(np.float64), config=config)
    source = None
    if noise is not None:
        source = NoiseSource(frame, noise.noise_gain, noise.noise_intercept, policy, amplitude_floor)
        features = source.draw(rng)
    else:
        features = features_from_frame(frame, policy, amplitude_floor)
    return Sample(features=features,
                  gt_distance=read_rten(sample_dir / 'gt.rten').astype(np.float64),
                  mask=read_rten(sample_dir / 'mask.rten') > 0.5,
                  intrinsics=CameraIntrinsics.from_dict(meta['intrinsics']), sample_id=meta['sample_id'],
                  noise_source=source if online_noise else None)


def load_split(dataset_dir: Path, split: str, seed: int = 0, noisy: bool = True,
               policy: UnwrapPolicy = UnwrapPolicy(), amplitude_floor: float = AMPLITUDE_FLOOR,
               online_noise: bool = False) -> List[Sample]:
    """
    Шум каждого сэмпла детерминирован: генератор от (seed, номер сцены). С online_noise
    эти признаки остаются видом сэмпла для оценки и псевдо-меток, а на шагах обучения
    шум берётся заново.
    """
    dataset_dir = Path(dataset_dir)
    manifest = read_json(dataset_dir / 'manifest.json')
    if split not in manifest['splits']:
        raise ContractError(f"В датасете {dataset_dir} нет сплита {split!r}")
    if online_noise and not noisy:
        raise ContractError("online_noise требует зашумлённой загрузки")
    domain = DomainParams.from_dict(manifest['domain'])
    samples = []
    for sample_id in manifest['splits'][split]:
        rng = np.random.default_rng([seed, int(sample_id)])
        samples.append(load_sample(dataset_dir / split / sample_id, domain if noisy else None, rng,
                                   policy, amplitude_floor, online_noise))
    logger.info(f"Загружено {len(samples)} сэмплов: {dataset_dir}/{split}")
    return samples
