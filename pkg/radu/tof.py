"""
AMCW ToF: синтез корреляционных отсчётов, восстановление фазора, перевод фазы в
расстояние, разворачивание фазы по двум частотам, шум сенсора и пятиканальные
входные признаки сети.

Отсчёт при сдвиге θ: m_θ = I + A·cos(Δφ + θ); несколько путей света складываются.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_FREQUENCIES = (70e6, 20e6, 50e6)
DEFAULT_PHASE_OFFSETS = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
AMPLITUDE_FLOOR = 1e-6
NOISE_GAIN = 0.33
NOISE_INTERCEPT = -18.4
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ModulationConfig:
    frequencies: Tuple[float, ...] = DEFAULT_FREQUENCIES
    phase_offsets: Tuple[float, ...] = DEFAULT_PHASE_OFFSETS
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, 'frequencies', tuple(float(f) for f in self.frequencies))
        object.__setattr__(self, 'phase_offsets', tuple(float(t) for t in self.phase_offsets))
        if not self.frequencies or any(f <= 0 for f in self.frequencies):
            raise ContractError(f"Частоты модуляции должны быть > 0: {self.frequencies}")
        offsets = np.asarray(self.phase_offsets)
        count = offsets.size
        if count < 2 or np.unique(offsets).size != count:
            raise ContractError("Нужно не меньше двух различных фазовых сдвигов")
        steps = np.diff(np.append(offsets, offsets[0] + TWO_PI))
        if offsets[0] < 0 or offsets[0] >= TWO_PI / count or not np.allclose(steps, TWO_PI / count):
            raise ContractError(f"Фазовые сдвиги должны равномерно покрывать [0, 2π): {self.phase_offsets}")

    @classmethod
    def uniform(cls, frequencies: Sequence[float] = DEFAULT_FREQUENCIES, phases: int = 4) -> 'ModulationConfig':
        return cls(frequencies=tuple(frequencies), phase_offsets=tuple(TWO_PI * k / phases for k in range(phases)))

    def max_distance(self, index: int) -> float:
        return max_distance(self.frequencies[index], self.speed_of_light)

    def to_dict(self) -> dict:
        return {'frequencies': list(self.frequencies), 'phase_offsets': list(self.phase_offsets),
                'speed_of_light': self.speed_of_light}

    @classmethod
    def from_dict(cls, data: dict) -> 'ModulationConfig':
        return cls(frequencies=tuple(data['frequencies']), phase_offsets=tuple(data['phase_offsets']),
                   speed_of_light=data.get('speed_of_light', SPEED_OF_LIGHT))


@dataclass(frozen=True)
class PathComponent:
    """Один путь света на сетке пикселей; phase имеет ведущую ось частот."""
    intensity: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        for name in ('intensity', 'amplitude', 'phase'):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.amplitude < 0):
            raise ContractError("Амплитуда пути не может быть отрицательной")
        if np.any(self.intensity < self.amplitude - 1e-12 * np.maximum(1.0, np.abs(self.amplitude))):
            raise ContractError("Интенсивность пути должна быть не меньше амплитуды (I >= A)")

    @classmethod
    def from_distance(cls, intensity, amplitude, distance, config: ModulationConfig) -> 'PathComponent':
        distance = np.asarray(distance, dtype=np.float64)
        phase = np.stack([distance_to_phase(distance, f, config.speed_of_light) for f in config.frequencies])
        return cls(intensity=intensity, amplitude=amplitude, phase=phase)

    def grid_shape(self) -> tuple:
        return np.broadcast_shapes(self.intensity.shape, self.amplitude.shape, self.phase.shape[1:])


@dataclass
class CorrelationFrame:
    taps: np.ndarray
    config: ModulationConfig = field(default_factory=ModulationConfig)

    def __post_init__(self):
        self.taps = np.asarray(self.taps)
        expected = (len(self.config.frequencies), len(self.config.phase_offsets))
        if self.taps.ndim != 4 or self.taps.shape[:2] != expected:
            raise ContractError(f"Отсчёты формы {self.taps.shape}, ожидается {expected} + (H, W)")

    @property
    def grid_shape(self) -> tuple:
        return self.taps.shape[2:]


@dataclass
class PhasorMap:
    intensity: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    valid: np.ndarray
    frequencies: Tuple[float, ...] = DEFAULT_FREQUENCIES
    speed_of_light: float = SPEED_OF_LIGHT


@dataclass
class FeatureStack:
    """(d_1, d_2 - d_1, d_3 - d_1, A_2/A_1 - 1, A_3/A_1 - 1) и исходное расстояние d_1."""
    channels: np.ndarray
    init_distance: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != 5:
            raise ContractError(f"Ожидается 5 каналов [5, H, W], получено {self.channels.shape}")
        if self.init_distance.shape != self.channels.shape[1:] or self.valid.shape != self.channels.shape[1:]:
            raise ContractError("Размеры init_distance/valid не совпадают с каналами")

    @property
    def grid_shape(self) -> tuple:
        return self.channels.shape[1:]


@dataclass(frozen=True)
class UnwrapPolicy:
    """
    reference: индекс частоты, относительно которой разворачиваются targets;
    None отключает разворачивание.
    """
    reference: Optional[int] = 1
    targets: Tuple[int, ...] = (0, 2)

    @classmethod
    def none(cls) -> 'UnwrapPolicy':
        return cls(reference=None, targets=())


def max_distance(frequency: float, speed_of_light: float = SPEED_OF_LIGHT) -> float:
    if frequency <= 0:
        raise ContractError(f"Частота должна быть > 0, получено {frequency}")
    return speed_of_light / (2.0 * frequency)


def phase_to_distance(phase, frequency: float, speed_of_light: float = SPEED_OF_LIGHT):
    if frequency <= 0:
        raise ContractError(f"Частота должна быть > 0, получено {frequency}")
    return speed_of_light * np.asarray(phase, dtype=np.float64) / (4.0 * math.pi * frequency)


def distance_to_phase(distance, frequency: float, speed_of_light: float = SPEED_OF_LIGHT):
    if frequency <= 0:
        raise ContractError(f"Частота должна быть > 0, получено {frequency}")
    return _wrap_phase(4.0 * math.pi * frequency * np.asarray(distance, dtype=np.float64) / speed_of_light)


def _wrap_phase(phase):
    phase = np.mod(phase, TWO_PI)
    return np.where(phase >= TWO_PI, 0.0, phase)


def synthesize_taps(components: Sequence[PathComponent], config: ModulationConfig,
                    shape: Optional[tuple] = None) -> CorrelationFrame:
    """m_θ[f] = Σ_путей (I + A·cos(Δφ(f) + θ)); без путей нулевой кадр."""
    theta = np.asarray(config.phase_offsets)[None, :, None, None]
    count = len(config.frequencies)
    if components:
        shape = np.broadcast_shapes(*(c.grid_shape() for c in components))
    shape = tuple(shape or (1, 1))
    taps = np.zeros((count, theta.shape[1]) + shape, dtype=np.float64)
    for component in components:
        if component.phase.shape[0] != count:
            raise ContractError(f"Фаза пути задана для {component.phase.shape[0]} частот, нужно {count}")
        phase = np.broadcast_to(component.phase, (count,) + shape)[:, None]
        intensity = np.broadcast_to(component.intensity, shape)
        amplitude = np.broadcast_to(component.amplitude, shape)
        taps += intensity + amplitude * np.cos(phase + theta)
    return CorrelationFrame(taps=taps, config=config)


def recover_phasor(frame: CorrelationFrame, amplitude_floor: float = AMPLITUDE_FLOOR) -> PhasorMap:
    """
    Re(v) = Σ -sin(θ)·m_θ, Im(v) = Σ cos(θ)·m_θ, Δφ = atan2(Re, Im) в [0, 2π),
    A = (2/P)·|v|, I = среднее отсчётов.
    """
    theta = np.asarray(frame.config.phase_offsets)
    count = theta.size
    if count < 3:
        raise ContractError(f"Для восстановления (I, A, Δφ) нужно >= 3 фазовых сдвигов, задано {count}")
    taps = frame.taps.astype(np.float64, copy=False)
    real = np.tensordot(-np.sin(theta), taps, axes=([0], [1]))
    imag = np.tensordot(np.cos(theta), taps, axes=([0], [1]))
    phase = np.arctan2(real, imag)
    phase = _wrap_phase(np.where(phase < 0, phase + TWO_PI, phase))
    amplitude = (2.0 / count) * np.hypot(real, imag)
    intensity = taps.mean(axis=1)
    valid = np.all(amplitude >= amplitude_floor, axis=0)
    return PhasorMap(intensity=intensity, amplitude=amplitude, phase=phase, valid=valid,
                     frequencies=frame.config.frequencies, speed_of_light=frame.config.speed_of_light)


def unwrap_orders(d_a, f_a: float, d_b, f_b: float, max_orders: Tuple[int, int] = (1, 4),
                  speed_of_light: float = SPEED_OF_LIGHT):
    """
    Порядки (m, n), минимизирующие |d_a + m·d_max(f_a) - (d_b + n·d_max(f_b))|.
    При равенстве побеждает лексикографически меньшая пара.
    """
    d_a = np.asarray(d_a, dtype=np.float64)
    d_b = np.asarray(d_b, dtype=np.float64)
    orders_a, orders_b = max_orders
    candidates_a = d_a[..., None] + np.arange(orders_a + 1) * max_distance(f_a, speed_of_light)
    candidates_b = d_b[..., None] + np.arange(orders_b + 1) * max_distance(f_b, speed_of_light)
    cost = np.abs(candidates_a[..., :, None] - candidates_b[..., None, :])
    best = np.argmin(cost.reshape(cost.shape[:-2] + (-1,)), axis=-1)
    return np.divmod(best, orders_b + 1)


def unwrap_two_freq(d_a, f_a: float, d_b, f_b: float, max_orders: Tuple[int, int] = (1, 4),
                    speed_of_light: float = SPEED_OF_LIGHT):
    m, n = unwrap_orders(d_a, f_a, d_b, f_b, max_orders, speed_of_light)
    unwrapped_a = np.asarray(d_a) + m * max_distance(f_a, speed_of_light)
    unwrapped_b = np.asarray(d_b) + n * max_distance(f_b, speed_of_light)
    return (unwrapped_a + unwrapped_b) / 2.0


def apply_sensor_noise(frame: CorrelationFrame, gain: float = NOISE_GAIN, intercept: float = NOISE_INTERCEPT,
                       rng=None) -> CorrelationFrame:
    """Аддитивный гауссов шум с дисперсией max(0, K·m + b) для каждого отсчёта."""
    if gain <= 0:
        raise ContractError(f"Усиление K должно быть > 0, получено {gain}")
    rng = np.random.default_rng(rng)
    taps = frame.taps.astype(np.float64)
    sigma = np.sqrt(np.maximum(0.0, gain * taps + intercept))
    noisy = taps + sigma * rng.standard_normal(taps.shape)
    return CorrelationFrame(taps=noisy.astype(frame.taps.dtype, copy=False), config=frame.config)


def fit_noise_model(means, variances) -> Tuple[float, float]:
    """Линейная регрессия дисперсии по среднему: (K, b)."""
    gain, intercept = np.polyfit(np.asarray(means, dtype=np.float64), np.asarray(variances, dtype=np.float64), 1)
    return float(gain), float(intercept)


def extract_features(phasors: PhasorMap, policy: UnwrapPolicy = UnwrapPolicy(),
                     amplitude_floor: float = AMPLITUDE_FLOOR) -> FeatureStack:
    if len(phasors.frequencies) < 3 or phasors.phase.shape[0] < 3:
        raise ContractError(f"Для признаков нужны три частоты, есть {phasors.phase.shape[0]}")
    c = phasors.speed_of_light
    distances = [phase_to_distance(phasors.phase[k], phasors.frequencies[k], c) for k in range(3)]
    if policy.reference is not None:
        ref = policy.reference
        ref_range = max_distance(phasors.frequencies[ref], c)
        for target in policy.targets:
            target_range = max_distance(phasors.frequencies[target], c)
            if target == ref or target_range >= ref_range:
                continue
            orders = (math.ceil(ref_range / target_range), 0)
            m, _ = unwrap_orders(distances[target], phasors.frequencies[target],
                                 distances[ref], phasors.frequencies[ref], orders, c)
            distances[target] = distances[target] + m * target_range

    amplitude = phasors.amplitude
    valid = phasors.valid & (amplitude[0] >= amplitude_floor)
    safe = np.where(valid, amplitude[0], 1.0)
    channels = np.stack([
        distances[0],
        distances[1] - distances[0],
        distances[2] - distances[0],
        amplitude[1] / safe - 1.0,
        amplitude[2] / safe - 1.0,
    ])
    channels = np.where(valid[None], channels, 0.0)
    return FeatureStack(channels=channels, init_distance=channels[0].copy(), valid=valid)


def features_from_frame(frame: CorrelationFrame, policy: UnwrapPolicy = UnwrapPolicy(),
                        amplitude_floor: float = AMPLITUDE_FLOOR) -> FeatureStack:
    return extract_features(recover_phasor(frame, amplitude_floor), policy, amplitude_floor)


@dataclass(frozen=True)
class NoiseSource:
    """Кадр без шума и модель шума сенсора: каждый draw даёт новые признаки."""
    frame: CorrelationFrame
    gain: float = NOISE_GAIN
    intercept: float = NOISE_INTERCEPT
    policy: UnwrapPolicy = UnwrapPolicy()
    amplitude_floor: float = AMPLITUDE_FLOOR

    def draw(self, rng) -> FeatureStack:
        noisy = apply_sensor_noise(self.frame, self.gain, self.intercept, rng)
        return features_from_frame(noisy, self.policy, self.amplitude_floor)
