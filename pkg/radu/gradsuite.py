"""
Наборы проверок градиентов конечными разностями (f64, шаг 1e-6, tol 1e-5).

Каждый набор строит маленькие случайные входы из своего генератора и
возвращает список GradCheckReport.
"""
import logging
from typing import Callable, Dict, List

import numpy as np

from . import tensor as T
from .geometry import CameraIntrinsics, RayPointCloud, pixel_rays
from .network import ModelParams, NetworkConfig, Sample, coarse_fine_loss, conv2d, forward
from .pointconv import (KernelMLP, block_pool, density_estimate, mc_conv_forward, pool_2_5d, radius_neighbors,
                        radu_update, upsample_bilinear)
from .tensor import GradCheckReport, Tensor, grad_check
from .tof import FeatureStack

logger = logging.getLogger(__name__)

STEP = 1e-6
TOL = 1e-5


def _away_from_zero(rng: np.random.Generator, shape, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _check(op: Callable, inputs, name: str) -> GradCheckReport:
    return grad_check(op, inputs, step=STEP, tol=TOL, name=name)


def suite_elementwise(rng: np.random.Generator) -> List[GradCheckReport]:
    a, b = _away_from_zero(rng, (3, 4)), _away_from_zero(rng, (3, 4))
    return [
        _check(lambda x, y: T.mul(T.add(x, y), T.sub(x, y)), [a, b], 'add/sub/mul'),
        _check(lambda x: T.tanh(x), [a], 'tanh'),
        _check(lambda x: T.leaky_relu(x), [a], 'leaky_relu'),
        _check(lambda x: T.absolute(x), [a], 'absolute'),
        _check(lambda x: T.mean(T.mul(x, x)), [a], 'mean'),
    ]


def suite_linear(rng: np.random.Generator) -> List[GradCheckReport]:
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    index = np.array([0, 2, 2, 4, 1])
    return [
        _check(lambda xx, ww, bb: T.linear(xx, ww, bb), [x, w, b], 'linear'),
        _check(lambda xx: T.segment_sum(T.take(xx, index), np.array([0, 1, 1, 0, 2]), 3), [x], 'take/segment_sum'),
        _check(lambda xx: T.transpose(T.reshape(T.concat([xx, xx], axis=1), (5, 2, 3)), (2, 0, 1)), [x],
               'concat/reshape/transpose'),
        _check(lambda xx: T.broadcast_to(T.getitem(xx, (slice(None), slice(0, 1))), (5, 3)), [x],
               'getitem/broadcast_to'),
    ]


def suite_conv2d(rng: np.random.Generator) -> List[GradCheckReport]:
    x, kernel, bias = rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    return [_check(conv2d, [x, kernel, bias], 'conv2d')]


def _test_cloud(rng: np.random.Generator, channels: int) -> RayPointCloud:
    intrinsics = CameraIntrinsics(fx=20.0, fy=20.0, cx=2.0, cy=2.0, width=4, height=4)
    index = np.arange(16)
    distance = 2.0 + 0.05 * rng.normal(size=16)
    return RayPointCloud(rays=pixel_rays(intrinsics, index), distance=Tensor(distance), pixel_index=index,
                         intrinsics=intrinsics, features=Tensor(rng.normal(size=(16, channels))))


def suite_mc_conv(rng: np.random.Generator) -> List[GradCheckReport]:
    cin, cout, radius = 3, 2, 0.25
    cloud = _test_cloud(rng, cin)
    graph = radius_neighbors(cloud, radius)
    pde = density_estimate(cloud, graph)
    kernel = KernelMLP.init(cin, cout, rng, hidden=5)
    weights = [kernel.w1.data, kernel.b1.data + 0.1 * rng.normal(size=5), kernel.w2.data,
               0.1 * rng.normal(size=kernel.b2.shape)]

    def conv(features, distance, w1, b1, w2, b2):
        layer = KernelMLP(w1=w1, b1=b1, w2=w2, b2=b2, in_channels=cin, out_channels=cout)
        out, u = mc_conv_forward(features, cloud.with_distance(distance), graph, pde, layer, radius)
        return T.concat([out, T.reshape(u, (cloud.size, 1))], axis=1)

    inputs = [cloud.features.data, cloud.distance.data] + weights
    return [_check(conv, inputs, 'mc_conv (признаки, расстояния, веса ядра)')]


def suite_radu_update(rng: np.random.Generator) -> List[GradCheckReport]:
    cloud = _test_cloud(rng, 1)
    u = rng.normal(size=cloud.size)
    return [_check(lambda d, uu: radu_update(cloud.with_distance(d), uu, 0.1).distance,
                   [cloud.distance.data, u], 'radu_update')]


def suite_pool(rng: np.random.Generator) -> List[GradCheckReport]:
    intrinsics = CameraIntrinsics.from_fov(4, 4)
    distance = rng.uniform(1.0, 3.0, size=(4, 4))
    features = rng.normal(size=(4, 4, 2))
    valid = np.ones((4, 4), dtype=bool)
    valid[0, 0] = False

    def pooled(mode):
        def op(d, f):
            cloud = pool_2_5d(d, f, intrinsics, 2, mode, valid)
            return T.concat([T.reshape(cloud.distance, (cloud.size, 1)), cloud.features], axis=1)
        return op

    return [
        _check(pooled('average'), [distance, features], 'pool_2_5d average'),
        _check(pooled('max'), [distance, features], 'pool_2_5d max'),
        _check(lambda v: block_pool(v, valid, 2, 'average')[0], [features], 'block_pool'),
    ]


def suite_upsample(rng: np.random.Generator) -> List[GradCheckReport]:
    coarse = rng.normal(size=(3, 2, 2))
    weights = Tensor(rng.normal(size=(6, 4, 2)))
    return [_check(lambda c: T.mul(upsample_bilinear(c, 2), weights), [coarse], 'upsample_bilinear')]


def tiny_sample(rng: np.random.Generator) -> Sample:
    """8×8 наклонная плоскость, признаки положительны; фокус подобран так, чтобы у грубых точек были соседи."""
    intrinsics = CameraIntrinsics(fx=25.0, fy=25.0, cx=4.0, cy=4.0, width=8, height=8)
    v, u = np.mgrid[0:8, 0:8]
    gt = 2.0 + 0.03 * u + 0.02 * v
    noisy = gt + 0.02 * rng.normal(size=gt.shape)
    channels = np.stack([noisy] + [rng.uniform(0.5, 1.5, size=gt.shape) for _ in range(4)])
    stack = FeatureStack(channels=channels, init_distance=noisy, valid=np.ones(gt.shape, dtype=bool))
    return Sample(features=stack, gt_distance=gt, mask=np.ones(gt.shape, dtype=bool), intrinsics=intrinsics,
                  sample_id='tiny')


def conditioned_arrays(config: NetworkConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """
    Параметры маленькой сети для проверки градиентов.

    Веса и смещения 2D-блоков положительны, смещение скрытого слоя ядра больше
    |W1·смещение| при |смещение| <= 1, поэтому каждый вход leaky-ReLU положителен и
    отстоит от излома на десятые доли. Производные выхода по параметрам тогда
    складываются из слагаемых одного знака и не тонут в шуме округления.
    """
    arrays = {}
    for name, shape in ModelParams.expected_shapes(config).items():
        if name.endswith('kernel'):
            arrays[name] = rng.uniform(0.5, 1.5, size=shape) / (9 * shape[2])
        elif name.endswith('bias'):
            arrays[name] = rng.uniform(0.05, 0.15, size=shape)
        elif name.endswith('w1'):
            arrays[name] = _away_from_zero(rng, shape, 0.05, 0.2)
        elif name.endswith('b1'):
            arrays[name] = rng.uniform(0.8, 1.2, size=shape)
        else:
            arrays[name] = rng.uniform(0.005, 0.015, size=shape)
    return arrays


def suite_network(rng: np.random.Generator) -> List[GradCheckReport]:
    config = NetworkConfig.tiny()
    names = list(ModelParams.expected_shapes(config))
    arrays = conditioned_arrays(config, rng)
    sample = tiny_sample(rng)
    reference = forward(ModelParams.from_arrays(config, arrays).detached(), sample)
    frozen = reference.frozen_geometry()

    # линейный вес по пикселям: вклады симметричных краёв облака в градиент W1 не сокращаются
    height, width = sample.gt_distance.shape
    v, u = np.mgrid[0:height, 0:width]
    ramp = Tensor(((u + 0.5) / width + (v + 0.5) / height).reshape(-1))
    # цель ниже обеих карт: невязки L1 далеко от нуля
    target = np.minimum(reference.d_out.data, reference.d_3d.data) - 0.25
    mask = np.ones(target.shape, dtype=bool)

    def objective(*tensors):
        result = forward(ModelParams(config, dict(zip(names, tensors))), sample, frozen=frozen)
        maps = [T.mul(T.reshape(m, (m.size,)), ramp) for m in (result.d_out, result.d_3d)]
        loss = coarse_fine_loss(result.d_out, result.d_3d, target, mask)
        return T.concat(maps + [T.reshape(loss, (1,))], axis=0)

    return [_check(objective, [arrays[name] for name in names], 'tiny network (все параметры и loss)')]


SUITES: Dict[str, Callable[[np.random.Generator], List[GradCheckReport]]] = {
    'elementwise': suite_elementwise,
    'linear': suite_linear,
    'conv2d': suite_conv2d,
    'mc_conv': suite_mc_conv,
    'radu_update': suite_radu_update,
    'pool': suite_pool,
    'upsample': suite_upsample,
    'network': suite_network,
}


def run_suites(names=None, seed: int = 0) -> List[GradCheckReport]:
    reports = []
    for name in names or SUITES:
        rng = np.random.default_rng([seed, list(SUITES).index(name)])
        for report in SUITES[name](rng):
            level = logging.INFO if report.passed else logging.ERROR
            logger.log(level, str(report))
            reports.append(report)
    return reports
